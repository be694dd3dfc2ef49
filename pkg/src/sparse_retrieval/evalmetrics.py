"""Retrieval quality metrics and relative-impact reporting.

Accuracy@k is hit-rate@k: the fraction of queries with at least one
relevant document in the top k. Strict mode requires every run query to
be judged; lenient mode skips unjudged queries and counts them in the
report. TREC text formats: qrels lines are "qid 0 docid rel" (rel > 0
means relevant; rel 0 lines are ignored per the TREC convention), run
lines are "qid Q0 docid rank score tag".
"""

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, Optional

from .errors import FormatError
from .retrieval import RankedRun


@dataclass(frozen=True)
class Qrels:
    relevant: dict  # query_id -> frozenset of doc_ids

    def __post_init__(self):
        for qid, docs in self.relevant.items():
            if not docs:
                raise ValueError(f"empty relevance set for query {qid!r}")

    def __contains__(self, qid):
        return qid in self.relevant

    def __getitem__(self, qid):
        return self.relevant[qid]

    def __len__(self):
        return len(self.relevant)


def _check_queries(run: RankedRun, qrels: Qrels, strict: bool):
    judged = {}
    skipped = 0
    for qid, ranking in run.results.items():
        if qid not in qrels:
            if strict:
                raise ValueError(f"query {qid!r} missing from qrels (strict mode)")
            skipped += 1
            continue
        judged[qid] = ranking
    if not judged:
        raise ValueError("no judged queries in run")
    return judged, skipped


def accuracy_at_k(run: RankedRun, qrels: Qrels, k: int, strict=True) -> float:
    """Fraction of queries whose top-k contains >= 1 relevant doc."""
    if k < 1:
        raise ValueError("k must be >= 1")
    judged, _ = _check_queries(run, qrels, strict)
    hits = 0
    for qid, ranking in judged.items():
        relevant = qrels[qid]
        if any(doc_id in relevant for doc_id, _ in ranking[:k]):
            hits += 1
    return hits / len(judged)


def mrr_at_10(run: RankedRun, qrels: Qrels, strict=True) -> float:
    """Mean over queries of 1/rank of the first relevant doc, 0 past rank 10."""
    judged, _ = _check_queries(run, qrels, strict)
    total = 0.0
    for qid, ranking in judged.items():
        relevant = qrels[qid]
        for rank, (doc_id, _) in enumerate(ranking[:10], start=1):
            if doc_id in relevant:
                total += 1.0 / rank
                break
    return total / len(judged)


def relative_impact(candidate: float, baseline: float) -> float:
    """Signed percentage 100 * (candidate/baseline - 1)."""
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    return 100.0 * (candidate / baseline - 1.0)


def read_qrels(path) -> Qrels:
    relevant: Dict[str, set] = {}
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"qrels line needs 4 fields, got {len(parts)}",
                                  path=str(path), line=lineno)
            qid, _, doc_id, rel = parts
            try:
                rel = int(rel)
            except ValueError as e:
                raise FormatError(f"bad relevance value {rel!r}",
                                  path=str(path), line=lineno) from e
            if rel > 0:
                relevant.setdefault(qid, set()).add(doc_id)
    return Qrels({qid: frozenset(docs) for qid, docs in relevant.items()})


def write_run(run: RankedRun, path, tag="sparse-retrieval"):
    with open(path, "w", encoding="utf-8") as fh:
        for qid, ranking in run.results.items():
            for rank, (doc_id, score) in enumerate(ranking, start=1):
                fh.write(f"{qid} Q0 {doc_id} {rank} {score:.6f} {tag}\n")


def read_run(path) -> RankedRun:
    results: Dict[str, list] = {}
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise FormatError(f"run line needs 6 fields, got {len(parts)}",
                                  path=str(path), line=lineno)
            qid, _, doc_id, _, score, _ = parts
            try:
                score = float(score)
            except ValueError as e:
                raise FormatError(f"bad score {score!r}", path=str(path), line=lineno) from e
            results.setdefault(qid, []).append((doc_id, score))
    return RankedRun(results)


CSV_COLUMNS = ["Model", "Tied", "Sparsity", "Block-Sparsity",
               "Accuracy @20", "Impact", "Accuracy @100", "Impact",
               "Accuracy @200", "Impact"]


@dataclass
class MetricReport:
    """Metrics for one model run, with impacts against a named baseline."""

    model: str
    tied: bool
    sparsity: float
    block_sparsity: bool
    accuracy: dict  # depth -> fraction
    mrr10: Optional[float] = None
    baseline: Optional[str] = None
    impact: dict = field(default_factory=dict)  # depth -> signed percent
    mrr10_impact: Optional[float] = None
    skipped_queries: int = 0

    def __post_init__(self):
        depths = sorted(self.accuracy)
        values = [self.accuracy[d] for d in depths]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("accuracies must lie in [0, 1]")
        if any(a > b + 1e-12 for a, b in zip(values, values[1:])):
            raise ValueError("accuracy must be non-decreasing in k")
        if self.mrr10 is not None and not 0.0 <= self.mrr10 <= 1.0:
            raise ValueError("mrr@10 must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "model": self.model,
            "tied": self.tied,
            "sparsity": self.sparsity,
            "block_sparsity": self.block_sparsity,
            "accuracy": {str(k): v for k, v in self.accuracy.items()},
            "mrr10": self.mrr10,
            "baseline": self.baseline,
            "impact": {str(k): v for k, v in self.impact.items()},
            "mrr10_impact": self.mrr10_impact,
            "skipped_queries": self.skipped_queries,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricReport":
        return cls(
            model=d["model"], tied=d["tied"], sparsity=d["sparsity"],
            block_sparsity=d["block_sparsity"],
            accuracy={int(k): v for k, v in d["accuracy"].items()},
            mrr10=d.get("mrr10"), baseline=d.get("baseline"),
            impact={int(k): v for k, v in d.get("impact", {}).items()},
            mrr10_impact=d.get("mrr10_impact"),
            skipped_queries=d.get("skipped_queries", 0),
        )


def evaluate(run: RankedRun, qrels: Qrels, depths=(20, 100, 200), *, model="model",
             tied=True, sparsity=0.0, block_sparsity=False, strict=True,
             baseline: Optional[MetricReport] = None) -> MetricReport:
    """Compute accuracy@depths and MRR@10 for a run, plus impacts if a
    baseline report is supplied."""
    if list(depths) != sorted(depths):
        raise ValueError("depths must be ascending")
    _, skipped = _check_queries(run, qrels, strict)
    accuracy = {k: accuracy_at_k(run, qrels, k, strict=strict) for k in depths}
    report = MetricReport(model=model, tied=tied, sparsity=sparsity,
                          block_sparsity=block_sparsity, accuracy=accuracy,
                          mrr10=mrr_at_10(run, qrels, strict=strict),
                          skipped_queries=skipped)
    if baseline is not None:
        report.baseline = baseline.model
        for k in depths:
            if k in baseline.accuracy and baseline.accuracy[k] > 0:
                report.impact[k] = relative_impact(accuracy[k], baseline.accuracy[k])
        if report.mrr10 is not None and baseline.mrr10:
            report.mrr10_impact = relative_impact(report.mrr10, baseline.mrr10)
    return report


def write_report_json(report: MetricReport, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report_json(path) -> MetricReport:
    with open(path, "r", encoding="utf-8") as fh:
        return MetricReport.from_json_dict(json.load(fh))


def write_metric_table(reports, path):
    """Fixed-column CSV, one row per model (accuracy-table layout)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            row = [r.model, "Yes" if r.tied else "No",
                   f"{100.0 * r.sparsity:.2f}%", "Yes" if r.block_sparsity else "No"]
            for k in (20, 100, 200):
                acc = r.accuracy.get(k)
                row.append("" if acc is None else f"{100.0 * acc:.2f}%")
                imp = r.impact.get(k)
                row.append("" if imp is None else f"{imp:.2f}%")
            writer.writerow(row)
