import csv

import pytest

from sparse_retrieval.errors import FormatError
from sparse_retrieval.evalmetrics import (
    CSV_COLUMNS,
    MetricReport,
    Qrels,
    accuracy_at_k,
    evaluate,
    mrr_at_10,
    read_qrels,
    read_report_json,
    read_run,
    relative_impact,
    write_metric_table,
    write_report_json,
    write_run,
)
from sparse_retrieval.retrieval import RankedRun


def run_with_hit_at(rank, total=200, qid="q1", hit_doc="rel"):
    ranking = []
    for i in range(1, total + 1):
        doc = hit_doc if i == rank else f"junk{i}"
        ranking.append((doc, float(total - i)))
    return {qid: ranking}


class TestAccuracyAtK:
    def test_all_rank_one(self):
        run = RankedRun({**run_with_hit_at(1, qid="q1"), **run_with_hit_at(1, qid="q2")})
        qrels = Qrels({"q1": frozenset(["rel"]), "q2": frozenset(["rel"])})
        assert accuracy_at_k(run, qrels, 20) == 1.0

    def test_hand_count_half(self):
        run = RankedRun({**run_with_hit_at(3, qid="q1"), **run_with_hit_at(25, qid="q2")})
        qrels = Qrels({"q1": frozenset(["rel"]), "q2": frozenset(["rel"])})
        assert accuracy_at_k(run, qrels, 20) == 0.5

    def test_hand_count_full_at_100(self):
        run = RankedRun({**run_with_hit_at(3, qid="q1"), **run_with_hit_at(25, qid="q2")})
        qrels = Qrels({"q1": frozenset(["rel"]), "q2": frozenset(["rel"])})
        assert accuracy_at_k(run, qrels, 100) == 1.0

    def test_monotone_in_k(self):
        run = RankedRun({**run_with_hit_at(7, qid="q1"), **run_with_hit_at(150, qid="q2"),
                         **run_with_hit_at(42, qid="q3")})
        qrels = Qrels({q: frozenset(["rel"]) for q in ("q1", "q2", "q3")})
        values = [accuracy_at_k(run, qrels, k) for k in (1, 20, 100, 200)]
        assert values == sorted(values)

    def test_strict_mode_rejects_unjudged(self):
        run = RankedRun(run_with_hit_at(1, qid="mystery"))
        qrels = Qrels({"other": frozenset(["rel"])})
        with pytest.raises(ValueError, match="strict"):
            accuracy_at_k(run, qrels, 10)

    def test_lenient_mode_skips(self):
        run = RankedRun({**run_with_hit_at(1, qid="q1"), **run_with_hit_at(1, qid="ghost")})
        qrels = Qrels({"q1": frozenset(["rel"])})
        assert accuracy_at_k(run, qrels, 10, strict=False) == 1.0


class TestMrrAt10:
    def test_all_first_rank(self):
        run = RankedRun(run_with_hit_at(1))
        qrels = Qrels({"q1": frozenset(["rel"])})
        assert mrr_at_10(run, qrels) == 1.0

    def test_rank_two(self):
        run = RankedRun(run_with_hit_at(2))
        qrels = Qrels({"q1": frozenset(["rel"])})
        assert mrr_at_10(run, qrels) == 0.5

    def test_beyond_ten_scores_zero(self):
        run = RankedRun({**run_with_hit_at(1, qid="q1"), **run_with_hit_at(11, qid="q2")})
        qrels = Qrels({"q1": frozenset(["rel"]), "q2": frozenset(["rel"])})
        assert mrr_at_10(run, qrels) == 0.5

    def test_mrr_bounded_by_accuracy_at_10(self):
        run = RankedRun({**run_with_hit_at(4, qid="q1"), **run_with_hit_at(9, qid="q2"),
                         **run_with_hit_at(30, qid="q3")})
        qrels = Qrels({q: frozenset(["rel"]) for q in ("q1", "q2", "q3")})
        assert mrr_at_10(run, qrels) <= accuracy_at_k(run, qrels, 10)


class TestRelativeImpact:
    def test_published_cell_at_100(self):
        assert round(relative_impact(85.84, 86.34), 2) == -0.58

    def test_published_cell_at_20(self):
        assert round(relative_impact(78.78, 79.83), 2) == -1.32

    def test_identity_is_zero(self):
        assert relative_impact(47.3, 47.3) == pytest.approx(0.0, abs=1e-12)

    def test_sign_antisymmetry(self):
        up = relative_impact(110.0, 100.0)
        down = relative_impact(90.0, 100.0)
        assert up == pytest.approx(10.0) and down == pytest.approx(-10.0)

    def test_zero_baseline_rejected(self):
        with pytest.raises(ValueError):
            relative_impact(1.0, 0.0)


class TestTrecIO:
    def test_qrels_line(self, tmp_path):
        p = tmp_path / "qrels.txt"
        p.write_text("q1 0 d7 1\n")
        qrels = read_qrels(p)
        assert qrels["q1"] == frozenset(["d7"])

    def test_rel_zero_ignored(self, tmp_path):
        p = tmp_path / "qrels.txt"
        p.write_text("q1 0 d7 1\nq1 0 d8 0\nq2 0 d9 0\n")
        qrels = read_qrels(p)
        assert qrels["q1"] == frozenset(["d7"])
        assert "q2" not in qrels

    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "qrels.txt"
        p.write_text("q1 0 d7 1\nbroken line\n")
        with pytest.raises(FormatError, match="line=2"):
            read_qrels(p)

    def test_run_roundtrip(self, tmp_path):
        run = RankedRun({"q1": [("d1", 0.9), ("d2", 0.5)], "q2": [("d3", 0.25)]})
        p = tmp_path / "run.trec"
        write_run(run, p)
        back = read_run(p)
        assert set(back.results) == {"q1", "q2"}
        assert [d for d, _ in back.results["q1"]] == ["d1", "d2"]
        for (d1, s1), (d2, s2) in zip(back.results["q1"], run.results["q1"]):
            assert d1 == d2 and s1 == pytest.approx(s2, abs=1e-6)

    def test_crlf_and_lf_parse_identically(self, tmp_path):
        lf = tmp_path / "lf.txt"
        crlf = tmp_path / "crlf.txt"
        lf.write_bytes(b"q1 0 d7 1\nq2 0 d8 1\n")
        crlf.write_bytes(b"q1 0 d7 1\r\nq2 0 d8 1\r\n")
        assert read_qrels(lf).relevant == read_qrels(crlf).relevant


class TestMetricReport:
    def make_run_and_qrels(self):
        run = RankedRun({**run_with_hit_at(2, qid="q1"), **run_with_hit_at(40, qid="q2")})
        qrels = Qrels({"q1": frozenset(["rel"]), "q2": frozenset(["rel"])})
        return run, qrels

    def test_evaluate_and_impacts(self):
        run, qrels = self.make_run_and_qrels()
        base = evaluate(run, qrels, model="baseline")
        cand = evaluate(run, qrels, model="candidate", baseline=base)
        assert cand.impact[20] == pytest.approx(0.0, abs=1e-12)
        assert cand.baseline == "baseline"

    def test_monotone_validation(self):
        with pytest.raises(ValueError):
            MetricReport(model="m", tied=True, sparsity=0.0, block_sparsity=False,
                         accuracy={20: 0.9, 100: 0.5})

    def test_json_roundtrip(self, tmp_path):
        run, qrels = self.make_run_and_qrels()
        rep = evaluate(run, qrels, model="m", sparsity=0.9)
        p = tmp_path / "report.json"
        write_report_json(rep, p)
        back = read_report_json(p)
        assert back == rep

    def test_csv_table_layout(self, tmp_path):
        run, qrels = self.make_run_and_qrels()
        base = evaluate(run, qrels, model="dense")
        cand = evaluate(run, qrels, model="sparse90", sparsity=0.9, baseline=base)
        p = tmp_path / "table.csv"
        write_metric_table([base, cand], p)
        with open(p) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == CSV_COLUMNS
        assert rows[1][0] == "dense" and rows[2][0] == "sparse90"
        assert rows[2][1] == "Yes" and rows[2][2] == "90.00%"
