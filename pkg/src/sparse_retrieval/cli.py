"""Command-line interface.

Subcommands map 1:1 onto module operations: init-model, prune, train,
encode, index, search, eval, bench, report. Flags use kebab-case; a
single JSON experiment config can be supplied with --config and its
fields override flags. Commands are deterministic given seeds and
inputs (bench timing values excepted, by nature).
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import benchharness, dataio, evalmetrics, modelio, retrieval, sparsity
from .biencoder import (
    COSINE_PAIR,
    INBATCH_SOFTMAX,
    BiEncoder,
    TrainConfig,
    load_training_data,
    train as train_model,
)
from .encoder import PRESETS, EncoderConfig, init_weights
from .errors import FormatError, TrainingDiverged


class ExperimentConfig:
    """JSON experiment file; known fields override command-line flags."""

    PATH_FIELDS = {"corpus", "queries", "qrels", "train_data", "model", "index"}

    def __init__(self, doc: dict, base_dir: Path):
        self.doc = doc
        self.base_dir = base_dir
        depths = doc.get("depths")
        if depths is not None and list(depths) != sorted(depths):
            raise ValueError("config depths must be ascending")
        for field in self.PATH_FIELDS & set(doc):
            path = self.resolve(doc[field])
            if not path.exists():
                raise FileNotFoundError(f"config {field} path does not exist: {path}")

    def resolve(self, p) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh), Path(path).resolve().parent)

    def apply(self, args):
        mapping = {
            "corpus": "corpus", "queries": "queries", "qrels": "qrels",
            "train_data": "data", "depths": "depths", "model": "model",
            "index": "index",
        }
        for key, attr in mapping.items():
            if key in self.doc and hasattr(args, attr):
                value = self.doc[key]
                if key in self.PATH_FIELDS:
                    value = str(self.resolve(value))
                elif key == "depths":
                    value = ",".join(str(d) for d in value)
                setattr(args, attr, value)
        for section, fields in (("train", {"epochs": "epochs", "learning_rate": "learning_rate",
                                           "batch_size": "batch_size",
                                           "negatives_per_query": "negatives",
                                           "seed": "seed", "loss_kind": "loss"}),
                                ("bench", {"num_queries": "num_queries",
                                           "batch_size": "batch_size", "max_len": "max_len",
                                           "runs": "runs", "warmup_queries": "warmup"})):
            for key, attr in fields.items():
                if key in self.doc.get(section, {}) and hasattr(args, attr):
                    setattr(args, attr, self.doc[section][key])


def _load_weights(path, compress=False):
    weights = modelio.load_model(path)
    if compress:
        if not weights.all_dense():
            return weights  # already compressed on disk
        weights = sparsity.compress(weights)
    return weights


def _load_dense_weights(path):
    weights = modelio.load_model(path)
    if not weights.all_dense():
        print("note: decompressing sparse-stored model for training", file=sys.stderr)
        weights = sparsity.decompress(weights)
        weights.masks = sparsity.reconstruct_masks(weights)
    return weights


def cmd_init_model(args):
    config = PRESETS[args.preset]
    if args.pooling or args.no_normalize:
        config = EncoderConfig(
            num_layers=config.num_layers, hidden_dim=config.hidden_dim,
            num_heads=config.num_heads, ff_dim=config.ff_dim,
            vocab_size=config.vocab_size, max_seq_len=config.max_seq_len,
            pooling=args.pooling or config.pooling,
            normalize_embeddings=not args.no_normalize,
        )
    weights = init_weights(config, seed=args.seed)
    fp = modelio.save_model(weights, args.out)
    print(f"wrote {args.out} (preset={args.preset}, seed={args.seed}, fingerprint={fp})")
    return 0


def cmd_prune(args):
    weights = _load_dense_weights(args.model)
    pattern = sparsity.BLOCK if args.pattern == "block" else sparsity.UNSTRUCTURED
    block = (args.block_rows, args.block_cols) if pattern == sparsity.BLOCK else None
    pruned = sparsity.prune(weights, args.sparsity, pattern=pattern, block=block)
    if args.compress:
        pruned = sparsity.compress(pruned)
    modelio.save_model(pruned, args.out)
    stats = sparsity.sparsity_stats(pruned)
    print(f"wrote {args.out} (global sparsity "
          f"{stats['global']['sparsity']:.4f}, pattern={args.pattern})")
    return 0


def cmd_train(args):
    weights = _load_dense_weights(args.model)
    config = TrainConfig(
        epochs=args.epochs, learning_rate=args.learning_rate,
        batch_size=args.batch_size, negatives_per_query=args.negatives,
        seed=args.seed, loss_kind=args.loss,
    )
    dataset = load_training_data(args.data)

    if args.mode == "tied":
        if not args.out:
            raise ValueError("--out is required for tied training")
        model = BiEncoder.tied(weights)
    else:
        if not (args.out_query and args.out_doc):
            raise ValueError("--out-query and --out-doc are required for untied training")
        model = BiEncoder.untied(weights)

    _, curve = train_model(dataset, config, model,
                           progress=lambda e, loss: print(f"epoch {e}: mean loss {loss:.6f}"))

    def finalize(w):
        return sparsity.compress(w) if args.compress and w.profile and w.profile.frozen else w

    if args.mode == "tied":
        modelio.save_model(finalize(model.query_encoder), args.out)
        print(f"wrote {args.out}")
    else:
        modelio.save_model(finalize(model.query_encoder), args.out_query)
        modelio.save_model(finalize(model.doc_encoder), args.out_doc)
        print(f"wrote {args.out_query} and {args.out_doc}")
    return 0


def _read_texts(path):
    if str(path).endswith(".jsonl"):
        corpus = dataio.load_corpus(path)
        return [doc_id for doc_id, _ in corpus.documents], [t for _, t in corpus.documents]
    queries = dataio.load_queries(path)
    return [qid for qid, _ in queries], [t for _, t in queries]


def cmd_encode(args):
    weights = _load_weights(args.model, args.compress)
    ids, texts = _read_texts(args.input)
    from .encoder import encode
    vectors = encode(weights, texts,
                     max_len=min(args.max_len, weights.config.max_seq_len),
                     batch_size=args.batch_size)
    index = retrieval.FlatIndex(
        dim=weights.config.hidden_dim, doc_ids=ids, vectors=vectors,
        fingerprint=modelio.fingerprint(weights),
        normalized=weights.config.normalize_embeddings)
    retrieval.save_index(index, args.out)
    print(f"wrote {args.out} ({len(ids)} vectors, dim {index.dim})")
    return 0


def cmd_index(args):
    weights = _load_weights(args.model, args.compress)
    corpus = dataio.load_corpus(args.corpus)
    index = retrieval.build_index(corpus, weights, batch_size=args.batch_size,
                                  max_len=args.max_len)
    retrieval.save_index(index, args.out)
    print(f"wrote {args.out} ({len(index)} documents, dim {index.dim})")
    return 0


def cmd_search(args):
    weights = _load_weights(args.model, args.compress)
    index = retrieval.load_index(args.index)
    queries = dataio.load_queries(args.queries)
    run = retrieval.search_batch(index, weights, queries, k=args.k,
                                 max_len=args.max_len, batch_size=args.batch_size,
                                 warn_on_mismatch=not args.untied)
    evalmetrics.write_run(run, args.out, tag=args.tag)
    print(f"wrote {args.out} ({len(queries)} queries, k={args.k})")
    return 0


def cmd_eval(args):
    run = evalmetrics.read_run(args.run)
    qrels = evalmetrics.read_qrels(args.qrels)
    depths = [int(d) for d in args.depths.split(",")]
    baseline = evalmetrics.read_report_json(args.baseline) if args.baseline else None
    report = evalmetrics.evaluate(
        run, qrels, depths=depths, model=args.label, tied=args.tied == "yes",
        sparsity=args.sparsity, block_sparsity=args.block == "yes",
        strict=not args.lenient, baseline=baseline)
    evalmetrics.write_report_json(report, args.out)
    if args.csv:
        evalmetrics.write_metric_table([report], args.csv)
    for k in depths:
        print(f"accuracy@{k}: {report.accuracy[k]:.4f}")
    print(f"mrr@10: {report.mrr10:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args):
    weights = _load_weights(args.model, args.compress)
    _, texts = _read_texts(args.queries)
    config = benchharness.BenchConfig(
        num_queries=args.num_queries, batch_size=args.batch_size,
        max_len=args.max_len, runs=args.runs, warmup_queries=args.warmup)
    runs = benchharness.run_benchmark(weights, texts, config)
    aggregates = benchharness.aggregate(runs)
    qps = aggregates.average[benchharness.COLUMNS.index("items/sec")]
    if args.out_csv:
        benchharness.emit_report(runs, aggregates, args.out_csv, fmt="csv")
        print(f"wrote {args.out_csv}")
    if args.out_json:
        benchharness.emit_report(runs, aggregates, args.out_json, fmt="json")
        print(f"wrote {args.out_json}")
    print(f"items/sec: {qps:.3f}")
    return 0


def _manifest_entry_values(entry, base_dir):
    """Resolve {label, qps|bench, accuracy|eval} to (label, qps, {dataset: pct})."""
    label = entry["label"]
    if "qps" in entry:
        qps = float(entry["qps"])
    else:
        path = base_dir / entry["bench"] if not Path(entry["bench"]).is_absolute() \
            else Path(entry["bench"])
        qps = benchharness.read_report_qps(path)
    accuracy = {}
    if "accuracy" in entry:
        accuracy = {ds: float(v) for ds, v in entry["accuracy"].items()}
    elif "eval" in entry:
        for ds, rel in entry["eval"].items():
            path = base_dir / rel if not Path(rel).is_absolute() else Path(rel)
            report = evalmetrics.read_report_json(path)
            depth = max(d for d in report.accuracy if d <= 100) if report.accuracy else None
            accuracy[ds] = 100.0 * report.accuracy[depth]
    return label, qps, accuracy


def cmd_report(args):
    if args.stats:
        weights = modelio.load_model(args.model)
        stats = sparsity.sparsity_stats(weights)
        text = sparsity.stats_to_json(stats)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
            print(f"wrote {args.out}")
        print(f"global sparsity: {stats['global']['sparsity']:.4f}")
        if args.verbose:
            print(text)
        return 0

    if not args.manifest:
        raise ValueError("report needs either --stats --model or --manifest")
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base_dir = Path(args.manifest).resolve().parent
    entries = [_manifest_entry_values(e, base_dir) for e in manifest["models"]]
    baseline_label = manifest["baseline"]
    baseline = next((e for e in entries if e[0] == baseline_label), None)
    if baseline is None:
        raise ValueError(f"baseline {baseline_label!r} not among manifest models")
    datasets = sorted({ds for _, _, acc in entries for ds in acc})

    rows = []
    for label, qps, accuracy in entries:
        row = {"model": label, "qps": round(qps, 3),
               "speedup": round(benchharness.speedup(qps, baseline[1]), 2)}
        for ds in datasets:
            row[f"accuracy@100 {ds}"] = (round(accuracy[ds], 2)
                                         if ds in accuracy else None)
        rows.append(row)

    summary = {"baseline": baseline_label, "datasets": datasets, "models": rows}
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        print(f"wrote {args.json_out}")
    if args.out:
        import csv as _csv
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            writer = _csv.writer(fh)
            header = ["Model"] + [f"{ds} Accuracy@100" for ds in datasets] + ["QPS", "Speedup"]
            writer.writerow(header)
            for row in rows:
                cells = [row["model"]]
                for ds in datasets:
                    v = row[f"accuracy@100 {ds}"]
                    cells.append("" if v is None else f"{v:.2f}%")
                cells += [f"{row['qps']:.3f}", f"{row['speedup']:.2f}"]
                writer.writerow(cells)
        print(f"wrote {args.out}")
    if args.figure_data:
        points = []
        for label, qps, accuracy in entries:
            for ds in datasets:
                if ds in accuracy and ds in baseline[2] and baseline[2][ds] > 0:
                    points.append({"series": ds, "label": label, "qps": qps,
                                   "accuracy": accuracy[ds],
                                   "baseline_accuracy": baseline[2][ds]})
        benchharness.emit_figure_data(points, args.figure_data, fmt="csv")
        print(f"wrote {args.figure_data}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sparse-retrieval",
        description="prune, train, index, search, evaluate and benchmark "
                    "bi-encoders with dense or sparsity-aware execution")
    parser.add_argument("--config", help="JSON experiment config; its fields "
                                         "override flags")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="write a randomly initialized model file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--pooling", choices=["cls", "mean"])
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("prune", help="magnitude-prune a model and freeze the profile")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--pattern", choices=["unstructured", "block"], default="unstructured")
    p.add_argument("--block-rows", type=int, default=1)
    p.add_argument("--block-cols", type=int, default=4)
    p.add_argument("--compress", action="store_true",
                   help="store pruned layers as CSR/BSR in the output file")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("train", help="contrastive training of a tied or untied bi-encoder")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="training JSONL")
    p.add_argument("--mode", choices=["tied", "untied"], default="tied")
    p.add_argument("--out", help="output model (tied mode)")
    p.add_argument("--out-query", help="query encoder output (untied mode)")
    p.add_argument("--out-doc", help="doc encoder output (untied mode)")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--learning-rate", type=float, default=7e-5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--negatives", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", choices=[COSINE_PAIR, INBATCH_SOFTMAX],
                   default=INBATCH_SOFTMAX)
    p.add_argument("--compress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode texts from TSV/JSONL into a vector file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--compress", action="store_true",
                   help="run the sparse execution path")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="build a flat index from a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--compress", action="store_true")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="search an index with queries, write a TREC run")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--tag", default="sparse-retrieval")
    p.add_argument("--compress", action="store_true")
    p.add_argument("--untied", action="store_true",
                   help="query encoder intentionally differs from the index "
                        "encoder; skip the fingerprint warning")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a TREC run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--depths", default="20,100,200")
    p.add_argument("--out", required=True, help="metric report JSON")
    p.add_argument("--csv", help="also write the fixed-column CSV table")
    p.add_argument("--label", default="model")
    p.add_argument("--tied", choices=["yes", "no"], default="yes")
    p.add_argument("--sparsity", type=float, default=0.0)
    p.add_argument("--block", choices=["yes", "no"], default="no")
    p.add_argument("--baseline", help="baseline metric report JSON for impact columns")
    p.add_argument("--lenient", action="store_true",
                   help="skip unjudged queries instead of failing")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="throughput/latency benchmark of query encoding")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--num-queries", type=int, default=6500)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.add_argument("--compress", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="sparsity stats, or join eval+bench into a summary")
    p.add_argument("--stats", action="store_true")
    p.add_argument("--model")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--manifest", help="JSON manifest of models with eval/bench outputs")
    p.add_argument("--out", help="summary CSV (or stats JSON with --stats)")
    p.add_argument("--json-out", help="summary JSON")
    p.add_argument("--figure-data", help="throughput vs relative accuracy CSV")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            ExperimentConfig.load(args.config).apply(args)
        return args.func(args)
    except (FormatError, TrainingDiverged, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
