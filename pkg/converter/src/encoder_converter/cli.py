"""Converter CLI: convert / verify / fixtures."""

import argparse
import sys
from pathlib import Path

from .convert import convert_checkpoint
from .fixtures import emit_fixtures
from .parity import DEFAULT_THRESHOLD, verify_parity


def cmd_convert(args):
    _, manifest = convert_checkpoint(args.checkpoint, args.out,
                                     manifest_path=args.manifest,
                                     force_dense=args.force_dense)
    print(f"wrote {args.out} (global sparsity {manifest.global_sparsity:.4f}, "
          f"fingerprint {manifest.fingerprint})")
    if args.manifest:
        print(f"wrote {args.manifest}")
    return 0


def cmd_verify(args):
    report = verify_parity(args.checkpoint, args.model, args.fixtures,
                           threshold=args.threshold)
    for r in report.results:
        status = "ok" if r.passed else f"FAIL (first divergent layer {r.first_divergent_layer})"
        print(f"fixture {r.index}: max abs dev {r.max_abs_dev:.3e} {status}")
    print(f"worst deviation {report.worst_dev:.3e} "
          f"({'PASS' if report.passed else 'FAIL'} at threshold {report.threshold:g})")
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
        print(f"wrote {args.report}")
    return 0 if report.passed else 1


def cmd_fixtures(args):
    texts = [line.rstrip("\n") for line in
             Path(args.texts).read_text(encoding="utf-8").splitlines()
             if line.strip()]
    fixtures = emit_fixtures(texts, args.out, vocab_file=args.vocab,
                             max_length=args.max_length)
    print(f"wrote {args.out} ({len(fixtures)} fixtures)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="encoder-converter",
        description="export BERT-family checkpoints into the sparse-retrieval "
                    "model format and verify forward parity")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="checkpoint directory -> model file + manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--force-dense", action="store_true",
                   help="store all matrices dense regardless of measured sparsity")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("verify", help="forward-parity check on token-id fixtures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--fixtures", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--report")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fixtures", help="emit token-id fixtures with a real tokenizer")
    p.add_argument("--texts", required=True, help="one text per line")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="vocab.txt; built from the texts when omitted")
    p.add_argument("--max-length", type=int, default=32)
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
