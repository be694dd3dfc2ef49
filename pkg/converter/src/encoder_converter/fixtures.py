"""Token-id fixture generation with the real WordPiece algorithm.

When no vocabulary file is supplied, a deterministic one is built from
the input texts (specials + sorted lowercased surface tokens), so the
pipeline works without hub access; a full vocab.txt from a real
checkpoint can be passed instead and subword splits will appear.
"""

import json
import re
from pathlib import Path

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
MAX_FIXTURE_LEN = 32

_SURFACE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def build_vocab(texts, vocab_path):
    """Deterministic vocabulary covering the texts' surface tokens."""
    tokens = set()
    for text in texts:
        tokens.update(_SURFACE.findall(text.lower()))
    with open(vocab_path, "w", encoding="utf-8") as fh:
        for token in SPECIALS + sorted(tokens):
            fh.write(token + "\n")
    return vocab_path


def emit_fixtures(texts, out_path, vocab_file=None, max_length=MAX_FIXTURE_LEN):
    """Write JSONL fixtures {text, ids, mask}, all sequences <= max_length."""
    from tokenizers import BertWordPieceTokenizer

    out_path = Path(out_path)
    if vocab_file is None:
        vocab_file = build_vocab(texts, out_path.with_suffix(".vocab.txt"))
    tokenizer = BertWordPieceTokenizer(str(vocab_file), lowercase=True)
    tokenizer.enable_truncation(max_length=max_length)

    fixtures = []
    with open(out_path, "w", encoding="utf-8") as fh:
        for text in texts:
            enc = tokenizer.encode(text)
            fixture = {"text": text, "ids": enc.ids, "mask": enc.attention_mask}
            fixtures.append(fixture)
            fh.write(json.dumps(fixture) + "\n")
    return fixtures
