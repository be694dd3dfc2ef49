"""Exact inner-product flat index: build offline, search online.

Search is exhaustive and exact (the module's defining property); ties
break toward the lexicographically smaller doc_id so runs are
reproducible. The index file format is magic "DSRI", version u32 LE,
length-prefixed JSON header, length-prefixed UTF-8 doc_id table, then
f32 little-endian vectors.
"""

import json
import struct
import warnings
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import modelio
from .encoder import EncoderWeights, encode
from .errors import FormatError

MAGIC = b"DSRI"
VERSION = 1

QUERY_MAX_LEN = 32
DOC_MAX_LEN = 128


@dataclass(frozen=True)
class Corpus:
    documents: tuple  # of (doc_id, text)

    def __post_init__(self):
        object.__setattr__(self, "documents", tuple(self.documents))
        seen = set()
        for doc_id, _ in self.documents:
            if not doc_id:
                raise ValueError("doc_ids must be nonempty")
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id {doc_id!r}")
            seen.add(doc_id)

    def __len__(self):
        return len(self.documents)


@dataclass
class FlatIndex:
    dim: int
    doc_ids: list
    vectors: np.ndarray  # (num_docs, dim) float32
    fingerprint: str = ""
    normalized: bool = False

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.shape != (len(self.doc_ids), self.dim):
            raise ValueError(f"vectors shape {self.vectors.shape} does not match "
                             f"{len(self.doc_ids)} docs x dim {self.dim}")
        if self.normalized and len(self.doc_ids):
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-4):
                raise ValueError("normalized flag set but rows are not unit norm")

    def __len__(self):
        return len(self.doc_ids)


@dataclass
class RankedRun:
    """Per-query ordered (doc_id, score) lists."""

    results: dict  # query_id -> list[(doc_id, score)]

    def __post_init__(self):
        for qid, ranking in self.results.items():
            scores = [s for _, s in ranking]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise ValueError(f"scores for query {qid!r} are not non-increasing")
            ids = [d for d, _ in ranking]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate doc_id in ranking for query {qid!r}")


def build_index(corpus: Corpus, encoder: EncoderWeights, batch_size=32,
                max_len=DOC_MAX_LEN) -> FlatIndex:
    """Encode every document, preserving corpus order.

    max_len is clamped to the encoder's max_seq_len (the 128-token doc
    default applies to configs that can hold it)."""
    if len(corpus) == 0:
        raise ValueError("corpus must be nonempty")
    texts = [text for _, text in corpus.documents]
    try:
        vectors = encode(encoder, texts, batch_size=batch_size,
                         max_len=min(max_len, encoder.config.max_seq_len))
    except Exception as e:
        raise RuntimeError(f"encoding failed while indexing: {e}") from e
    return FlatIndex(
        dim=encoder.config.hidden_dim,
        doc_ids=[doc_id for doc_id, _ in corpus.documents],
        vectors=vectors,
        fingerprint=modelio.fingerprint(encoder),
        normalized=encoder.config.normalize_embeddings,
    )


def search(index: FlatIndex, query_vec: np.ndarray, k: int) -> List[Tuple[str, float]]:
    """Top-k by dot product, descending; ties broken by smaller doc_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query_vec, dtype=np.float32).reshape(-1)
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dim}")
    scores = index.vectors @ q
    ids = np.asarray(index.doc_ids)
    order = np.lexsort((ids, -scores))
    top = order[:min(k, len(index))]
    return [(str(ids[i]), float(scores[i])) for i in top]


def search_batch(index: FlatIndex, encoder: EncoderWeights, queries, k: int,
                 max_len=QUERY_MAX_LEN, batch_size=32,
                 warn_on_mismatch=True) -> RankedRun:
    """Encode queries (order-preserving) and search each one.

    warn_on_mismatch=False silences the encoder-fingerprint check for
    untied bi-encoders, whose query encoder legitimately differs from
    the doc encoder that built the index."""
    qids = [qid for qid, _ in queries]
    if len(set(qids)) != len(qids):
        raise ValueError("duplicate query ids")
    fp = modelio.fingerprint(encoder)
    if warn_on_mismatch and index.fingerprint and fp != index.fingerprint:
        warnings.warn(
            f"index was built with encoder {index.fingerprint} but searched "
            f"with {fp}; scores are not comparable", UserWarning, stacklevel=2)
    vecs = encode(encoder, [text for _, text in queries],
                  max_len=min(max_len, encoder.config.max_seq_len),
                  batch_size=batch_size)
    return RankedRun({qid: search(index, vecs[i], k) for i, (qid, _) in enumerate(queries)})


def save_index(index: FlatIndex, path):
    header = {
        "dim": index.dim,
        "count": len(index),
        "normalized": index.normalized,
        "fingerprint": index.fingerprint,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for doc_id in index.doc_ids:
            raw = doc_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())


def load_index(path) -> FlatIndex:
    with open(path, "rb") as fh:
        raw = fh.read()
    offset = 0

    def take(n):
        nonlocal offset
        if offset + n > len(raw):
            raise FormatError(f"truncated index: wanted {n} bytes", path=str(path),
                              offset=offset)
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}",
                          path=str(path), offset=0)
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", path=str(path), offset=4)
    (header_len,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}", path=str(path), offset=12) from e
    doc_ids = []
    for _ in range(header["count"]):
        (n,) = struct.unpack("<I", take(4))
        doc_ids.append(take(n).decode("utf-8"))
    vec_bytes = take(header["count"] * header["dim"] * 4)
    if offset != len(raw):
        raise FormatError("trailing bytes after vectors", path=str(path), offset=offset)
    vectors = np.frombuffer(vec_bytes, dtype="<f4").reshape(header["count"], header["dim"])
    return FlatIndex(dim=header["dim"], doc_ids=doc_ids, vectors=vectors.copy(),
                     fingerprint=header["fingerprint"], normalized=header["normalized"])
