"""Binary model file format.

Layout: magic "DSRM", version u32 LE, u32 LE header byte length, JSON
header (config, per-matrix storage tags, sparsity profile, fingerprint),
then payloads in canonical parameter order. Dense tensors are raw f32
little-endian row-major; CSR is u64 nnz, u64 row_ptr[], u32 col_idx[],
f32 values[]; BSR is u64 block count, u64 block_ptr[], u32 block_idx[],
f32 block values. The fingerprint is FNV-1a-64 over all payload bytes
and is verified on load.
"""

import json
import struct
from typing import Iterator

import numpy as np

from . import _loops
from .encoder import (
    EncoderConfig,
    EncoderWeights,
    LayerWeights,
    PRUNABLE_FIELDS,
    fnv1a64,
)
from .errors import FormatError
from .kernels import BsrMatrix, CsrMatrix
from .sparsity import SparsityProfile, reconstruct_masks

MAGIC = b"DSRM"
VERSION = 1

_LAYER_ORDER = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln1_gain", "ln1_bias", "ff1", "bf1", "ff2", "bf2",
                "ln2_gain", "ln2_bias")


def _tensor_names(config: EncoderConfig):
    yield "token_embedding"
    yield "position_embedding"
    yield "emb_ln_gain"
    yield "emb_ln_bias"
    for i in range(config.num_layers):
        for fieldname in _LAYER_ORDER:
            yield f"layer{i}.{fieldname}"


def _get_tensor(weights: EncoderWeights, name: str):
    if "." in name:
        layer_part, fieldname = name.split(".")
        return getattr(weights.layers[int(layer_part.removeprefix("layer"))], fieldname)
    return getattr(weights, name)


def _payload_chunks(value) -> Iterator[bytes]:
    if isinstance(value, np.ndarray):
        yield np.ascontiguousarray(value, dtype="<f4").tobytes()
    elif isinstance(value, CsrMatrix):
        yield struct.pack("<Q", value.nnz)
        yield value.row_ptr.astype("<u8").tobytes()
        yield value.col_idx.astype("<u4").tobytes()
        yield value.values.astype("<f4").tobytes()
    elif isinstance(value, BsrMatrix):
        yield struct.pack("<Q", value.nnz_blocks)
        yield value.block_ptr.astype("<u8").tobytes()
        yield value.block_idx.astype("<u4").tobytes()
        yield value.block_values.astype("<f4").tobytes()
    else:
        raise TypeError(f"cannot serialize {type(value).__name__}")


def _iter_payloads(weights: EncoderWeights) -> Iterator[bytes]:
    for name in _tensor_names(weights.config):
        yield from _payload_chunks(_get_tensor(weights, name))


def fingerprint(weights: EncoderWeights) -> str:
    """FNV-1a-64 over the canonical payload byte stream, as 16 hex digits."""
    h = 0xCBF29CE484222325
    for chunk in _iter_payloads(weights):
        h = int(_loops.fnv1a64_update(np.uint64(h), np.frombuffer(chunk, dtype=np.uint8)))
    return f"{h:016x}"


def _storage_tag(value) -> dict:
    if isinstance(value, np.ndarray):
        return {"kind": "dense"}
    if isinstance(value, CsrMatrix):
        return {"kind": "csr"}
    if isinstance(value, BsrMatrix):
        return {"kind": "bsr", "block": [value.block_rows, value.block_cols]}
    raise TypeError(type(value).__name__)


def save_model(weights: EncoderWeights, path) -> str:
    """Write a model file; returns its fingerprint."""
    weights.validate_shapes()
    cfg = weights.config
    storage = {name: _storage_tag(matrix) for name, matrix in weights.prunable_matrices()}
    fp = fingerprint(weights)
    header = {
        "config": {
            "num_layers": cfg.num_layers, "hidden_dim": cfg.hidden_dim,
            "num_heads": cfg.num_heads, "ff_dim": cfg.ff_dim,
            "vocab_size": cfg.vocab_size, "max_seq_len": cfg.max_seq_len,
            "pooling": cfg.pooling, "normalize_embeddings": cfg.normalize_embeddings,
        },
        "storage": storage,
        "profile": weights.profile.to_json_dict() if weights.profile else None,
        "fingerprint": fp,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for chunk in _iter_payloads(weights):
            fh.write(chunk)
    return fp


class _Reader:
    def __init__(self, fh, path):
        self.fh = fh
        self.path = path
        self.offset = 0
        self.hash = 0xCBF29CE484222325

    def read(self, n, *, hashed=False) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}",
                              path=self.path, offset=self.offset)
        self.offset += n
        if hashed:
            self.hash = int(_loops.fnv1a64_update(np.uint64(self.hash),
                                                  np.frombuffer(data, dtype=np.uint8)))
        return data

    def read_array(self, dtype, count) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        arr = np.frombuffer(self.read(item * count, hashed=True), dtype=dtype).copy()
        if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
            raise FormatError("non-finite values in payload", path=self.path,
                              offset=self.offset)
        return arr


def _read_matrix(r: _Reader, tag: dict, rows: int, cols: int):
    kind = tag["kind"]
    if kind == "dense":
        return r.read_array("<f4", rows * cols).reshape(rows, cols)
    if kind == "csr":
        (nnz,) = struct.unpack("<Q", r.read(8, hashed=True))
        row_ptr = r.read_array("<u8", rows + 1).astype(np.int64)
        col_idx = r.read_array("<u4", nnz).astype(np.int32)
        values = r.read_array("<f4", nnz)
        return CsrMatrix(rows, cols, row_ptr, col_idx, values)
    if kind == "bsr":
        br, bc = tag["block"]
        (nblocks,) = struct.unpack("<Q", r.read(8, hashed=True))
        block_ptr = r.read_array("<u8", rows // br + 1).astype(np.int64)
        block_idx = r.read_array("<u4", nblocks).astype(np.int32)
        block_values = r.read_array("<f4", nblocks * br * bc).reshape(nblocks, br, bc)
        return BsrMatrix(rows, cols, br, bc, block_ptr, block_idx, block_values)
    raise FormatError(f"unknown storage kind {kind!r}", path=r.path)


def load_model(path) -> EncoderWeights:
    """Read a model file, verifying magic, version and fingerprint."""
    with open(path, "rb") as fh:
        r = _Reader(fh, str(path))
        magic = r.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}",
                              path=str(path), offset=0)
        (version,) = struct.unpack("<I", r.read(4))
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", path=str(path), offset=4)
        (header_len,) = struct.unpack("<I", r.read(4))
        try:
            header = json.loads(r.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"unreadable header: {e}", path=str(path), offset=12) from e

        cfg = EncoderConfig(**header["config"])
        storage = header["storage"]
        h, f = cfg.hidden_dim, cfg.ff_dim
        shapes = {"wq": (h, h), "wk": (h, h), "wv": (h, h), "wo": (h, h),
                  "ff1": (f, h), "ff2": (h, f)}

        def vec(n):
            return r.read_array("<f4", n)

        token_embedding = r.read_array("<f4", cfg.vocab_size * h).reshape(cfg.vocab_size, h)
        position_embedding = r.read_array("<f4", cfg.max_seq_len * h).reshape(cfg.max_seq_len, h)
        emb_ln_gain, emb_ln_bias = vec(h), vec(h)
        layers = []
        for i in range(cfg.num_layers):
            fields = {}
            for fieldname in _LAYER_ORDER:
                if fieldname in PRUNABLE_FIELDS:
                    rows, cols = shapes[fieldname]
                    tag = storage[f"layer{i}.{fieldname}"]
                    fields[fieldname] = _read_matrix(r, tag, rows, cols)
                elif fieldname == "bf1":
                    fields[fieldname] = vec(f)
                else:
                    fields[fieldname] = vec(h)
            layers.append(LayerWeights(**fields))
        if fh.read(1):
            raise FormatError("trailing bytes after payload", path=str(path), offset=r.offset)

    if f"{int(r.hash):016x}" != header["fingerprint"]:
        raise FormatError(
            f"fingerprint mismatch: payload hashes to {int(r.hash):016x}, "
            f"header says {header['fingerprint']}", path=str(path))

    profile = SparsityProfile.from_json_dict(header["profile"]) if header["profile"] else None
    weights = EncoderWeights(
        config=cfg, token_embedding=token_embedding, position_embedding=position_embedding,
        emb_ln_gain=emb_ln_gain, emb_ln_bias=emb_ln_bias, layers=layers, profile=profile,
    ).validate_shapes()
    if profile is not None and profile.frozen and weights.all_dense():
        weights.masks = reconstruct_masks(weights)
    return weights
