"""Transformer text encoder producing fixed-size embeddings.

The forward pass routes every weight matmul through the kernels module,
so a layer stored as CSR/BSR executes on the sparse path and a dense
layer on the fixed-order dense path. Attention internals (score and
context products, softmax) are identical on both paths.

Tokenization is a deterministic hashing tokenizer: lowercase, split on
whitespace/punctuation, FNV-1a-64 of each token modulo the non-reserved
vocabulary. Real checkpoints are exercised through token-id fixtures
produced by the converter package, so no external vocabulary is needed
here.
"""

import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator, Optional, Union

import numpy as np

from . import _loops, kernels
from .kernels import BsrMatrix, CsrMatrix

if TYPE_CHECKING:
    from .sparsity import SparsityProfile

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
UNK_ID = 3
NUM_RESERVED_IDS = 4

LN_EPS = 1e-12

# the six large per-layer matrices eligible for pruning / sparse storage
PRUNABLE_FIELDS = ("wq", "wk", "wv", "wo", "ff1", "ff2")

MatrixStorage = Union[np.ndarray, CsrMatrix, BsrMatrix]

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ff_dim: int
    vocab_size: int
    max_seq_len: int
    pooling: str = "cls"  # "cls" | "mean"
    normalize_embeddings: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be at least 2 (CLS and SEP)")
        if self.vocab_size < NUM_RESERVED_IDS:
            raise ValueError(f"vocab_size must be at least {NUM_RESERVED_IDS}")
        if self.pooling not in ("cls", "mean"):
            raise ValueError("pooling must be 'cls' or 'mean'")

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads


PRESETS = {
    "tiny": EncoderConfig(num_layers=2, hidden_dim=32, num_heads=2, ff_dim=64,
                          vocab_size=1024, max_seq_len=32),
    # BERT-family shapes; queries are encoded at max_len 32 regardless
    "base": EncoderConfig(num_layers=12, hidden_dim=768, num_heads=12, ff_dim=3072,
                          vocab_size=30522, max_seq_len=512),
}


@dataclass
class TokenSequence:
    """Token ids plus a 1-prefix attention mask (0 marks padding)."""

    ids: np.ndarray
    attention_mask: np.ndarray

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int32)
        self.attention_mask = np.ascontiguousarray(self.attention_mask, dtype=np.int8)
        if self.ids.shape != self.attention_mask.shape or self.ids.ndim != 1:
            raise ValueError("ids and attention_mask must be equal-length 1-D arrays")
        m = self.attention_mask
        if len(m) == 0 or m[0] != 1 or np.any((m != 0) & (m != 1)):
            raise ValueError("attention_mask must contain only 0/1 and start with 1")
        ones = int(m.sum())
        if np.any(m[:ones] != 1):
            raise ValueError("attention_mask must be a 1-prefix followed by 0-padding")

    def __len__(self):
        return int(self.ids.shape[0])

    @property
    def num_tokens(self):
        return int(self.attention_mask.sum())


def tokenize(text: str, max_len: int, config: EncoderConfig) -> TokenSequence:
    """Deterministic hashing tokenization wrapped with CLS/SEP, padded to max_len."""
    if max_len > config.max_seq_len:
        raise ValueError(f"max_len {max_len} exceeds config.max_seq_len {config.max_seq_len}")
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    modulus = config.vocab_size - NUM_RESERVED_IDS
    words = _TOKEN_RE.findall(text.lower())
    body = [NUM_RESERVED_IDS + (fnv1a64(w.encode("utf-8")) % modulus) for w in words]
    body = body[:max_len - 2]
    ids = np.full(max_len, PAD_ID, dtype=np.int32)
    ids[0] = CLS_ID
    ids[1:1 + len(body)] = body
    ids[1 + len(body)] = SEP_ID
    mask = np.zeros(max_len, dtype=np.int8)
    mask[:len(body) + 2] = 1
    return TokenSequence(ids, mask)


@dataclass
class LayerWeights:
    wq: MatrixStorage
    wk: MatrixStorage
    wv: MatrixStorage
    wo: MatrixStorage
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ff1: MatrixStorage
    bf1: np.ndarray
    ff2: MatrixStorage
    bf2: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray


@dataclass
class EncoderWeights:
    """All encoder parameters. Weight matrices are (out_dim, in_dim) and
    may be stored dense, CSR or BSR; everything else stays dense."""

    config: EncoderConfig
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    emb_ln_gain: np.ndarray
    emb_ln_bias: np.ndarray
    layers: list
    profile: Optional["SparsityProfile"] = None
    masks: Optional[dict] = None

    def validate_shapes(self):
        c = self.config
        h, f = c.hidden_dim, c.ff_dim
        expect = {
            "token_embedding": (c.vocab_size, h),
            "position_embedding": (c.max_seq_len, h),
            "emb_ln_gain": (h,), "emb_ln_bias": (h,),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        if len(self.layers) != c.num_layers:
            raise ValueError(f"expected {c.num_layers} layers, got {len(self.layers)}")
        per_layer = {
            "wq": (h, h), "wk": (h, h), "wv": (h, h), "wo": (h, h),
            "bq": (h,), "bk": (h,), "bv": (h,), "bo": (h,),
            "ln1_gain": (h,), "ln1_bias": (h,),
            "ff1": (f, h), "bf1": (f,), "ff2": (h, f), "bf2": (h,),
            "ln2_gain": (h,), "ln2_bias": (h,),
        }
        for i, layer in enumerate(self.layers):
            for name, shape in per_layer.items():
                m = getattr(layer, name)
                got = m.shape
                if got != shape:
                    raise ValueError(f"layer{i}.{name} has shape {got}, expected {shape}")
        return self

    def prunable_matrices(self) -> Iterator[tuple]:
        """Yield (name, matrix) for the six large matrices of every layer."""
        for i, layer in enumerate(self.layers):
            for fieldname in PRUNABLE_FIELDS:
                yield f"layer{i}.{fieldname}", getattr(layer, fieldname)

    def set_matrix(self, name: str, value: MatrixStorage):
        layer_part, fieldname = name.split(".")
        idx = int(layer_part.removeprefix("layer"))
        setattr(self.layers[idx], fieldname, value)

    def get_matrix(self, name: str) -> MatrixStorage:
        layer_part, fieldname = name.split(".")
        idx = int(layer_part.removeprefix("layer"))
        return getattr(self.layers[idx], fieldname)

    def all_dense(self) -> bool:
        return all(isinstance(m, np.ndarray) for _, m in self.prunable_matrices())

    def named_parameters(self) -> Iterator[tuple]:
        """Yield (name, array) for every trainable tensor. Requires dense storage."""
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        yield "emb_ln_gain", self.emb_ln_gain
        yield "emb_ln_bias", self.emb_ln_bias
        for i, layer in enumerate(self.layers):
            for fieldname in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                              "ln1_gain", "ln1_bias", "ff1", "bf1", "ff2", "bf2",
                              "ln2_gain", "ln2_bias"):
                value = getattr(layer, fieldname)
                if not isinstance(value, np.ndarray):
                    raise ValueError(f"layer{i}.{fieldname} is not dense; "
                                     "decompress before training")
                yield f"layer{i}.{fieldname}", value

    def copy(self) -> "EncoderWeights":
        layers = [LayerWeights(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                                  for k, v in vars(layer).items()})
                  for layer in self.layers]
        return EncoderWeights(
            config=self.config,
            token_embedding=self.token_embedding.copy(),
            position_embedding=self.position_embedding.copy(),
            emb_ln_gain=self.emb_ln_gain.copy(),
            emb_ln_bias=self.emb_ln_bias.copy(),
            layers=layers,
            profile=self.profile,
            masks={k: v.copy() for k, v in self.masks.items()} if self.masks else None,
        )


def init_weights(config: EncoderConfig, seed: int = 0) -> EncoderWeights:
    """Random initialization: N(0, 0.02) matrices, unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    h, f = config.hidden_dim, config.ff_dim

    def mat(rows, cols):
        return (rng.standard_normal((rows, cols)) * 0.02).astype(np.float32)

    def zeros(n):
        return np.zeros(n, dtype=np.float32)

    def ones(n):
        return np.ones(n, dtype=np.float32)

    layers = [
        LayerWeights(
            wq=mat(h, h), wk=mat(h, h), wv=mat(h, h), wo=mat(h, h),
            bq=zeros(h), bk=zeros(h), bv=zeros(h), bo=zeros(h),
            ln1_gain=ones(h), ln1_bias=zeros(h),
            ff1=mat(f, h), bf1=zeros(f), ff2=mat(h, f), bf2=zeros(h),
            ln2_gain=ones(h), ln2_bias=zeros(h),
        )
        for _ in range(config.num_layers)
    ]
    return EncoderWeights(
        config=config,
        token_embedding=mat(config.vocab_size, h),
        position_embedding=mat(config.max_seq_len, h),
        emb_ln_gain=ones(h),
        emb_ln_bias=zeros(h),
        layers=layers,
    ).validate_shapes()


def _linear(w: MatrixStorage, x2d: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x2d (n, in) -> (n, out) through the kernel matching w's storage."""
    xt = np.ascontiguousarray(x2d.T)
    if isinstance(w, np.ndarray):
        yt = kernels.dense_matmul(w, xt)
    elif isinstance(w, CsrMatrix):
        yt = kernels.spmm_csr(w, xt)
    elif isinstance(w, BsrMatrix):
        yt = kernels.spmm_bsr(w, xt)
    else:
        raise TypeError(f"unsupported weight storage {type(w).__name__}")
    return np.ascontiguousarray(yt.T) + bias


def _ln_rows(x2d: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x2d = np.ascontiguousarray(x2d)
    out = np.empty_like(x2d)
    _loops.layer_norm_rows(x2d, gain, bias, LN_EPS, out)
    return out


def _stack_batch(batch):
    max_len = max(len(seq) for seq in batch)
    ids = np.full((len(batch), max_len), PAD_ID, dtype=np.int32)
    mask = np.zeros((len(batch), max_len), dtype=np.int8)
    for i, seq in enumerate(batch):
        ids[i, :len(seq)] = seq.ids
        mask[i, :len(seq)] = seq.attention_mask
    return ids, mask


def forward(weights: EncoderWeights, batch, return_layer_states=False):
    """Run the encoder stack over a batch of TokenSequence.

    Returns hidden states of shape (batch, seq, hidden); with
    return_layer_states, also a list with the embedding output and every
    layer output (num_layers + 1 entries).
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    cfg = weights.config
    ids, mask = _stack_batch(batch)
    B, S = ids.shape
    if S > cfg.max_seq_len:
        raise ValueError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")

    x = weights.token_embedding[ids] + weights.position_embedding[np.newaxis, :S]
    x2 = _ln_rows(x.reshape(B * S, cfg.hidden_dim), weights.emb_ln_gain, weights.emb_ln_bias)

    # additive key mask: -inf on padded positions, exact 0 elsewhere
    key_mask = np.where(mask[:, np.newaxis, np.newaxis, :] == 1,
                        np.float32(0.0), np.float32(-np.inf))
    nh, dk = cfg.num_heads, cfg.head_dim
    scale = np.float32(1.0 / np.sqrt(dk))
    states = [x2.reshape(B, S, cfg.hidden_dim).copy()] if return_layer_states else None

    for layer in weights.layers:
        q = _linear(layer.wq, x2, layer.bq)
        k = _linear(layer.wk, x2, layer.bk)
        v = _linear(layer.wv, x2, layer.bv)
        qh = q.reshape(B, S, nh, dk).transpose(0, 2, 1, 3)
        kh = k.reshape(B, S, nh, dk).transpose(0, 2, 1, 3)
        vh = v.reshape(B, S, nh, dk).transpose(0, 2, 1, 3)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale + key_mask
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(B * S, cfg.hidden_dim)
        attn = _linear(layer.wo, ctx, layer.bo)
        x2 = _ln_rows(x2 + attn, layer.ln1_gain, layer.ln1_bias)
        hmid = _linear(layer.ff1, x2, layer.bf1)
        act = kernels.gelu(hmid)
        ff = _linear(layer.ff2, act, layer.bf2)
        x2 = _ln_rows(x2 + ff, layer.ln2_gain, layer.ln2_bias)
        if return_layer_states:
            states.append(x2.reshape(B, S, cfg.hidden_dim).copy())

    hidden = x2.reshape(B, S, cfg.hidden_dim)
    if return_layer_states:
        return hidden, states
    return hidden


def pool(hidden_states: np.ndarray, masks: np.ndarray, mode: str, normalize=False):
    """Reduce (batch, seq, hidden) to (batch, hidden) embeddings."""
    if mode not in ("cls", "mean"):
        raise ValueError("mode must be 'cls' or 'mean'")
    masks = np.asarray(masks)
    if np.any(masks.sum(axis=1) == 0):
        raise ValueError("all-zero attention mask")
    if mode == "cls":
        out = hidden_states[:, 0, :].copy()
    else:
        m = masks.astype(hidden_states.dtype)[:, :, np.newaxis]
        out = (hidden_states * m).sum(axis=1) / m.sum(axis=1)
    if normalize:
        norms = np.sqrt((out * out).sum(axis=1, keepdims=True))
        if np.any(norms == 0):
            raise ValueError("cannot normalize a zero embedding")
        out = out / norms
    return out


def encode(weights: EncoderWeights, texts, max_len=32, batch_size=32) -> np.ndarray:
    """tokenize -> forward -> pool over texts, in submission order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    cfg = weights.config
    rows = []
    for start in range(0, len(texts), batch_size):
        chunk = [tokenize(t, max_len, cfg) for t in texts[start:start + batch_size]]
        if not chunk:
            break
        hidden = forward(weights, chunk)
        masks = np.stack([seq.attention_mask for seq in chunk])
        rows.append(pool(hidden, masks, cfg.pooling, cfg.normalize_embeddings))
    if not rows:
        return np.zeros((0, cfg.hidden_dim), dtype=np.float32)
    return np.concatenate(rows, axis=0)
