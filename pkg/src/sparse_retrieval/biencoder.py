"""Tied/untied bi-encoder construction and toy-scale contrastive training.

Two loss variants: COSINE_PAIR is the plain cosine-distance objective
over positive pairs; INBATCH_SOFTMAX scores each query against every
document in the batch (positives of other queries plus explicit
negatives) with a softmax cross-entropy at temperature 1, and is the
default. The optimizer is plain SGD with a linear learning-rate decay
to zero across all steps. When a frozen sparsity profile is present,
masked weights are re-zeroed exactly after every step.
"""

import json
import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .encoder import EncoderWeights, tokenize
from .errors import TrainingDiverged
from .gradients import backward_encode, encode_with_trace, zero_grads

TIED = "tied"
UNTIED = "untied"

COSINE_PAIR = "cosine_pair"
INBATCH_SOFTMAX = "inbatch_softmax"

# sequence lengths at training time match the retrieval defaults
QUERY_MAX_LEN = 32
DOC_MAX_LEN = 128


@dataclass
class BiEncoder:
    mode: str
    query_encoder: EncoderWeights
    doc_encoder: EncoderWeights

    def __post_init__(self):
        if self.mode not in (TIED, UNTIED):
            raise ValueError("mode must be 'tied' or 'untied'")
        if self.mode == TIED and self.query_encoder is not self.doc_encoder:
            raise ValueError("tied bi-encoder must share one weights object")
        if self.mode == UNTIED and self.query_encoder is self.doc_encoder:
            raise ValueError("untied bi-encoder requires independent weights")
        if self.query_encoder.config != self.doc_encoder.config:
            raise ValueError("query and doc encoders must share a config")

    @classmethod
    def tied(cls, weights: EncoderWeights) -> "BiEncoder":
        return cls(TIED, weights, weights)

    @classmethod
    def untied(cls, query_weights: EncoderWeights,
               doc_weights: Optional[EncoderWeights] = None) -> "BiEncoder":
        return cls(UNTIED, query_weights, doc_weights or query_weights.copy())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    learning_rate: float = 7e-5
    schedule: str = "linear"
    batch_size: int = 8
    negatives_per_query: int = 1
    seed: int = 0
    loss_kind: str = INBATCH_SOFTMAX

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.schedule != "linear":
            raise ValueError("only the linear schedule is supported")
        if self.negatives_per_query < 0:
            raise ValueError("negatives_per_query must be >= 0")
        if self.loss_kind not in (COSINE_PAIR, INBATCH_SOFTMAX):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


@dataclass(frozen=True)
class TrainExample:
    query: str
    positive: str
    negatives: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "negatives", tuple(self.negatives))


def load_training_data(path) -> List[TrainExample]:
    """JSONL: one {query, positive, negatives: [...]} object per line."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                examples.append(TrainExample(obj["query"], obj["positive"],
                                             tuple(obj.get("negatives", ()))))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: malformed training example: {e}") from e
    return examples


def cosine_distance_loss(x, y) -> float:
    """1 - cos(x, y); range [0, 2]."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape or x.size == 0:
        raise ValueError("vectors must have equal nonzero length")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine distance undefined for zero-norm vectors")
    return float(1.0 - (x @ y) / (nx * ny))


def inbatch_softmax_loss(query_embs, doc_embs) -> float:
    """Mean over queries of -log softmax(q . d) at the aligned positive."""
    q = np.asarray(query_embs, dtype=np.float64)
    d = np.asarray(doc_embs, dtype=np.float64)
    if q.ndim != 2 or d.ndim != 2 or q.shape[1] != d.shape[1]:
        raise ValueError("query and doc embeddings must be 2-D with equal width")
    if d.shape[0] < q.shape[0]:
        raise ValueError("need at least one document per query")
    scores = q @ d.T
    shifted = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1)) + scores.max(axis=1)
    pos = scores[np.arange(q.shape[0]), np.arange(q.shape[0])]
    return float(np.mean(logz - pos))


def _cosine_pair_grads(q, p):
    """Mean cosine distance over aligned pairs; returns (loss, dq, dp)."""
    nq = np.sqrt((q * q).sum(axis=1, keepdims=True))
    np_ = np.sqrt((p * p).sum(axis=1, keepdims=True))
    if np.any(nq == 0) or np.any(np_ == 0):
        raise ValueError("cosine distance undefined for zero-norm vectors")
    dot = (q * p).sum(axis=1, keepdims=True)
    cos = dot / (nq * np_)
    loss = float(np.mean(1.0 - cos))
    B = q.shape[0]
    dq = -(p / (nq * np_) - cos * q / (nq * nq)) / B
    dp = -(q / (nq * np_) - cos * p / (np_ * np_)) / B
    return loss, dq, dp


def _inbatch_softmax_grads(q, d):
    """Softmax cross-entropy over the batch document pool; (loss, dq, dd)."""
    B = q.shape[0]
    scores = q @ d.T
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    pos = np.arange(B)
    loss = float(np.mean(-np.log(probs[pos, pos])))
    dscores = probs.copy()
    dscores[pos, pos] -= 1.0
    dscores /= B
    return loss, dscores @ d, dscores.T @ q


def _tokenize_batch(batch, config, loss_kind, negatives_cap=None):
    q_len = min(QUERY_MAX_LEN, config.max_seq_len)
    d_len = min(DOC_MAX_LEN, config.max_seq_len)
    queries = [tokenize(ex.query, q_len, config) for ex in batch]
    docs = [tokenize(ex.positive, d_len, config) for ex in batch]
    if loss_kind == INBATCH_SOFTMAX:
        for ex in batch:
            negatives = ex.negatives if negatives_cap is None \
                else ex.negatives[:negatives_cap]
            docs.extend(tokenize(t, d_len, config) for t in negatives)
    return queries, docs


def tokenized_loss(model: BiEncoder, q_tokens, d_tokens, num_pairs,
                   loss_kind, dtype=np.float32) -> float:
    """Loss over pre-tokenized sequences, no backward sweep."""
    q_embs, _ = encode_with_trace(model.query_encoder, q_tokens, dtype)
    d_embs, _ = encode_with_trace(model.doc_encoder, d_tokens, dtype)
    if loss_kind == COSINE_PAIR:
        loss, _, _ = _cosine_pair_grads(q_embs, d_embs[:num_pairs])
    else:
        loss, _, _ = _inbatch_softmax_grads(q_embs, d_embs)
    return loss


def batch_loss(model: BiEncoder, batch, loss_kind, dtype=np.float32) -> float:
    """Loss over one batch without the backward sweep (gradient checking)."""
    cfg = model.query_encoder.config
    q_tokens, d_tokens = _tokenize_batch(batch, cfg, loss_kind)
    return tokenized_loss(model, q_tokens, d_tokens, len(batch), loss_kind, dtype)


def compute_loss_and_grads(model: BiEncoder, batch, loss_kind, dtype=np.float32,
                           negatives_cap=None):
    """Forward + backward over one batch; returns (loss, query_grads, doc_grads).

    In tied mode the two grad dicts are the same object (gradients from
    both roles accumulate into the single weight set).
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    cfg = model.query_encoder.config
    q_tokens, d_tokens = _tokenize_batch(batch, cfg, loss_kind, negatives_cap)
    q_embs, q_trace = encode_with_trace(model.query_encoder, q_tokens, dtype)
    d_embs, d_trace = encode_with_trace(model.doc_encoder, d_tokens, dtype)

    if loss_kind == COSINE_PAIR:
        loss, dq, dd = _cosine_pair_grads(q_embs, d_embs[:len(batch)])
        dd_full = np.zeros_like(d_embs)
        dd_full[:len(batch)] = dd
        dd = dd_full
    else:
        loss, dq, dd = _inbatch_softmax_grads(q_embs, d_embs)

    q_grads = zero_grads(model.query_encoder, dtype)
    d_grads = q_grads if model.mode == TIED else zero_grads(model.doc_encoder, dtype)
    backward_encode(model.query_encoder, q_trace, dq, q_grads)
    backward_encode(model.doc_encoder, d_trace, dd, d_grads)
    return loss, q_grads, d_grads


def _sgd_step(weights: EncoderWeights, grads: dict, lr: float):
    for name, param in weights.named_parameters():
        param -= (lr * grads[name]).astype(param.dtype, copy=False)
    if weights.masks:
        for name, mask in weights.masks.items():
            matrix = weights.get_matrix(name)
            matrix *= mask  # masked entries return to exactly 0


def train_step(model: BiEncoder, batch, config: TrainConfig, lr: Optional[float] = None) -> float:
    """One SGD step over a batch; returns the batch loss."""
    loss, q_grads, d_grads = compute_loss_and_grads(
        model, batch, config.loss_kind, negatives_cap=config.negatives_per_query)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss!r} "
                               f"(lr={lr if lr is not None else config.learning_rate}, "
                               f"batch of {len(batch)})")
    step_lr = config.learning_rate if lr is None else lr
    _sgd_step(model.query_encoder, q_grads, step_lr)
    if model.mode == UNTIED:
        _sgd_step(model.doc_encoder, d_grads, step_lr)
    return loss


def train(dataset, config: TrainConfig, model: BiEncoder,
          progress: Optional[Callable] = None):
    """Run epochs x batches SGD steps with seeded shuffling.

    Returns (model, loss_curve) where loss_curve is the per-epoch mean
    loss. The learning rate decays linearly from the configured value
    toward zero across all steps.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * batches_per_epoch
    curve = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(batches_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = [dataset[i] for i in idx]
            lr = config.learning_rate * (1.0 - step / total_steps)
            losses.append(train_step(model, batch, config, lr=lr))
            step += 1
        curve.append(float(np.mean(losses)))
        if progress:
            progress(epoch, curve[-1])
    return model, curve
