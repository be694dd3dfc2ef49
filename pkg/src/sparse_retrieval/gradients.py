"""Reverse-mode differentiation of the encoder.

This module owns training-time computation: a numpy forward pass that
records every intermediate needed for the backward sweep, and the
backward sweep itself, producing gradients for all trainable tensors.
It runs in float32 for production steps and float64 for gradient
checking (the spec'd shadow mode); both share the exact same code path.

The inference forward (encoder.forward, kernel-routed) and this traced
forward are two independent implementations of the same network; tests
hold them to 1e-5 agreement.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _loops
from .encoder import LN_EPS, EncoderWeights


def _gelu(x):
    flat = np.ascontiguousarray(x.reshape(-1))
    out = np.empty_like(flat)
    _loops.gelu(flat, out)
    return out.reshape(x.shape)


def _gelu_grad(x):
    flat = np.ascontiguousarray(x.reshape(-1))
    out = np.empty_like(flat)
    _loops.gelu_grad(flat, out)
    return out.reshape(x.shape)


def cast_weights(weights: EncoderWeights, dtype) -> EncoderWeights:
    """Deep copy with every trainable tensor in `dtype` (shadow mode)."""
    out = weights.copy()
    for name, arr in out.named_parameters():
        replaced = arr.astype(dtype)
        if "." in name:
            layer_part, fieldname = name.split(".")
            setattr(out.layers[int(layer_part.removeprefix("layer"))], fieldname, replaced)
        else:
            setattr(out, name, replaced)
    return out


def zero_grads(weights: EncoderWeights, dtype=None) -> dict:
    return {name: np.zeros_like(arr, dtype=dtype or arr.dtype)
            for name, arr in weights.named_parameters()}


def _ln_forward(x, gain, bias):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv)


def _ln_backward(dout, cache, gain):
    xhat, inv = cache
    dgain = (dout * xhat).sum(axis=0)
    dbias = dout.sum(axis=0)
    dxhat = dout * gain
    m = dxhat.mean(axis=1, keepdims=True)
    mx = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m - xhat * mx) * inv
    return dx, dgain, dbias


@dataclass
class _LayerTrace:
    x_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    ctx: np.ndarray
    ln1_cache: tuple
    x_mid: np.ndarray
    hmid: np.ndarray
    act: np.ndarray
    ln2_cache: tuple


@dataclass
class EncodeTrace:
    ids: np.ndarray
    mask: np.ndarray
    emb_ln_cache: tuple
    layers: list
    hidden: np.ndarray
    pooled_raw: np.ndarray
    embeddings: np.ndarray
    norms: Optional[np.ndarray]


def encode_with_trace(weights: EncoderWeights, seqs, dtype=np.float32):
    """tokenized batch -> (embeddings (B, hidden), trace for backward)."""
    cfg = weights.config
    ids = np.stack([s.ids for s in seqs])
    mask = np.stack([s.attention_mask for s in seqs]).astype(dtype)
    B, S = ids.shape
    nh, dk = cfg.num_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dk)

    def d(arr):
        return arr.astype(dtype, copy=False)

    x = d(weights.token_embedding)[ids] + d(weights.position_embedding)[np.newaxis, :S]
    x = x.reshape(B * S, cfg.hidden_dim)
    x, emb_ln_cache = _ln_forward(x, d(weights.emb_ln_gain), d(weights.emb_ln_bias))

    key_mask = np.where(mask[:, np.newaxis, np.newaxis, :] == 1, dtype(0.0), dtype(-np.inf))
    layer_traces = []
    for layer in weights.layers:
        x_in = x
        q = x @ d(layer.wq).T + d(layer.bq)
        k = x @ d(layer.wk).T + d(layer.bk)
        v = x @ d(layer.wv).T + d(layer.bv)
        qh = q.reshape(B, S, nh, dk).transpose(0, 2, 1, 3)
        kh = k.reshape(B, S, nh, dk).transpose(0, 2, 1, 3)
        vh = v.reshape(B, S, nh, dk).transpose(0, 2, 1, 3)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale + key_mask
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(B * S, cfg.hidden_dim)
        attn = ctx @ d(layer.wo).T + d(layer.bo)
        x_mid, ln1_cache = _ln_forward(x_in + attn, d(layer.ln1_gain), d(layer.ln1_bias))
        hmid = x_mid @ d(layer.ff1).T + d(layer.bf1)
        act = _gelu(hmid)
        ff = act @ d(layer.ff2).T + d(layer.bf2)
        x, ln2_cache = _ln_forward(x_mid + ff, d(layer.ln2_gain), d(layer.ln2_bias))
        layer_traces.append(_LayerTrace(x_in, q, k, v, probs, ctx, ln1_cache,
                                        x_mid, hmid, act, ln2_cache))

    hidden = x.reshape(B, S, cfg.hidden_dim)
    if cfg.pooling == "cls":
        pooled = hidden[:, 0, :].copy()
    else:
        m = mask[:, :, np.newaxis]
        pooled = (hidden * m).sum(axis=1) / m.sum(axis=1)

    norms = None
    embeddings = pooled
    if cfg.normalize_embeddings:
        norms = np.sqrt((pooled * pooled).sum(axis=1, keepdims=True))
        if np.any(norms == 0):
            raise ValueError("cannot normalize a zero embedding")
        embeddings = pooled / norms

    return embeddings, EncodeTrace(ids, mask, emb_ln_cache, layer_traces,
                                   hidden, pooled, embeddings, norms)


def backward_encode(weights: EncoderWeights, trace: EncodeTrace,
                    dembeddings: np.ndarray, grads: dict):
    """Accumulate d(loss)/d(params) into `grads` given d(loss)/d(embeddings)."""
    cfg = weights.config
    B, S = trace.ids.shape
    nh, dk = cfg.num_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dk)
    dtype = dembeddings.dtype

    def d(arr):
        return arr.astype(dtype, copy=False)

    if cfg.normalize_embeddings:
        y = trace.embeddings
        dpooled = (dembeddings - y * (y * dembeddings).sum(axis=1, keepdims=True)) / trace.norms
    else:
        dpooled = dembeddings

    dhidden = np.zeros_like(trace.hidden)
    if cfg.pooling == "cls":
        dhidden[:, 0, :] = dpooled
    else:
        m = trace.mask[:, :, np.newaxis]
        dhidden += dpooled[:, np.newaxis, :] * (m / m.sum(axis=1, keepdims=True))

    dx = dhidden.reshape(B * S, cfg.hidden_dim)
    for i in reversed(range(cfg.num_layers)):
        layer = weights.layers[i]
        t = trace.layers[i]
        p = f"layer{i}."

        dr2, dg2, db2 = _ln_backward(dx, t.ln2_cache, d(layer.ln2_gain))
        grads[p + "ln2_gain"] += dg2
        grads[p + "ln2_bias"] += db2
        dx_mid = dr2.copy()
        dff = dr2
        grads[p + "ff2"] += dff.T @ t.act
        grads[p + "bf2"] += dff.sum(axis=0)
        dact = dff @ d(layer.ff2)
        dhmid = dact * _gelu_grad(t.hmid)
        grads[p + "ff1"] += dhmid.T @ t.x_mid
        grads[p + "bf1"] += dhmid.sum(axis=0)
        dx_mid += dhmid @ d(layer.ff1)

        dr1, dg1, db1 = _ln_backward(dx_mid, t.ln1_cache, d(layer.ln1_gain))
        grads[p + "ln1_gain"] += dg1
        grads[p + "ln1_bias"] += db1
        dx = dr1.copy()
        dattn = dr1
        grads[p + "wo"] += dattn.T @ t.ctx
        grads[p + "bo"] += dattn.sum(axis=0)
        dctx = (dattn @ d(layer.wo)).reshape(B, S, nh, dk).transpose(0, 2, 1, 3)

        vh = t.v.reshape(B, S, nh, dk).transpose(0, 2, 1, 3)
        qh = t.q.reshape(B, S, nh, dk).transpose(0, 2, 1, 3)
        kh = t.k.reshape(B, S, nh, dk).transpose(0, 2, 1, 3)
        dprobs = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = t.probs.transpose(0, 1, 3, 2) @ dctx
        dscores = t.probs * (dprobs - (dprobs * t.probs).sum(axis=-1, keepdims=True))
        dqh = (dscores @ kh) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale

        dq = dqh.transpose(0, 2, 1, 3).reshape(B * S, cfg.hidden_dim)
        dk_ = dkh.transpose(0, 2, 1, 3).reshape(B * S, cfg.hidden_dim)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B * S, cfg.hidden_dim)
        for name, dout in (("wq", dq), ("wk", dk_), ("wv", dv)):
            grads[p + name] += dout.T @ t.x_in
            grads[p + "b" + name[1]] += dout.sum(axis=0)
            dx += dout @ d(getattr(layer, name))

    dE, dgE, dbE = _ln_backward(dx, trace.emb_ln_cache, d(weights.emb_ln_gain))
    grads["emb_ln_gain"] += dgE
    grads["emb_ln_bias"] += dbE
    np.add.at(grads["token_embedding"], trace.ids.reshape(-1), dE)
    grads["position_embedding"][:S] += dE.reshape(B, S, -1).sum(axis=0)
    return grads
