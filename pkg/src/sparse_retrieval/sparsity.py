"""Sparsity profiles, magnitude pruning, and dense<->sparse compression.

A profile fixes per-layer sparsity targets and patterns over the six
large matrices of each encoder layer. Freezing a profile pins the zero
pattern: training re-zeroes masked positions after every step, and
compression converts frozen layers to CSR (unstructured) or BSR
(block). Embeddings, biases and layer-norm parameters are never pruned.
"""

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .encoder import EncoderWeights
from .kernels import BsrMatrix, CsrMatrix, bsr_from_dense, csr_from_dense, densify

UNSTRUCTURED = "unstructured"
BLOCK = "block"


def _floor_count(x: float) -> int:
    """floor() with a guard against binary rounding of exact products
    (e.g. 10 * (1 - 0.9) evaluates to 0.999...8 but means 1)."""
    nearest = round(x)
    if abs(x - nearest) < 1e-9:
        return int(nearest)
    return int(math.floor(x))


@dataclass(frozen=True)
class LayerSparsity:
    layer: str
    sparsity: float
    pattern: str = UNSTRUCTURED
    block: Optional[tuple] = None  # (rows, cols) when pattern is BLOCK

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in [0, 1]")
        if self.pattern not in (UNSTRUCTURED, BLOCK):
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.pattern == BLOCK:
            block = tuple(self.block) if self.block else (1, 4)
            object.__setattr__(self, "block", block)
        elif self.block is not None:
            raise ValueError("block shape is only valid for the block pattern")


@dataclass(frozen=True)
class SparsityProfile:
    entries: tuple
    frozen: bool = False

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.layer for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer in sparsity profile")

    def entry_for(self, layer: str) -> Optional[LayerSparsity]:
        for e in self.entries:
            if e.layer == layer:
                return e
        return None

    def freeze(self) -> "SparsityProfile":
        return SparsityProfile(self.entries, frozen=True)

    def to_json_dict(self) -> dict:
        return {
            "frozen": self.frozen,
            "entries": [
                {"layer": e.layer, "sparsity": e.sparsity, "pattern": e.pattern,
                 "block": list(e.block) if e.block else None}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SparsityProfile":
        entries = [LayerSparsity(e["layer"], e["sparsity"], e["pattern"],
                                 tuple(e["block"]) if e.get("block") else None)
                   for e in d["entries"]]
        return cls(tuple(entries), frozen=bool(d["frozen"]))


def uniform_profile(weights: EncoderWeights, sparsity: float, pattern=UNSTRUCTURED,
                    block=None) -> SparsityProfile:
    """Same target on every prunable matrix (default policy)."""
    entries = [LayerSparsity(name, sparsity, pattern,
                             block if pattern == BLOCK else None)
               for name, _ in weights.prunable_matrices()]
    return SparsityProfile(tuple(entries))


@dataclass(frozen=True)
class WeightMask:
    """Per-layer binary (0/1 float32) arrays congruent to weight shapes."""

    masks: dict

    def __post_init__(self):
        for name, m in self.masks.items():
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ValueError(f"mask {name} must be binary")

    def sparsity(self, layer: str) -> float:
        m = self.masks[layer]
        return 1.0 - float(m.sum()) / m.size


def magnitude_prune(weights: np.ndarray, sparsity: float) -> np.ndarray:
    """Binary mask keeping the floor(total * (1-sparsity)) largest-|w|
    entries; ties keep the lower flat index."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    flat = np.abs(np.asarray(weights, dtype=np.float32)).reshape(-1)
    keep = _floor_count(flat.size * (1.0 - sparsity))
    order = np.argsort(-flat, kind="stable")  # stable: lower flat index wins ties
    mask = np.zeros(flat.size, dtype=np.float32)
    mask[order[:keep]] = 1.0
    return mask.reshape(np.asarray(weights).shape)


def block_magnitude_prune(weights: np.ndarray, sparsity: float, block=(1, 4)) -> np.ndarray:
    """Binary mask keeping whole blocks scored by sum of |w|."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    w = np.asarray(weights, dtype=np.float32)
    br, bc = block
    rows, cols = w.shape
    if rows % br or cols % bc:
        raise ValueError(f"block shape {br}x{bc} does not divide {rows}x{cols}")
    grid = np.abs(w).reshape(rows // br, br, cols // bc, bc).sum(axis=(1, 3))
    flat = grid.reshape(-1)
    keep = _floor_count(flat.size * (1.0 - sparsity))
    order = np.argsort(-flat, kind="stable")
    block_mask = np.zeros(flat.size, dtype=np.float32)
    block_mask[order[:keep]] = 1.0
    block_mask = block_mask.reshape(rows // br, cols // bc)
    return np.repeat(np.repeat(block_mask, br, axis=0), bc, axis=1)


def prune_masks(weights: EncoderWeights, profile: SparsityProfile) -> WeightMask:
    """Build per-layer masks for every profile entry."""
    masks = {}
    for name, matrix in weights.prunable_matrices():
        entry = profile.entry_for(name)
        if entry is None:
            continue
        if not isinstance(matrix, np.ndarray):
            raise ValueError(f"{name} is not dense; cannot prune compressed weights")
        if entry.pattern == BLOCK:
            masks[name] = block_magnitude_prune(matrix, entry.sparsity, entry.block)
        else:
            masks[name] = magnitude_prune(matrix, entry.sparsity)
    return WeightMask(masks)


def apply_and_freeze(weights: EncoderWeights, mask: WeightMask,
                     profile: SparsityProfile) -> EncoderWeights:
    """Zero masked entries exactly and return weights with a frozen profile."""
    out = weights.copy()
    for name, m in mask.masks.items():
        matrix = out.get_matrix(name)
        if not isinstance(matrix, np.ndarray):
            raise ValueError(f"{name} is not dense")
        if matrix.shape != m.shape:
            raise ValueError(f"mask for {name} has shape {m.shape}, weights {matrix.shape}")
        out.set_matrix(name, (matrix * m).astype(np.float32))
    out.profile = profile.freeze()
    out.masks = {k: v.copy() for k, v in mask.masks.items()}
    return out


def prune(weights: EncoderWeights, sparsity: float, pattern=UNSTRUCTURED,
          block=None) -> EncoderWeights:
    """Convenience: uniform profile -> masks -> apply_and_freeze."""
    profile = uniform_profile(weights, sparsity, pattern, block)
    return apply_and_freeze(weights, prune_masks(weights, profile), profile)


def reconstruct_masks(weights: EncoderWeights) -> dict:
    """Recover frozen masks from stored zeros (zeros are pruned positions)."""
    masks = {}
    for name, matrix in weights.prunable_matrices():
        dense = matrix if isinstance(matrix, np.ndarray) else densify(matrix)
        masks[name] = (dense != 0.0).astype(np.float32)
    return masks


def sparsity_stats(weights: EncoderWeights) -> dict:
    """Per-layer and global zero fractions over the prunable matrices."""
    layers = {}
    total = 0
    total_nnz = 0
    for name, matrix in weights.prunable_matrices():
        if isinstance(matrix, np.ndarray):
            size = matrix.size
            nnz = int(np.count_nonzero(matrix))
        else:
            size = matrix.rows * matrix.cols
            nnz = matrix.nnz
        entry = weights.profile.entry_for(name) if weights.profile else None
        pattern = entry.pattern if entry else "dense"
        layers[name] = {"sparsity": 1.0 - nnz / size, "nnz": nnz,
                        "total": size, "pattern": pattern}
        total += size
        total_nnz += nnz
    return {
        "layers": layers,
        "global": {"sparsity": 1.0 - total_nnz / total, "nnz": total_nnz,
                   "total": total},
    }


def stats_to_json(stats: dict) -> str:
    return json.dumps(stats, indent=2, sort_keys=True)


def compress(weights: EncoderWeights) -> EncoderWeights:
    """Convert frozen pruned layers to CSR/BSR storage.

    Forward outputs are unchanged within 1e-5; the dense<->sparse
    round-trip is bit-exact. Compressing mutable (unfrozen) weights is
    rejected because the zero pattern could still change.
    """
    if weights.profile is None or not weights.profile.frozen:
        raise ValueError("compress requires a frozen sparsity profile")
    out = weights.copy()
    for name, matrix in list(out.prunable_matrices()):
        entry = out.profile.entry_for(name)
        if entry is None or not isinstance(matrix, np.ndarray):
            continue
        if entry.pattern == BLOCK:
            out.set_matrix(name, bsr_from_dense(matrix, *entry.block))
        else:
            out.set_matrix(name, csr_from_dense(matrix))
    return out


def decompress(weights: EncoderWeights) -> EncoderWeights:
    """Expand CSR/BSR layers back to dense arrays (bit-exact)."""
    out = weights.copy()
    for name, matrix in list(out.prunable_matrices()):
        if isinstance(matrix, (CsrMatrix, BsrMatrix)):
            out.set_matrix(name, densify(matrix))
    return out
