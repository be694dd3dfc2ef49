"""Export a BERT-family encoder checkpoint into the primary model format.

The mapping folds the token-type-0 embedding row into the position
table (exact for single-segment inputs, which is all the primary
encoder consumes) and drops the pooler. Storage tags are chosen from
measured per-matrix sparsity: above the 0.5 threshold a matrix is
stored CSR, or BSR when its zeros tile exactly into 1x4 blocks.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from sparse_retrieval import modelio, sparsity
from sparse_retrieval.encoder import (
    EncoderConfig,
    EncoderWeights,
    LayerWeights,
    PRESETS,
    PRUNABLE_FIELDS,
)

SPARSE_STORAGE_THRESHOLD = 0.5
BLOCK_SHAPE = (1, 4)

# six-matrix scope within one checkpoint layer, target field -> source suffix
_LAYER_MAP = {
    "wq": "attention.self.query.weight",
    "bq": "attention.self.query.bias",
    "wk": "attention.self.key.weight",
    "bk": "attention.self.key.bias",
    "wv": "attention.self.value.weight",
    "bv": "attention.self.value.bias",
    "wo": "attention.output.dense.weight",
    "bo": "attention.output.dense.bias",
    "ln1_gain": "attention.output.LayerNorm.weight",
    "ln1_bias": "attention.output.LayerNorm.bias",
    "ff1": "intermediate.dense.weight",
    "bf1": "intermediate.dense.bias",
    "ff2": "output.dense.weight",
    "bf2": "output.dense.bias",
    "ln2_gain": "output.LayerNorm.weight",
    "ln2_bias": "output.LayerNorm.bias",
}

_EMBEDDING_KEYS = (
    "embeddings.word_embeddings.weight",
    "embeddings.position_embeddings.weight",
    "embeddings.token_type_embeddings.weight",
    "embeddings.LayerNorm.weight",
    "embeddings.LayerNorm.bias",
)


@dataclass
class ConversionManifest:
    source: str
    mapping: dict                  # target tensor -> source tensor name
    per_layer_sparsity: dict       # six-matrix scope
    global_sparsity: float
    storage: dict                  # target matrix -> dense|csr|bsr
    dropped_source_keys: list
    fingerprint: str = ""
    fixtures: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def load_checkpoint(source):
    """Accept a local checkpoint directory or an in-memory BertModel."""
    from transformers import BertModel

    if isinstance(source, BertModel):
        return source, source.config, getattr(source, "name_or_path", "<in-memory>")
    model = BertModel.from_pretrained(str(source))
    return model, model.config, str(source)


def _np(tensor):
    return tensor.detach().cpu().numpy().astype(np.float32)


def _is_block_sparse(matrix: np.ndarray, block=BLOCK_SHAPE) -> bool:
    """True when zeroing happens at block granularity.

    Kept blocks may contain incidental exact zeros (they occur in real
    checkpoints), so instead of demanding all-or-nothing blocks this
    checks that partially-zero blocks are vanishingly rare relative to
    kept blocks; unstructured sparsity produces mostly-partial blocks.
    """
    rows, cols = matrix.shape
    br, bc = block
    if rows % br or cols % bc:
        return False
    per_block = (matrix != 0).reshape(rows // br, br, cols // bc, bc).sum(axis=(1, 3))
    full = br * bc
    partial = int(np.count_nonzero((per_block > 0) & (per_block < full)))
    kept = int(np.count_nonzero(per_block > 0))
    return kept > 0 and partial / kept <= 1e-3


def convert_checkpoint(source, out_path, manifest_path=None, force_dense=False):
    """Write a model file from a 12-layer BERT-family checkpoint.

    Returns (EncoderWeights, ConversionManifest). Layer names that
    cannot be mapped (other than the pooler) are an error.
    """
    model, hf_config, source_name = load_checkpoint(source)
    base = PRESETS["base"]
    mismatches = []
    for ours, theirs in (("num_layers", hf_config.num_hidden_layers),
                         ("hidden_dim", hf_config.hidden_size),
                         ("num_heads", hf_config.num_attention_heads),
                         ("ff_dim", hf_config.intermediate_size)):
        if getattr(base, ours) != theirs:
            mismatches.append(f"{ours}: checkpoint has {theirs}, preset expects "
                              f"{getattr(base, ours)}")
    if mismatches:
        raise ValueError("checkpoint does not match the base preset: "
                         + "; ".join(mismatches))
    # gelu_new (tanh approximation) would silently break parity with the
    # primary's exact erf-based GELU
    if hf_config.hidden_act != "gelu":
        raise ValueError(f"unsupported activation {hf_config.hidden_act!r}; "
                         "only exact (erf) gelu checkpoints convert")

    state = {k: v for k, v in model.state_dict().items()}
    config = EncoderConfig(
        num_layers=hf_config.num_hidden_layers,
        hidden_dim=hf_config.hidden_size,
        num_heads=hf_config.num_attention_heads,
        ff_dim=hf_config.intermediate_size,
        vocab_size=hf_config.vocab_size,
        max_seq_len=hf_config.max_position_embeddings,
        pooling="cls",
        normalize_embeddings=True,
    )

    mapping = {}
    consumed = set()

    def take(key):
        if key not in state:
            raise ValueError(f"checkpoint is missing tensor {key!r}")
        consumed.add(key)
        return _np(state[key])

    token_embedding = take("embeddings.word_embeddings.weight")
    position = take("embeddings.position_embeddings.weight")
    type_table = take("embeddings.token_type_embeddings.weight")
    # single-segment inputs always add token-type row 0; fold it in
    position_embedding = position + type_table[0][np.newaxis, :]
    emb_ln_gain = take("embeddings.LayerNorm.weight")
    emb_ln_bias = take("embeddings.LayerNorm.bias")
    mapping.update({
        "token_embedding": "embeddings.word_embeddings.weight",
        "position_embedding": "embeddings.position_embeddings.weight "
                              "+ embeddings.token_type_embeddings.weight[0]",
        "emb_ln_gain": "embeddings.LayerNorm.weight",
        "emb_ln_bias": "embeddings.LayerNorm.bias",
    })

    layers = []
    for i in range(config.num_layers):
        fields = {}
        for target, suffix in _LAYER_MAP.items():
            key = f"encoder.layer.{i}.{suffix}"
            fields[target] = take(key)
            mapping[f"layer{i}.{target}"] = key
        layers.append(LayerWeights(**fields))

    dropped = sorted(k for k in state if k not in consumed and k.startswith("pooler."))
    unmapped = sorted(k for k in state if k not in consumed and not k.startswith("pooler."))
    if unmapped:
        raise ValueError(f"unmappable checkpoint tensors: {', '.join(unmapped)}")

    weights = EncoderWeights(
        config=config, token_embedding=token_embedding,
        position_embedding=position_embedding, emb_ln_gain=emb_ln_gain,
        emb_ln_bias=emb_ln_bias, layers=layers,
    ).validate_shapes()

    # measured sparsity decides storage and the recorded profile
    per_layer = {}
    entries = []
    storage = {}
    total = 0
    total_nnz = 0
    for name, matrix in weights.prunable_matrices():
        nnz = int(np.count_nonzero(matrix))
        level = 1.0 - nnz / matrix.size
        per_layer[name] = level
        total += matrix.size
        total_nnz += nnz
        if not force_dense and level > SPARSE_STORAGE_THRESHOLD:
            if _is_block_sparse(matrix):
                storage[name] = "bsr"
                entries.append(sparsity.LayerSparsity(name, level, sparsity.BLOCK,
                                                      BLOCK_SHAPE))
            else:
                storage[name] = "csr"
                entries.append(sparsity.LayerSparsity(name, level,
                                                      sparsity.UNSTRUCTURED))
        else:
            storage[name] = "dense"
    global_sparsity = 1.0 - total_nnz / total

    if entries:
        # the measured profile is the frozen "sparse transfer" contract
        full_entries = list(entries)
        covered = {e.layer for e in entries}
        for name, _ in weights.prunable_matrices():
            if name not in covered:
                full_entries.append(sparsity.LayerSparsity(name, per_layer[name],
                                                           sparsity.UNSTRUCTURED))
        weights.profile = sparsity.SparsityProfile(tuple(full_entries), frozen=True)
        weights.masks = sparsity.reconstruct_masks(weights)
        compressed = weights.copy()
        for name, matrix in list(compressed.prunable_matrices()):
            if storage[name] == "csr":
                compressed.set_matrix(name, sparsity.csr_from_dense(matrix))
            elif storage[name] == "bsr":
                compressed.set_matrix(name, sparsity.bsr_from_dense(matrix, *BLOCK_SHAPE))
        to_save = compressed
    else:
        to_save = weights

    fingerprint = modelio.save_model(to_save, out_path)
    manifest = ConversionManifest(
        source=source_name, mapping=mapping, per_layer_sparsity=per_layer,
        global_sparsity=global_sparsity, storage=storage,
        dropped_source_keys=dropped, fingerprint=fingerprint,
    )
    if manifest_path:
        with open(manifest_path, "w", encoding="utf-8") as fh:
            fh.write(manifest.to_json() + "\n")
    return to_save, manifest
