"""Checkpoint converter: BERT-family weights into the sparse-retrieval
model format, with sparsity-profile extraction and forward-parity checks."""

__version__ = "0.1.0"
