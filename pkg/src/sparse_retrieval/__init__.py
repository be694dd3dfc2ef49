"""CPU dense-retrieval toolkit with dense and sparsity-aware encoder execution."""

from .biencoder import BiEncoder, TrainConfig, TrainExample, train
from .encoder import EncoderConfig, EncoderWeights, PRESETS, encode, forward, init_weights, tokenize
from .modelio import load_model, save_model
from .retrieval import Corpus, FlatIndex, build_index, load_index, save_index, search, search_batch
from .sparsity import SparsityProfile, compress, decompress, prune, sparsity_stats

__version__ = "0.1.0"

__all__ = [
    "BiEncoder", "TrainConfig", "TrainExample", "train",
    "EncoderConfig", "EncoderWeights", "PRESETS", "encode", "forward",
    "init_weights", "tokenize",
    "load_model", "save_model",
    "Corpus", "FlatIndex", "build_index", "load_index", "save_index",
    "search", "search_batch",
    "SparsityProfile", "compress", "decompress", "prune", "sparsity_stats",
]
