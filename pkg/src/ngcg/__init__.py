"""Text-to-satellite cross-view retrieval with LoRA on a small numpy transformer."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .datagen import Corpus, generate, read_corpus, write_corpus
from .errors import NGCGError
from .geoeval import EvalReport, GeoPoint, haversine, loc_at_d, recall_at_k
from .model import Model
from .retrieval import EmbeddingIndex, build_index, query_topk
from .trainer import evaluate_model, train

__all__ = [
    "Corpus",
    "EmbeddingIndex",
    "EvalReport",
    "ExperimentConfig",
    "GeoPoint",
    "Model",
    "NGCGError",
    "build_index",
    "evaluate_model",
    "generate",
    "haversine",
    "load_config",
    "loc_at_d",
    "query_topk",
    "read_corpus",
    "recall_at_k",
    "train",
    "write_corpus",
]
