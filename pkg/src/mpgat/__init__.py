"""Graph-attention forecaster for per-intersection cellular traffic counts."""
from .graph import IntersectionGraph, build_adjacency, default_graph, load_graph, path_graph
from .features import Normalizer, PreparedData, RawSeries, ingest_csv, prepare, synth_generate
from .model import MPGAT, ModelConfig
from .stats import wilcoxon_rank_sum
from .training import RunReport, TrainConfig, evaluate, evaluate_persistence, multi_run, train

__version__ = "0.1.0"

__all__ = [
    "IntersectionGraph", "build_adjacency", "default_graph", "load_graph", "path_graph",
    "Normalizer", "PreparedData", "RawSeries", "ingest_csv", "prepare", "synth_generate",
    "MPGAT", "ModelConfig", "wilcoxon_rank_sum",
    "RunReport", "TrainConfig", "evaluate", "evaluate_persistence", "multi_run", "train",
]
