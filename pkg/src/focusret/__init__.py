"""Resource-efficient text-image retrieval with a frozen ViT and a trainable side branch.

Pure numpy: a small reverse-mode autodiff engine, toy ViT and text
encoders, the Focus-Adapter side branch, queue-augmented contrastive
losses, training, retrieval metrics and an activation-memory profiler.
"""

from .config import LossConfig, ModelConfig, RunConfig, TrainConfig, load_config
from .data import Dataset, Vocab, generate_synthetic, load_dataset, synthetic_dataset
from .model import Model, build_model
from .retrieval import RetrievalResult, evaluate_model, mean_recall, recall_at_k, text_query_recall
from .trainer import EfficiencyReport, profile_strategies, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EfficiencyReport",
    "LossConfig",
    "Model",
    "ModelConfig",
    "RetrievalResult",
    "RunConfig",
    "TrainConfig",
    "Vocab",
    "build_model",
    "evaluate_model",
    "generate_synthetic",
    "load_config",
    "load_dataset",
    "mean_recall",
    "profile_strategies",
    "recall_at_k",
    "synthetic_dataset",
    "text_query_recall",
    "train",
]
