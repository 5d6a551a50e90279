"""Patch-descriptor adaptation with a differentiable top-k for image anomaly detection."""
from .adaptation import CenterBank, DescriptorConfig, TrainConfig, TrainLog, adfa_loss, init_center_bank, train
from .backbone import BackboneSpec, FeatureExtractor, PreprocessConfig, load_backbone
from .config import RunConfig, load_config
from .data import generate_synthetic, load_dataset
from .descriptor import PatchDescriptor
from .errors import AdfaError, ConfigError, IngestionError, NumericError, TrainingError
from .scoring import AblationGrid, AdfaModel, EvalReport, anomaly_score, auroc, evaluate
from .soft_topk import SoftTopKConfig, hard_topk, soft_topk, soft_topk_batch

__version__ = "0.1.0"

__all__ = [
    "AblationGrid",
    "AdfaError",
    "AdfaModel",
    "BackboneSpec",
    "CenterBank",
    "ConfigError",
    "DescriptorConfig",
    "EvalReport",
    "FeatureExtractor",
    "IngestionError",
    "NumericError",
    "PatchDescriptor",
    "PreprocessConfig",
    "RunConfig",
    "SoftTopKConfig",
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "adfa_loss",
    "anomaly_score",
    "auroc",
    "evaluate",
    "generate_synthetic",
    "hard_topk",
    "init_center_bank",
    "load_backbone",
    "load_config",
    "load_dataset",
    "soft_topk",
    "soft_topk_batch",
    "train",
]
