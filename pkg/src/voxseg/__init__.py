"""voxseg: desk-scale multimodal 3D MRI brain-tumor segmentation.

SE-augmented CNN-Transformer hybrid with self-supervised pretraining,
tiled/TTA inference, per-class ensembling, BraTS-style postprocessing and
metrics, testable end to end on synthetic phantoms.
"""

__version__ = "0.1.0"

from .errors import ValidationError
from .volumes import (
    LabelVolume,
    MultiModalVolume,
    ProbabilityVolume,
    RegionMasks,
    load_volume,
    region_decompose,
    save_label_volume,
    save_volume,
)
from .phantom import generate_phantom
from .model import ModelConfig, build_autoencoder, build_model
from .training import TrainConfig, pretrain, train
from .inference import TorchPredictor, predict_case, predict_volume
from .postprocess import EnsembleWeights, apply_postprocessing, argmax_labels
from .metrics import evaluate_case, evaluate_set
from .config import PipelineConfig, resolve_config

__all__ = [
    "ValidationError",
    "LabelVolume",
    "MultiModalVolume",
    "ProbabilityVolume",
    "RegionMasks",
    "load_volume",
    "region_decompose",
    "save_label_volume",
    "save_volume",
    "generate_phantom",
    "ModelConfig",
    "build_autoencoder",
    "build_model",
    "TrainConfig",
    "pretrain",
    "train",
    "TorchPredictor",
    "predict_case",
    "predict_volume",
    "EnsembleWeights",
    "apply_postprocessing",
    "argmax_labels",
    "evaluate_case",
    "evaluate_set",
    "PipelineConfig",
    "resolve_config",
    "__version__",
]
