"""Contour-guided query refinement for echocardiography segmentation."""
from .checkpoint import load_model, save_checkpoint
from .contours import Contour, ShapeDescriptor, descriptor_matrix, extract_contours
from .data import DatasetSplit, ImageSample, RawSample, SynthConfig, generate_synthetic, preprocess, split_by_patient
from .encoder import EncoderConfig, HRNetEncoder
from .errors import CGQRError, ConfigError, PreconditionError, ShapeError, TrainingDivergedError
from .estimator import CGQRSegmenter
from .evaluator import EvalReport, dsc, evaluate
from .heads import LossReport, PredictionBundle, total_loss
from .model import CGQRNet, ModelConfig
from .trainer import TrainConfig, TrainState, init_state, train

__version__ = "0.1.0"

__all__ = [
    "CGQRError", "CGQRNet", "CGQRSegmenter", "ConfigError", "Contour", "DatasetSplit", "EncoderConfig",
    "EvalReport", "HRNetEncoder", "ImageSample", "LossReport", "ModelConfig", "PreconditionError",
    "PredictionBundle", "RawSample", "ShapeDescriptor", "ShapeError", "SynthConfig", "TrainConfig",
    "TrainState", "TrainingDivergedError", "descriptor_matrix", "dsc", "evaluate", "extract_contours",
    "generate_synthetic", "init_state", "load_model", "preprocess", "save_checkpoint", "split_by_patient",
    "total_loss", "train",
]
