"""Modality translation for frozen object detectors."""

from .boxes import AnnotationSet, BoxAnnotation, Detection, DetectionSet, iou
from .core import (
    DetectorTrainConfig,
    ModTrModel,
    TrainConfig,
    TrainMode,
    build_model,
    train,
    train_detector,
    train_joint,
)
from .detector import DetectorHandle, load_detector
from .fusion import FusionKind, fuse
from .translator import TranslatorConfig, build_translator

__all__ = [
    "AnnotationSet",
    "BoxAnnotation",
    "Detection",
    "DetectionSet",
    "DetectorHandle",
    "DetectorTrainConfig",
    "FusionKind",
    "ModTrModel",
    "TrainConfig",
    "TrainMode",
    "TranslatorConfig",
    "build_model",
    "build_translator",
    "fuse",
    "iou",
    "load_detector",
    "train",
    "train_detector",
    "train_joint",
]

__version__ = "0.1.0"
