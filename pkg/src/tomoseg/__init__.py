"""
tomoseg: unsupervised segmentation of tomography volumes.

Three stages: intensity-clustering pseudo labels, supervised training on
them, then student-teacher self-correction. Each stage lives in its own
module; the public surface is re-exported here so callers need one import.
"""

from .config import (
    AugmentConfig,
    EvalConfig,
    IoConfig,
    LossConfig,
    ModelConfig,
    PhantomSpec,
    PseudolabelConfig,
    RunConfig,
    TrainConfig,
    load_run_config,
    write_resolved_config,
)
from .errors import (
    CheckpointError,
    ClusteringError,
    ConfigError,
    ModelConfigError,
    TomosegError,
    TrainingDivergedError,
    VolumeFormatError,
)
from .volume_io import (
    FormatSpec,
    LabelVolume,
    SliceStack,
    Volume,
    extract_stack,
    load_labels,
    load_volume,
    normalize,
    random_crop,
    save_labels,
    save_volume,
)
from .pseudolabel import (
    ClusterModel,
    assign_labels,
    generate_pseudolabels,
    gmm_fit,
    kmeans_fit,
    multi_otsu_fit,
)
from .augment import AugmentPolicy, strong_augment, weak_augment
from .segnet import build_model, forward, param_count, predict, softmax_probs
from .losses import (
    EMPTY_MASK,
    bootstrap_targets,
    cross_entropy,
    focal_loss,
    generalized_ce,
    label_smoothing,
    masked_cross_entropy,
    one_hot,
    symmetric_ce,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .selftrain import (
    TeacherState,
    confidence_mask,
    ema_update,
    predict_volume,
    self_correction_step,
    train_stage2,
    train_stage3,
)
from .metrics import (
    ClusterClassMatrix,
    MetricReport,
    cluster_class_confusion,
    match_classes,
    miou,
    pixel_accuracy,
)
from .gradcam import CamHeatmap, grad_cam
from .phantom import corruption_report, generate_phantom
from .logging_config import setup_logging

__all__ = [
    "AugmentConfig",
    "EvalConfig",
    "IoConfig",
    "LossConfig",
    "ModelConfig",
    "PhantomSpec",
    "PseudolabelConfig",
    "RunConfig",
    "TrainConfig",
    "load_run_config",
    "write_resolved_config",
    "CheckpointError",
    "ClusteringError",
    "ConfigError",
    "ModelConfigError",
    "TomosegError",
    "TrainingDivergedError",
    "VolumeFormatError",
    "FormatSpec",
    "LabelVolume",
    "SliceStack",
    "Volume",
    "extract_stack",
    "load_labels",
    "load_volume",
    "normalize",
    "random_crop",
    "save_labels",
    "save_volume",
    "ClusterModel",
    "assign_labels",
    "generate_pseudolabels",
    "gmm_fit",
    "kmeans_fit",
    "multi_otsu_fit",
    "AugmentPolicy",
    "strong_augment",
    "weak_augment",
    "build_model",
    "forward",
    "param_count",
    "predict",
    "softmax_probs",
    "EMPTY_MASK",
    "bootstrap_targets",
    "cross_entropy",
    "focal_loss",
    "generalized_ce",
    "label_smoothing",
    "masked_cross_entropy",
    "one_hot",
    "symmetric_ce",
    "load_checkpoint",
    "save_checkpoint",
    "TeacherState",
    "confidence_mask",
    "ema_update",
    "predict_volume",
    "self_correction_step",
    "train_stage2",
    "train_stage3",
    "ClusterClassMatrix",
    "MetricReport",
    "cluster_class_confusion",
    "match_classes",
    "miou",
    "pixel_accuracy",
    "CamHeatmap",
    "grad_cam",
    "corruption_report",
    "generate_phantom",
    "setup_logging",
]
