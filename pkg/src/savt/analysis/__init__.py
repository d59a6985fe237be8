from .pca import DegenerateRankError, pca_components, pca_rgb
from .pib import BoxAnnotation, MissingAnnotationError, PibReport, cls_patch_similarity, pib
from .probes import (
    CLS_LR_GRID,
    PROTOCOLS,
    ProbeDivergenceError,
    ProbeHyper,
    ProbeReport,
    ProbeTask,
    global_bit_task,
    layer_sweep,
    layer_sweep_model,
    mean_iou,
    train_linear_probe,
)
from .synthetic import SyntheticSet, make_scenes

__all__ = [
    "BoxAnnotation",
    "CLS_LR_GRID",
    "DegenerateRankError",
    "MissingAnnotationError",
    "PROTOCOLS",
    "PibReport",
    "ProbeDivergenceError",
    "ProbeHyper",
    "ProbeReport",
    "ProbeTask",
    "SyntheticSet",
    "cls_patch_similarity",
    "global_bit_task",
    "layer_sweep",
    "layer_sweep_model",
    "make_scenes",
    "mean_iou",
    "pca_components",
    "pca_rgb",
    "pib",
    "train_linear_probe",
]
