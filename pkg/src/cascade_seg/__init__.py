"""Two-stage 2D/3D U-Net cascade for myocardium, infarct and no-reflow segmentation, in numpy."""

from .cascade import (
    PipelineResult,
    SegmentationResult,
    compose_refine_input,
    postprocess,
    run_coarse,
    run_pipeline,
    run_refine,
)
from .config import ConfigError, RunConfig, load_config
from .cv import FoldSplit, make_folds, majority_vote, run_cv, run_ensemble_inference, train_fold
from .losses import combined_loss
from .metrics import MetricsReport, evaluate_case, evaluate_pairs
from .nifti import FormatError, read_nifti, write_nifti
from .optim import AdamState, adam_step
from .phantom import PhantomSpec, generate_phantom
from .unet import UNet, UNetConfig, build_unet, load_model, load_weights, save_weights
from .volume import GeometryError, LabelMap, Volume, zscore_normalize

__all__ = [
    "AdamState",
    "ConfigError",
    "FoldSplit",
    "FormatError",
    "GeometryError",
    "LabelMap",
    "MetricsReport",
    "PhantomSpec",
    "PipelineResult",
    "RunConfig",
    "SegmentationResult",
    "UNet",
    "UNetConfig",
    "Volume",
    "adam_step",
    "build_unet",
    "combined_loss",
    "compose_refine_input",
    "evaluate_case",
    "evaluate_pairs",
    "generate_phantom",
    "load_config",
    "load_model",
    "load_weights",
    "make_folds",
    "majority_vote",
    "postprocess",
    "read_nifti",
    "run_coarse",
    "run_cv",
    "run_ensemble_inference",
    "run_pipeline",
    "run_refine",
    "save_weights",
    "train_fold",
    "write_nifti",
    "zscore_normalize",
]
