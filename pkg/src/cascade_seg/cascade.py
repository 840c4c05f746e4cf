"""Two-stage inference: per-slice 2D coarse segmentation, 3D refinement, cleanup.

The 2D network sees each z-plane on its own. Its class probabilities are
stacked back into a volume and concatenated with the image, giving a
6-channel input (image, then P(class 0..4)) for the 3D network. The refined
label map is finally reduced to its main connected heart region.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nifti import write_sidecar
from .tensor import ShapeError
from .unet import UNet
from .volume import GeometryError, LabelMap, Volume

NUM_CLASSES = 5
STAGES = ("coarse", "refined", "postprocessed")
DEFAULT_MIN_COMPONENT = 10


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    """Class probabilities ``[5, nx, ny, nz]`` and their argmax labels for one case."""

    probs: np.ndarray
    labels: LabelMap
    stage: str
    case_id: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.probs.shape != (NUM_CLASSES,) + self.labels.extents:
            raise ShapeError(f"probs shape {self.probs.shape} does not match labels {self.labels.extents}")


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Class index per voxel; ties go to the smaller index."""
    return probs.argmax(axis=0).astype(np.uint8)


def _result(probs: np.ndarray, v: Volume, stage: str) -> SegmentationResult:
    return SegmentationResult(probs, LabelMap(argmax_labels(probs), v.spacing, v.case_id), stage, v.case_id)


def run_coarse(model2d: UNet, v: Volume, batch_slices: int | None = None) -> SegmentationResult:
    """2D inference on every whole z-plane of a normalized volume.

    Slices are independent; ``batch_slices`` only controls how many are fed
    through the network at once.
    """
    if model2d.cfg.rank != 2 or model2d.cfg.in_channels != 1:
        raise ShapeError("coarse stage needs a 2D model with one input channel")
    nz = v.extents[2]
    step = nz if batch_slices is None else max(1, batch_slices)
    # [nz, 1, nx, ny]
    slices = np.moveaxis(v.voxels, 2, 0)[:, None].astype(model2d.dtype)
    out = []
    for start in range(0, nz, step):
        out.append(model2d.forward(slices[start : start + step], keep_tape=False))
    probs = np.concatenate(out, axis=0)  # [nz, 5, nx, ny]
    return _result(np.ascontiguousarray(np.moveaxis(probs, 0, -1)), v, "coarse")


def compose_refine_input(v: Volume, coarse: SegmentationResult) -> np.ndarray:
    """``[1, 6, nx, ny, nz]``: image channel then the five coarse probabilities."""
    if coarse.labels.extents != v.extents or not v.same_geometry(coarse.labels):
        raise GeometryError(f"coarse result {coarse.labels.extents} does not match volume {v.extents}")
    image = v.voxels[None].astype(coarse.probs.dtype)
    return np.concatenate([image, coarse.probs], axis=0)[None]


def run_refine(model3d: UNet, refine_input: np.ndarray, reference: Volume) -> SegmentationResult:
    if model3d.cfg.rank != 3:
        raise ShapeError("refinement stage needs a 3D model")
    if refine_input.shape[1] != model3d.cfg.in_channels:
        raise ShapeError(f"refine input has {refine_input.shape[1]} channels, model expects {model3d.cfg.in_channels}")
    probs = model3d.forward(refine_input, keep_tape=False)[0]
    return _result(probs, reference, "refined")


def largest_component_filter(labels: np.ndarray, min_component_voxels: int = DEFAULT_MIN_COMPONENT) -> np.ndarray:
    """Keep the largest 26-connected foreground component and any other of at least ``min_component_voxels``."""
    fg = labels > 0
    if not fg.any():
        return labels.copy()
    comp, n = ndimage.label(fg, structure=np.ones((3, 3, 3), bool))
    sizes = np.bincount(comp.ravel(), minlength=n + 1)
    sizes[0] = 0
    keep = sizes >= min_component_voxels
    keep[int(np.argmax(sizes))] = True
    keep[0] = False
    out = labels.copy()
    out[~keep[comp]] = 0
    return out


def postprocess(r: SegmentationResult, min_component_voxels: int = DEFAULT_MIN_COMPONENT) -> SegmentationResult:
    """Relabel scattered foreground as background; probabilities of removed voxels become background."""
    lab = r.labels.voxels
    cleaned = largest_component_filter(lab, min_component_voxels)
    removed = (lab > 0) & (cleaned == 0)
    probs = r.probs
    if removed.any():
        probs = probs.copy()
        probs[:, removed] = 0
        probs[0, removed] = 1
    labels = LabelMap(cleaned, r.labels.spacing, r.labels.case_id)
    return SegmentationResult(probs, labels, "postprocessed", r.case_id)


@dataclass
class PipelineResult:
    coarse: SegmentationResult
    refined: SegmentationResult
    final: SegmentationResult
    stages: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stages = {"coarse": self.coarse, "refined": self.refined, "postprocessed": self.final}


def run_pipeline(
    model2d: UNet, model3d: UNet, v: Volume, min_component_voxels: int = DEFAULT_MIN_COMPONENT
) -> PipelineResult:
    """coarse -> compose -> refine -> postprocess on one normalized volume."""
    coarse = run_coarse(model2d, v)
    refined = run_refine(model3d, compose_refine_input(v, coarse), v)
    final = postprocess(refined, min_component_voxels)
    return PipelineResult(coarse, refined, final)


def dump_stages(result: PipelineResult, directory: str | Path) -> None:
    """Write each stage's probabilities in the raw+JSON sidecar format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [f"p{c}" for c in range(NUM_CLASSES)]
    for stage, r in result.stages.items():
        stem = directory / f"{r.case_id or 'case'}_{stage}"
        write_sidecar(r.probs.astype(np.float32), stem, r.labels.spacing, r.case_id, channels=names)
