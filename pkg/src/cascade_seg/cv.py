"""Cross-validation, cascade training and majority-vote ensembling.

Experiment directory layout (``paths.out_dir``)::

    config.yaml                 resolved configuration
    folds.json                  case -> fold assignment
    fold_<k>/weights2d.csegw    stage-1 weights
    fold_<k>/weights3d.csegw    stage-2 weights
    fold_<k>/train2d.csv        per-epoch losses (epoch, ce, dice, total, lr)
    fold_<k>/train3d.csv
    fold_<k>/report_coarse.{csv,json}   held-out fold, coarse stage
    fold_<k>/report_final.{csv,json}    held-out fold, postprocessed stage
    cv_summary.json             per-fold and mean aggregates of both stages
    ensemble/pred/<case>.nii    voted + postprocessed test predictions
    ensemble/report.{csv,json}  test metrics of the ensemble
    ensemble/fold_reports.json  test metrics of each fold's own cascade
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .cascade import compose_refine_input, largest_component_filter, run_coarse, run_pipeline
from .config import RunConfig
from .nifti import read_nifti, write_nifti
from .optim import NonFiniteGradientError
from .phantom import cohort_specs, generate_phantom
from .training import TrainingCase, fit
from .unet import UNet, build_unet, load_weights, save_weights
from .volume import LabelMap, Volume, zscore_normalize

log = logging.getLogger(__name__)

IMAGE_SUFFIX = "_img"
LABEL_SUFFIX = "_gt"


@dataclass(frozen=True)
class Case:
    case_id: str
    image: Volume  # normalized
    gt: LabelMap | None = None


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def write_phantom_dataset(out: str | Path, count: int, seed: int, pathology_rate: float = 0.67, base=None, prefix: str = "") -> list[str]:
    """Generate ``count`` phantoms as ``<id>_img.nii`` / ``<id>_gt.nii`` in ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for spec in cohort_specs(count, seed, pathology_rate, base):
        cid = prefix + spec.case_id
        image, gt = generate_phantom(spec)
        write_nifti(image, out / f"{cid}{IMAGE_SUFFIX}.nii")
        write_nifti(gt, out / f"{cid}{LABEL_SUFFIX}.nii")
        ids.append(cid)
    return ids


def load_cases(directory: str | Path) -> list[Case]:
    """All ``<id>_img.nii`` images in ``directory`` (z-scored) with their ``<id>_gt.nii`` if present."""
    directory = Path(directory)
    cases = []
    for img_path in sorted(directory.glob(f"*{IMAGE_SUFFIX}.nii")):
        cid = img_path.name[: -len(f"{IMAGE_SUFFIX}.nii")]
        image = read_nifti(img_path, labels=False)
        image = zscore_normalize(Volume(image.voxels, image.spacing, cid))
        gt_path = directory / f"{cid}{LABEL_SUFFIX}.nii"
        gt = None
        if gt_path.exists():
            g = read_nifti(gt_path, labels=True)
            gt = LabelMap(g.voxels, g.spacing, cid)
            image.check_geometry(gt)
        cases.append(Case(cid, image, gt))
    return cases


def ensure_phantom_data(cfg: RunConfig) -> tuple[Path, Path]:
    """Create ``data_dir/train`` and ``data_dir/test`` from the phantom section if they are missing."""
    root = Path(cfg.paths.data_dir)
    train_dir, test_dir = root / "train", root / "test"
    p = cfg.phantom
    if not train_dir.is_dir():
        write_phantom_dataset(train_dir, p.train_count, p.seed, p.pathology_rate, p.base_spec())
    if not test_dir.is_dir() and p.test_count > 0:
        write_phantom_dataset(test_dir, p.test_count, p.seed + 1, p.pathology_rate, p.base_spec(), prefix="T")
    return train_dir, test_dir


# --------------------------------------------------------------------------
# folds and voting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    fold_assignments: dict[str, int]
    seed: int
    k: int

    def fold(self, idx: int) -> list[str]:
        return [c for c, f in self.fold_assignments.items() if f == idx]

    def training(self, idx: int) -> list[str]:
        return [c for c, f in self.fold_assignments.items() if f != idx]

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "k": self.k, "fold_assignments": self.fold_assignments}, indent=2) + "\n"


def make_folds(case_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle, then contiguous chunks whose sizes differ by at most one."""
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} cases cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, k)
    assignment = {}
    for f, chunk in enumerate(chunks):
        for i in chunk:
            assignment[ids[i]] = f
    return FoldSplit({c: assignment[c] for c in ids}, seed, k)


def majority_vote(label_maps: Sequence[LabelMap]) -> LabelMap:
    """Per-voxel modal label; ties go to the smallest tied class."""
    if not label_maps:
        raise ValueError("majority_vote needs at least one label map")
    first = label_maps[0]
    for m in label_maps[1:]:
        first.check_geometry(m)
    stack = np.stack([m.voxels for m in label_maps])
    counts = np.stack([(stack == c).sum(axis=0) for c in range(5)])
    return LabelMap(counts.argmax(axis=0).astype(np.uint8), first.spacing, first.case_id)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def slice_cases(cases: Sequence[Case]) -> list[TrainingCase]:
    out = []
    for c in cases:
        for k in range(c.image.extents[2]):
            out.append(
                TrainingCase(
                    c.image.voxels[None, None, :, :, k].copy(), c.gt.voxels[None, :, :, k].astype(np.intp), f"{c.case_id}:{k}"
                )
            )
    return out


class TrainingDivergedError(RuntimeError):
    """A non-finite gradient stopped training; ``checkpoint`` holds the last finite weights."""

    def __init__(self, stage: str, step: int, checkpoint: Path | None):
        where = f"; last good weights in {checkpoint}" if checkpoint else ""
        super().__init__(f"{stage} training diverged at step {step}{where}")
        self.stage = stage
        self.step = step
        self.checkpoint = checkpoint


def _fit_or_abort(model: UNet, stage: str, log_dir: Path | None, *args, **kwargs):
    try:
        return fit(model, *args, **kwargs)
    except NonFiniteGradientError as exc:
        # adam_step refuses to apply a bad update, so the parameters are still the last good ones
        ckpt = None
        if log_dir is not None:
            ckpt = log_dir / f"weights{stage}.lastgood.csegw"
            save_weights(model, ckpt)
        raise TrainingDivergedError(stage, exc.step, ckpt) from exc


@dataclass
class CascadeModels:
    model2d: UNet
    model3d: UNet
    history2d: list = field(default_factory=list)
    history3d: list = field(default_factory=list)
    trained_on: set[str] = field(default_factory=set)


def train_cascade(cases: Sequence[Case], cfg: RunConfig, seed: int, log_dir: Path | None = None) -> CascadeModels:
    """Stage 1 on all slices, then stage 2 on (image + stage-1 probabilities) of the same cases."""
    if not cases:
        raise ValueError("no training cases")
    for c in cases:
        if c.gt is None:
            raise ValueError(f"training case {c.case_id} has no ground truth")
    dtype = np.dtype(cfg.dtype)
    model2d = build_unet(cfg.unet2d(), seed=_seed(seed, 2), dtype=dtype)
    hist2d = _fit_or_abort(
        model2d,
        "2d",
        log_dir,
        slice_cases(cases),
        cfg.train2d.epochs,
        cfg.train2d.lr0,
        seed=_seed(seed, 20),
        augmentation=cfg.train2d.augment,
        log_path=None if log_dir is None else log_dir / "train2d.csv",
    )

    vol_cases = []
    for c in cases:
        coarse = run_coarse(model2d, c.image)
        vol_cases.append(TrainingCase(compose_refine_input(c.image, coarse), c.gt.voxels[None].astype(np.intp), c.case_id))
    model3d = build_unet(cfg.unet3d(), seed=_seed(seed, 3), dtype=dtype)
    hist3d = _fit_or_abort(
        model3d,
        "3d",
        log_dir,
        vol_cases,
        cfg.train3d.epochs,
        cfg.train3d.lr0,
        seed=_seed(seed, 30),
        augmentation=cfg.train3d.augment,
        log_path=None if log_dir is None else log_dir / "train3d.csv",
    )
    return CascadeModels(model2d, model3d, hist2d, hist3d, {c.case_id for c in cases})


def evaluate_stages(model2d: UNet, model3d: UNet, cases: Sequence[Case], min_component_voxels: int = 10):
    """Reports for the coarse, refined and postprocessed stages over labelled cases."""
    results = [run_pipeline(model2d, model3d, c.image, min_component_voxels) for c in cases]
    reports = {}
    for stage in ("coarse", "refined", "postprocessed"):
        reports[stage] = metrics.evaluate_pairs((r.stages[stage].labels, c.gt) for r, c in zip(results, cases))
    return reports, results


@dataclass
class FoldResult:
    fold: int
    weights2d: Path
    weights3d: Path
    reports: dict
    trained_on: set[str]
    held_out: list[str]


def train_fold(split: FoldSplit, fold_idx: int, cfg: RunConfig, cases: Sequence[Case], out_dir: Path) -> FoldResult:
    """Train the cascade on every fold but ``fold_idx`` and report both stages on the held-out fold.

    Existing weight files for the fold are reused when their configuration
    matches, so an interrupted run picks up where it stopped.
    """
    if not 0 <= fold_idx < split.k:
        raise ValueError(f"fold index {fold_idx} outside 0..{split.k - 1}")
    by_id = {c.case_id: c for c in cases}
    held_ids = split.fold(fold_idx)
    train_ids = split.training(fold_idx)
    fold_dir = Path(out_dir) / f"fold_{fold_idx}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    w2, w3 = fold_dir / "weights2d.csegw", fold_dir / "weights3d.csegw"

    model2d = model3d = None
    trained_on: set[str] = set(train_ids)
    if w2.exists() and w3.exists():
        try:
            model2d = _load(w2, cfg.unet2d(), cfg.dtype)
            model3d = _load(w3, cfg.unet3d(), cfg.dtype)
            log.info("fold %d: reusing saved weights", fold_idx)
        except ValueError:
            model2d = model3d = None
    if model2d is None:
        for name in ("train2d.csv", "train3d.csv"):
            (fold_dir / name).unlink(missing_ok=True)
        train_cases = [by_id[c] for c in train_ids]
        models = train_cascade(train_cases, cfg, seed=_seed(cfg.seed, fold_idx), log_dir=fold_dir)
        trained_on = models.trained_on
        if trained_on & set(held_ids):
            raise AssertionError(f"fold {fold_idx}: held-out cases used for training")
        model2d, model3d = models.model2d, models.model3d
        save_weights(model2d, w2)
        save_weights(model3d, w3)

    reports, _ = evaluate_stages(model2d, model3d, [by_id[c] for c in held_ids], cfg.min_component_voxels)
    reports["coarse"].write(fold_dir / "report_coarse")
    reports["postprocessed"].write(fold_dir / "report_final")
    return FoldResult(fold_idx, w2, w3, {"coarse": reports["coarse"], "final": reports["postprocessed"]}, trained_on, held_ids)


def _load(path: Path, ucfg, dtype) -> UNet:
    weights = load_weights(path, expected=ucfg)
    model = build_unet(ucfg, dtype=np.dtype(dtype))
    model.set_weights(weights)
    return model


# --------------------------------------------------------------------------
# experiment
# --------------------------------------------------------------------------


def _mean_aggregate(reports: Sequence[metrics.MetricsReport]) -> dict:
    out = {}
    for col in metrics.METRIC_COLUMNS:
        vals = [r.aggregate[col] for r in reports if not np.isnan(r.aggregate[col])]
        out[col] = float(np.mean(vals)) if vals else None
    return out


def run_cv(cfg: RunConfig, ensemble: bool = True) -> dict:
    """Train every active fold, write fold and summary reports, then ensemble on the test set."""
    cfg.validate()
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.yaml")
    train_dir, test_dir = ensure_phantom_data(cfg)
    cases = load_cases(train_dir)
    if not cases:
        raise FileNotFoundError(f"no *_img.nii cases in {train_dir}")
    split = make_folds([c.case_id for c in cases], cfg.folds, cfg.seed)
    (out_dir / "folds.json").write_text(split.to_json())

    fold_results = []
    for f in cfg.active_folds():
        log.info("fold %d/%d", f, cfg.folds)
        fold_results.append(train_fold(split, f, cfg, cases, out_dir))

    summary = {
        "folds": {
            str(r.fold): {stage: rep.aggregate for stage, rep in r.reports.items()} for r in fold_results
        },
        "mean": {stage: _mean_aggregate([r.reports[stage] for r in fold_results]) for stage in ("coarse", "final")},
    }
    (out_dir / "cv_summary.json").write_text(json.dumps(_nan_to_none(summary), indent=2) + "\n")

    if ensemble and test_dir.is_dir():
        summary["ensemble"] = run_ensemble_inference(cfg, [(r.weights2d, r.weights3d) for r in fold_results], load_cases(test_dir))
    return summary


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, float) and np.isnan(obj):
        return None
    return obj


def fold_weight_sets(cfg: RunConfig) -> list[tuple[Path, Path]]:
    out_dir = Path(cfg.paths.out_dir)
    sets = []
    for f in cfg.active_folds():
        w2, w3 = out_dir / f"fold_{f}" / "weights2d.csegw", out_dir / f"fold_{f}" / "weights3d.csegw"
        if not (w2.exists() and w3.exists()):
            raise FileNotFoundError(f"missing weights for fold {f} in {out_dir}")
        sets.append((w2, w3))
    return sets


def run_ensemble_inference(cfg: RunConfig, weight_sets: Sequence[tuple[Path, Path]], test_cases: Sequence[Case]) -> dict:
    """Run each fold's cascade up to the refined stage, vote, then postprocess the consensus."""
    out = Path(cfg.paths.out_dir) / "ensemble"
    pred_dir = out / "pred"
    pred_dir.mkdir(parents=True, exist_ok=True)
    models = [(_load(w2, cfg.unet2d(), cfg.dtype), _load(w3, cfg.unet3d(), cfg.dtype)) for w2, w3 in weight_sets]

    voted = []
    per_fold: list[list[LabelMap]] = [[] for _ in models]
    for case in test_cases:
        refined = []
        for i, (m2, m3) in enumerate(models):
            res = run_pipeline(m2, m3, case.image, cfg.min_component_voxels)
            refined.append(res.refined.labels)
            per_fold[i].append(res.final.labels)
        consensus = majority_vote(refined)
        final = LabelMap(largest_component_filter(consensus.voxels, cfg.min_component_voxels), consensus.spacing, case.case_id)
        write_nifti(final, pred_dir / f"{case.case_id}.nii")
        voted.append(final)

    result = {"n_cases": len(test_cases), "pred_dir": str(pred_dir)}
    labelled = [i for i, c in enumerate(test_cases) if c.gt is not None]
    if labelled:
        report = metrics.evaluate_pairs((voted[i], test_cases[i].gt) for i in labelled)
        report.write(out / "report")
        fold_reports = [
            metrics.evaluate_pairs((preds[i], test_cases[i].gt) for i in labelled).aggregate for preds in per_fold
        ]
        (out / "fold_reports.json").write_text(json.dumps(_nan_to_none({"folds": fold_reports}), indent=2) + "\n")
        result["aggregate"] = report.aggregate
        result["fold_aggregates"] = fold_reports
    return result

