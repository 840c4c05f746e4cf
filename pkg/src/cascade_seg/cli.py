"""Command line entry point: ``cascade-seg phantom|train|infer|eval|cv|ensemble``.

Failures print one JSON object on stderr, e.g.
``{"error": "FormatError", "message": "...", "field": "magic", "path": "x.nii"}``,
and exit with status 1. Usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import metrics
from .cascade import dump_stages, run_pipeline
from .config import RunConfig, load_config
from .cv import (
    LABEL_SUFFIX,
    ensure_phantom_data,
    fold_weight_sets,
    load_cases,
    make_folds,
    run_cv,
    run_ensemble_inference,
    train_fold,
    write_phantom_dataset,
)
from .nifti import read_nifti, write_nifti
from .unet import load_model
from .volume import LabelMap, Volume, zscore_normalize


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.folds is not None:
        cfg.folds = args.folds
        if cfg.fold_indices is not None:
            cfg.fold_indices = [f for f in cfg.fold_indices if f < cfg.folds]
    if args.out is not None:
        cfg.paths = replace(cfg.paths, out_dir=str(args.out))
    cfg.validate()
    return cfg


def cmd_phantom(args) -> dict:
    cfg = _resolve(args)
    p = cfg.phantom
    seed = p.seed if args.seed is None else args.seed
    count = p.train_count if args.count is None else args.count
    out = Path(args.out) if args.out is not None else Path(cfg.paths.data_dir) / "train"
    rate = p.pathology_rate if args.pathology_rate is None else args.pathology_rate
    if not 0 <= rate <= 1:
        raise ValueError(f"pathology rate must lie in [0, 1], got {rate}")
    ids = write_phantom_dataset(out, count, seed, rate, p.base_spec(), prefix=args.prefix)
    return {"written": len(ids), "dir": str(out)}


def cmd_train(args) -> dict:
    cfg = _resolve(args)
    train_dir, _ = ensure_phantom_data(cfg)
    cases = load_cases(train_dir)
    split = make_folds([c.case_id for c in cases], cfg.folds, cfg.seed)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    (out / "folds.json").write_text(split.to_json())
    folds = cfg.active_folds() if args.fold is None else [args.fold]
    done = []
    for f in folds:
        r = train_fold(split, f, cfg, cases, out)
        done.append({"fold": f, "coarse_myo_dice": r.reports["coarse"].aggregate["myo_dice"], "final_myo_dice": r.reports["final"].aggregate["myo_dice"]})
    return {"folds": done}


def cmd_infer(args) -> dict:
    model2d = load_model(args.weights2d)
    model3d = load_model(args.weights3d)
    raw = read_nifti(args.input, labels=False)
    case_id = Path(args.input).name.removesuffix(".nii").removesuffix("_img")
    image = zscore_normalize(Volume(raw.voxels, raw.spacing, case_id))
    result = run_pipeline(model2d, model3d, image, args.min_component_voxels)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_nifti(result.final.labels, args.output)
    if args.dump_stages:
        dump_stages(result, args.dump_stages)
    return {"case_id": case_id, "pred": str(args.output)}


def cmd_eval(args) -> dict:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gt_files = sorted(gt_dir.glob(f"*{LABEL_SUFFIX}.nii")) or sorted(gt_dir.glob("*.nii"))
    pairs, excluded = [], []
    for gt_file in gt_files:
        cid = gt_file.name.removesuffix(".nii").removesuffix(LABEL_SUFFIX)
        pred_file = pred_dir / f"{cid}.nii"
        if not pred_file.exists():
            excluded.append({"case_id": cid, "error": "missing prediction"})
            continue
        g = read_nifti(gt_file, labels=True)
        p = read_nifti(pred_file, labels=True)
        pairs.append((LabelMap(p.voxels, p.spacing, cid), LabelMap(g.voxels, g.spacing, cid)))
    if not pairs:
        raise FileNotFoundError(f"no prediction/ground-truth pairs between {pred_dir} and {gt_dir}")
    report = metrics.evaluate_pairs(pairs)
    report.excluded_cases.extend(excluded)
    report.aggregate["n_excluded"] = len(report.excluded_cases)
    stem = Path(args.out)
    if stem.suffix in (".csv", ".json"):
        stem = stem.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = report.write(stem)
    print(report.table())
    return {"csv": str(csv_path), "json": str(json_path), "n_cases": report.aggregate["n_cases"]}


def cmd_cv(args) -> dict:
    cfg = _resolve(args)
    summary = run_cv(cfg, ensemble=not args.no_ensemble)
    return {"out_dir": cfg.paths.out_dir, "mean": summary["mean"]}


def cmd_ensemble(args) -> dict:
    cfg = _resolve(args)
    if args.input is not None:
        cases = load_cases(args.input)
    else:
        _, test_dir = ensure_phantom_data(cfg)
        cases = load_cases(test_dir)
    if not cases:
        raise FileNotFoundError("no *_img.nii test cases found")
    result = run_ensemble_inference(cfg, fold_weight_sets(cfg), cases)
    return {k: v for k, v in result.items() if k != "fold_aggregates"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-seg", description="Two-stage 2D/3D U-Net cascade on short-axis volumes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="experiment directory (overrides paths.out_dir)"):
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--out", type=Path, help=out_help)

    p = sub.add_parser("phantom", help="generate a synthetic phantom cohort")
    common(p, "output directory (default: <data_dir>/train)")
    p.add_argument("--count", type=int)
    p.add_argument("--pathology-rate", type=float)
    p.add_argument("--prefix", default="", help="prefix for case ids")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train the cascade on one or all folds")
    common(p)
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one volume")
    p.add_argument("--weights2d", required=True, type=Path)
    p.add_argument("--weights3d", required=True, type=Path)
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", dest="output", required=True, type=Path)
    p.add_argument("--dump-stages", type=Path)
    p.add_argument("--min-component-voxels", type=int, default=10)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a prediction directory against ground truth")
    p.add_argument("--pred", required=True, type=Path, help="directory of <id>.nii predictions")
    p.add_argument("--gt", required=True, type=Path, help="directory of <id>_gt.nii label maps")
    p.add_argument("--out", required=True, type=Path, help="report path; <stem>.csv and <stem>.json are written")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="full cross-validation experiment plus test-set ensemble")
    common(p)
    p.add_argument("--no-ensemble", action="store_true")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("ensemble", help="majority-vote the fold cascades on test volumes")
    common(p)
    p.add_argument("--in", dest="input", type=Path, help="directory of <id>_img.nii volumes")
    p.set_defaults(func=cmd_ensemble)
    return parser


def _error_line(exc: BaseException) -> str:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "path"):
        value = getattr(exc, attr, None)
        if value is not None:
            doc[attr] = str(value)
    return json.dumps(doc)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except (Exception, KeyboardInterrupt) as exc:  # noqa: BLE001 - every failure becomes one JSON line
        print(_error_line(exc), file=sys.stderr)
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
