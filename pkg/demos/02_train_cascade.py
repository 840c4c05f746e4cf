"""Train a small cascade on a handful of phantoms and compare the stages.

Runs in a minute or two on one core. The numbers are far from the desk-scale
results because the models and the training set are tiny.

    python3 demos/02_train_cascade.py
"""

import tempfile
from pathlib import Path

from cascade_seg.config import from_dict
from cascade_seg.cv import evaluate_stages, load_cases, train_cascade, write_phantom_dataset

cfg = from_dict({
    "phantom": {"extents": [32, 32, 6], "spacing": [3.334, 3.334, 10.0]},
    "model2d": {"base_channels": 4, "depth": 2},
    "model3d": {"base_channels": 4, "depth": 1, "pool_factors": [[2, 2, 1]]},
    "train2d": {"epochs": 4, "lr0": 0.02},
    "train3d": {"epochs": 15, "lr0": 0.02},
})

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    base = cfg.phantom.base_spec()
    write_phantom_dataset(tmp / "train", 20, seed=1, base=base)
    write_phantom_dataset(tmp / "val", 6, seed=2, base=base, prefix="V")
    train, val = load_cases(tmp / "train"), load_cases(tmp / "val")

    models = train_cascade(train, cfg, seed=0, log_dir=tmp)
    print("2D loss per epoch:", [round(h.total, 3) for h in models.history2d])
    print("3D loss per epoch:", [round(h.total, 3) for h in models.history3d])

    reports, _ = evaluate_stages(models.model2d, models.model3d, val)
    for stage, rep in reports.items():
        agg = rep.aggregate
        print(f"{stage:>14}: myo {agg['myo_dice']:5.1f}  infarct {agg['inf_dice']:5.1f}  no-reflow {agg['nr_dice']:5.1f}")
