"""A miniature cross-validation run with fold ensembling, via the public API.

Writes the full experiment layout under ./demo_run (see README).

    python3 demos/03_cross_validation.py
"""

import json

from cascade_seg.config import from_dict
from cascade_seg.cv import run_cv

cfg = from_dict({
    "folds": 3,
    "paths": {"data_dir": "demo_run/data", "out_dir": "demo_run/experiment"},
    "phantom": {"train_count": 15, "test_count": 4, "extents": [32, 32, 6], "spacing": [3.334, 3.334, 10.0]},
    "model2d": {"base_channels": 4, "depth": 2},
    "model3d": {"base_channels": 4, "depth": 1, "pool_factors": [[2, 2, 1]]},
    "train2d": {"epochs": 4, "lr0": 0.02},
    "train3d": {"epochs": 12, "lr0": 0.02},
})

summary = run_cv(cfg)
print("mean over folds (final stage):")
print(json.dumps({k: round(v, 2) for k, v in summary["mean"]["final"].items() if k.endswith("dice")}, indent=2))
print("ensemble on the test set:")
print(json.dumps({k: round(v, 2) for k, v in summary["ensemble"]["aggregate"].items() if k.endswith("dice")}, indent=2))
