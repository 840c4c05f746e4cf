"""Generate a phantom, corrupt its labels a little and score the result.

    python3 demos/01_phantoms_and_metrics.py
"""

import numpy as np

from cascade_seg import LabelMap, PhantomSpec, evaluate_pairs, generate_phantom
from cascade_seg.metrics import myocardium_mask

image, gt = generate_phantom(PhantomSpec(seed=3, pathological=True, noreflow_probability=1.0, case_id="demo"))
counts = np.bincount(gt.voxels.ravel(), minlength=5)
print(f"phantom {image.extents} at {image.spacing} mm")
print("voxels per class (bg, cavity, myo, infarct, no-reflow):", counts.tolist())

# a "prediction": erode the myocardium by one voxel in-plane and drop the no-reflow core
pred = gt.voxels.copy()
myo = myocardium_mask(gt)
shifted = np.roll(myo, 1, axis=0)
pred[myo & ~shifted] = 0
pred[pred == 4] = 3

report = evaluate_pairs([(LabelMap(pred, gt.spacing, "demo"), gt)])
print(report.table())
