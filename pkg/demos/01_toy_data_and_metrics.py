"""Toy data and the four evaluation measures.

Generates a few synthetic SOD / COD pairs, then scores progressively worse
predictions so you can see how MAE, mean F, E and S respond.

    python3 demos/01_toy_data_and_metrics.py [out_dir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np
from scipy import ndimage

from jointsod.core import load_dataset
from jointsod.datapipe import contrast_gap, make_toy_dataset
from jointsod.metrics import MetricReport

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
roots = make_toy_dataset(4, 4, 64, seed=0, out_dir=out)
sod = load_dataset(roots.sod, "sod")
cod = load_dataset(roots.cod, "cod")

print("luminance gap between object and background")
print(f"  SOD: {np.mean([contrast_gap(r.image.data, r.mask.data) for r in sod]):.3f}")
print(f"  COD: {np.mean([contrast_gap(r.image.data, r.mask.data) for r in cod]):.3f}")

# Degrade one ground truth in a few ways and watch the scores move.
y = sod[0].mask.data
rng = np.random.default_rng(0)
candidates = {
    "perfect": y,
    "blurred": ndimage.gaussian_filter(y, 2.0),
    "dilated": ndimage.binary_dilation(y, iterations=3).astype(float),
    "noisy": np.clip(y + rng.normal(0, 0.3, y.shape), 0, 1),
    "empty": np.zeros_like(y),
}
report = MetricReport()
for name, pred in candidates.items():
    report.add(name, pred, y)
print()
print(report.table())
