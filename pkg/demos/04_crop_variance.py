"""Cropping as a probe of model uncertainty.

Predicts each toy image under the four crop views (tight, medium, loose and
the raw frame), maps the predictions back to the frame, and reports the
per-pixel variance. Low-contrast (camouflaged) images are expected to
disagree more across views than high-contrast ones. Use a toy root the
checkpoint was not trained on (e.g. ``jointsod make-toy --seed 1``): on its
own training images a model has memorised the answer and barely varies.

    python3 demos/04_crop_variance.py CHECKPOINT TOY_ROOT
"""
import sys
from pathlib import Path

import numpy as np

from jointsod.cli import crop_study_record
from jointsod.core import load_dataset, rng_for
from jointsod.trainer import TrainState

ckpt, toy = Path(sys.argv[1]), Path(sys.argv[2])
state = TrainState.load(ckpt)
predict = state.predictor("cod")
for name in ("sod", "cod"):
    records = load_dataset(toy / name, name)
    var = [crop_study_record(predict, r, rng_for(0, k))[1].mean() for k, r in enumerate(records)]
    print(f"{name.upper()} images: mean cropping variance {np.mean(var):.5f} over {len(records)} images")
