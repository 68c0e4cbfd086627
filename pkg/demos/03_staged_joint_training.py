"""The staged training flow on toy data, end to end.

1. train a plain SOD model (ssod);
2. rank the COD training set under it and append the easiest samples to the
   SOD set (data interaction);
3. train the full joint model with adversarial and contrastive terms;
4. write predictions plus uncertainty maps and score them.

Defaults are small so the script finishes in a few minutes on a CPU; pass
``--steps 2000`` for the acceptance-scale run.
"""
import argparse
import tempfile
from pathlib import Path

from jointsod.core import load_dataset, save_mask
from jointsod.datapipe import make_toy_dataset, select_interaction, write_augmentation_manifest
from jointsod.metrics import MetricReport
from jointsod.trainer import TrainConfig, TrainState, dataset_mae, load_train_data, run

ap = argparse.ArgumentParser()
ap.add_argument("--out", type=Path, default=Path(tempfile.mkdtemp()))
ap.add_argument("--steps", type=int, default=300)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

roots = make_toy_dataset(64, 64, 64, seed=args.seed, out_dir=args.out / "toy", n_bridge=32)

plain = TrainConfig.desk(preset="ssod", max_steps=max(50, args.steps // 4), seed=args.seed)
sod_model = run(plain, roots.sod, out_dir=args.out / "ssod")
cod_train = load_dataset(roots.cod, "cod")
report = select_interaction(cod_train, sod_model.predictor("sod"), M=len(cod_train) // 10)
write_augmentation_manifest(roots.sod, roots.cod, report.chosen_ids)
print("easiest COD samples for the SOD model:", report.chosen_ids)

cfg = TrainConfig.desk(preset="full", max_steps=args.steps, seed=args.seed)
state = run(cfg, roots.sod, roots.cod, roots.bridge, out_dir=args.out / "full")
data = load_train_data(cfg, roots.sod, roots.cod, roots.bridge)
print(f"train MAE  SOD {dataset_mae(state, data.sod, 'sod'):.4f}  COD {dataset_mae(state, data.cod, 'cod'):.4f}")

for task, records in (("sod", load_dataset(roots.sod, "sod")), ("cod", cod_train)):
    predict = state.predictor(task, with_uncertainty=True)
    metrics = MetricReport()
    for rec in records:
        pred, unc = predict(rec.image)
        save_mask(pred, args.out / task / "pred" / f"{rec.id}.png")
        save_mask(unc, args.out / task / "unc" / f"{rec.id}.png")
        metrics.add(rec.id, pred, rec.mask)
    print(f"\n{task.upper()} (training images)")
    print(metrics.table(per_image=False))
print(f"\noutputs under {args.out}")
