"""The training losses on hand-sized inputs.

Shows the edge-aware weight around a step edge, the structure loss at a few
operating points, and how the cross-task contrastive loss reacts when the
SOD foreground drifts toward or away from the shared background.
"""
import math

import numpy as np
import torch

from jointsod.contrast import contrastive_loss
from jointsod.losses import edge_weight, structure_loss

y = torch.zeros(1, 1, 64, 64, dtype=torch.float64)
y[..., :32] = 1
w = edge_weight(y)[0, 0, 0]
print("edge weight along one row (every 4th column):")
print(" ", np.round(w[::4].numpy(), 3))

print("\nstructure loss")
for name, logits in {
    "uninformed (p = 0.5)": torch.zeros_like(y),
    "confident and right": 40 * y - 20,
    "confident and wrong": 20 - 40 * y,
}.items():
    print(f"  {name:<22} {float(structure_loss(logits, y)):.4f}")

print("\ncontrastive loss as the negative pair aligns")
bg = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
for angle in (180, 135, 90, 45, 0):
    a = math.radians(angle)
    sod_fg = torch.tensor([math.cos(a), math.sin(a), 0.0], dtype=torch.float64)
    print(f"  angle(sod_fg, sod_bg) = {angle:>3} deg -> {float(contrastive_loss(sod_fg, bg, bg, bg)):.4f}")
print(f"  (all four identical gives log(4/3) = {math.log(4 / 3):.6f})")
