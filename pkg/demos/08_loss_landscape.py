"""Margin surface around a test image, rendered as ASCII and saved to CSV.

The u axis follows the worst perturbation found by PGD-40; the v axis is a
random sign direction of matching magnitude.  Negative cells (shown as #)
are misclassified; the clean image sits at the center.
"""

import os

import numpy as np

from robustlab import data, evaluation, training
from robustlab.attacks import AttackSpec, PerturbationSet
from robustlab.data import BatchPlan
from robustlab.models import ModelSpec
from robustlab.objectives import OuterObjectiveSpec
from robustlab.training import TrainConfig

EPS = 0.15

ds = data.load_digits()
parts = data.split_dataset(ds, {"train": 1024, "val": 128, "test": 128},
                           seed=0)
config = TrainConfig(
    model_spec=ModelSpec(depth=10, width_multiplier=1, num_classes=10,
                         input_shape=(1, 8, 8)),
    objective=OuterObjectiveSpec(outer="at", inner="xent"),
    train_attack=AttackSpec(steps=5, step_size=0.06, objective="xent"),
    pset=PerturbationSet("linf", EPS),
    plan=BatchPlan(batch_size=128, labeled_fraction=1.0),
    epochs=4,
    eval_attack=AttackSpec(steps=10, step_size=0.04, objective="margin"),
    augment_kind="none",
)
model, _ = training.train(config, parts["train"].examples(), None,
                          (parts["val"].images, parts["val"].labels), seed=0)

x = parts["test"].images[3:4]
label = int(parts["test"].labels[3])
grid = evaluation.loss_landscape(model, x, label,
                                 PerturbationSet("linf", EPS),
                                 grid_n=21, seed=0)

print(f"label {grid.label}, predicted {grid.predicted}, "
      f"clean margin {grid.clean_margin:+.3f}")
print("margin surface (u down, v across; # misclassified, . safe, "
      "o decision boundary):")
for row in grid.values:
    line = ""
    for v in row:
        line += "#" if v < -0.05 else ("o" if v < 0.05 else ".")
    print("  " + line)

os.makedirs("runs/demo_landscape", exist_ok=True)
evaluation.write_landscape(grid, "runs/demo_landscape/grid.csv",
                           "runs/demo_landscape/grid.json")
print("wrote runs/demo_landscape/grid.{csv,json}")
