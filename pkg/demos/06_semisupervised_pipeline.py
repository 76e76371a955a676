"""Pseudo-labeling end to end on the bundled digits.

Hides labels for most of the dataset, trains a quick standard classifier on
the small labeled part, scores the pool, keeps the top slice per class, and
composes ratio-controlled batches.
"""

import numpy as np

from robustlab import data, training
from robustlab.attacks import AttackSpec, PerturbationSet
from robustlab.data import BatchPlan, ExampleStream
from robustlab.models import ModelSpec
from robustlab.objectives import OuterObjectiveSpec
from robustlab.training import TrainConfig

ds = data.load_digits()
parts = data.split_dataset(ds, {"test": 256, "val": 128, "train": -1}, seed=0)
train, val, test = parts["train"], parts["val"], parts["test"]

labeled_ds, pool, pool_true = data.semisup_surrogate(train, 400, seed=0)
print(f"labeled {len(labeled_ds)}, unlabeled pool {pool.shape[0]}")

# quick standard classifier on the labeled part
config = TrainConfig(
    model_spec=ModelSpec(depth=10, width_multiplier=1, num_classes=10,
                         input_shape=(1, 8, 8)),
    objective=OuterObjectiveSpec(outer="at", inner="xent"),
    train_attack=AttackSpec(steps=1, step_size=0.05, objective="xent"),
    pset=PerturbationSet("linf", 0.0),  # epsilon 0: plain training
    plan=BatchPlan(batch_size=128, labeled_fraction=1.0),
    epochs=6,
    eval_attack=AttackSpec(steps=1, step_size=0.05, objective="margin"),
    augment_kind="none",
)
classifier, hist = training.train(config, labeled_ds.examples(), None,
                                  (val.images, val.labels), seed=0)
print(f"classifier clean validation accuracy: {hist[-1]['clean_val_acc']:.3f}")

examples, rows = data.pseudo_label(classifier, pool, test.images,
                                   n_select=600, num_classes=10)
agree = np.mean([e.label == pool_true[r["pool_id"]]
                 for e, r in zip(examples, rows)])
print(f"selected {len(examples)} pseudo-labeled examples, "
      f"{agree:.1%} agree with the hidden labels")

# nesting: a larger selection contains the smaller one
_, rows_big = data.pseudo_label(classifier, pool, test.images, 700, 10)
small = {r["pool_id"] for r in rows}
big = {r["pool_id"] for r in rows_big}
print(f"selection nesting holds: {small <= big}")

# ratio-controlled batches with exact counts
plan = BatchPlan(batch_size=1024, labeled_fraction=data.parse_ratio("3:7"))
lab_stream = ExampleStream(labeled_ds.examples(), seed=1, tag="lab")
pse_stream = ExampleStream(examples, seed=2, tag="pse")
batch = data.compose_batch(lab_stream, pse_stream, plan)
print(f"\nratio 3:7 at batch 1024 -> {int((~batch.is_pseudo).sum())} labeled "
      f"+ {int(batch.is_pseudo.sum())} pseudo")
plan55 = BatchPlan(batch_size=1024, labeled_fraction=data.parse_ratio("5:5"))
batch = data.compose_batch(lab_stream, pse_stream, plan55)
print(f"ratio 5:5 at batch 1024 -> {int((~batch.is_pseudo).sum())} labeled "
      f"+ {int(batch.is_pseudo.sum())} pseudo")
