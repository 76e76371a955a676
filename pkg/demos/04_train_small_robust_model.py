"""Train a small robust digit classifier and compare with standard training.

Runs adversarial training (PGD inner maximization) at a desk-scale budget,
then attacks both models with PGD-40 on the margin objective.  Expect the
standard model to collapse under attack and the robust one to hold.

Takes a few minutes on two cores.
"""

import numpy as np

from robustlab import attacks, data, training
from robustlab.attacks import AttackSpec, PerturbationSet
from robustlab.models import ModelSpec
from robustlab.objectives import OuterObjectiveSpec
from robustlab.training import TrainConfig

EPS = 0.2

ds = data.load_dataset("typeset")
parts = data.split_dataset(ds, {"train": 2000, "val": 256, "test": 512},
                           seed=0)
labeled = parts["train"].examples()
val = (parts["val"].images, parts["val"].labels)
test = (parts["test"].images, parts["test"].labels)

spec = ModelSpec(depth=10, width_multiplier=1, num_classes=10,
                 input_shape=(1, 28, 28))


def make_config(eps):
    pset = PerturbationSet("linf", eps)
    return TrainConfig(
        model_spec=spec,
        objective=OuterObjectiveSpec(outer="at", inner="xent"),
        train_attack=AttackSpec(steps=10,
                                step_size=attacks.step_size_rule(EPS, 10),
                                objective="xent"),
        pset=pset,
        plan=data.BatchPlan(batch_size=128, labeled_fraction=1.0),
        epochs=6,
        eval_attack=AttackSpec(steps=40, step_size=1.25 * EPS / 40,
                               objective="margin"),
        validation_size=256,
        augment_kind="none",
    )


print("adversarial training (PGD-10 inner maximization)...")
robust_model, hist = training.train(make_config(EPS), labeled, None, val,
                                    seed=0)
for h in hist:
    print(f"  epoch {h['epoch']}: loss {h['train_loss']:.3f} "
          f"clean {h['clean_val_acc']:.3f} robust {h['robust_val_acc']:.3f}")

print("standard training (epsilon = 0)...")
std_model, _ = training.train(make_config(0.0), labeled, None, val, seed=0)

pgd40 = AttackSpec(steps=40, step_size=1.25 * EPS / 40, objective="margin")
pset = PerturbationSet("linf", EPS)
for name, model in (("robust", robust_model), ("standard", std_model)):
    rep, _, _ = attacks.evaluate_stack(model, test, pset, [pgd40], seed=7)
    print(f"{name:>9}: clean {rep.clean_accuracy:.3f}  "
          f"PGD-40 robust {rep.final_robust_accuracy:.3f}")
