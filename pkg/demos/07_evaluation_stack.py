"""The stacked evaluation protocol, on a quickly-trained model.

Attacks run in sequence (restart-PGD on cross-entropy, restart-PGD on the
difference-of-logits-ratio objective, MultiTargeted margin); each later
attack only sees the survivors.  Budgets are scaled down to demo size.
"""

from robustlab import data, evaluation, training
from robustlab.attacks import AttackSpec, PerturbationSet
from robustlab.data import BatchPlan
from robustlab.models import ModelSpec
from robustlab.objectives import OuterObjectiveSpec
from robustlab.training import TrainConfig

EPS = 0.15

ds = data.load_digits()
parts = data.split_dataset(ds, {"train": 1024, "val": 128, "test": 256},
                           seed=0)
config = TrainConfig(
    model_spec=ModelSpec(depth=10, width_multiplier=1, num_classes=10,
                         input_shape=(1, 8, 8)),
    objective=OuterObjectiveSpec(outer="at", inner="xent"),
    train_attack=AttackSpec(steps=5, step_size=0.06, objective="xent"),
    pset=PerturbationSet("linf", EPS),
    plan=BatchPlan(batch_size=128, labeled_fraction=1.0),
    epochs=5,
    eval_attack=AttackSpec(steps=10, step_size=0.04, objective="margin"),
    augment_kind="none",
)
model, _ = training.train(config, parts["train"].examples(), None,
                          (parts["val"].images, parts["val"].labels), seed=0)

test = (parts["test"].images, parts["test"].labels)
report, rows, robust = evaluation.standard_protocol(
    model, test, PerturbationSet("linf", EPS), seed=0,
    steps_scale=0.2, restarts_scale=0.4)

print(f"clean accuracy:        {report.clean_accuracy:.4f}")
print(f"PGD-40 margin (ref):   {report.extras['pgd40_margin_accuracy']:.4f}")
print("attack stack:")
for name, breaks, cumulative in report.per_attack:
    print(f"  {name:<32} broke {breaks:>3} more | robust so far "
          f"{cumulative:.4f}")
print(f"final robust accuracy: {report.final_robust_accuracy:.4f}")
