"""The outer-loss family on one batch: AT, TRADES, smoothing, KL order."""

import numpy as np

from robustlab import data, models, objectives
from robustlab.attacks import AttackSpec, PerturbationSet
from robustlab.models import ModelSpec, build
from robustlab.objectives import OuterObjectiveSpec

ds = data.load_digits()
batch = (ds.images[:64], ds.labels[:64])
spec = ModelSpec(depth=10, width_multiplier=1, num_classes=10,
                 input_shape=(1, 8, 8))
params = build(spec, seed=0)
pset = PerturbationSet("linf", 0.2)
attack = AttackSpec(steps=5, step_size=0.08, objective="xent")

at = OuterObjectiveSpec(outer="at", inner="xent")
print("AT loss:               %.4f"
      % objectives.outer_loss(at, params, batch, pset, attack, seed=0).item())

for beta in (0.0, 1.0, 6.0):
    trades = OuterObjectiveSpec(outer="trades", inner="kl", beta=beta)
    kl_attack = AttackSpec(steps=5, step_size=0.08, objective="kl")
    loss = objectives.outer_loss(trades, params, batch, pset, kl_attack, seed=0)
    print(f"TRADES loss (beta={beta:>3}): {loss.item():.4f}")

swapped = OuterObjectiveSpec(outer="trades", inner="kl", beta=6.0, kl_swap=True)
kl_attack = AttackSpec(steps=5, step_size=0.08, objective="kl")
print("TRADES, KL(clean||adv): %.4f"
      % objectives.outer_loss(swapped, params, batch, pset, kl_attack,
                              seed=0).item())

# label smoothing keeps rows normalized, split by pseudo flag
y = objectives.one_hot([3], 10)
print("\nsmoothed target (gamma=0.1):", np.round(
    objectives.smooth_labels(y, 0.1, 10)[0], 3))

mixed = data.Batch(images=batch[0][:4],
                   labels=np.array([0, 1, 2, 3]),
                   is_pseudo=np.array([False, False, True, True]))
spec_smooth = OuterObjectiveSpec(outer="at", inner="xent",
                                 smoothing_labeled=0.0,
                                 smoothing_unlabeled=0.2)
targets = objectives.build_targets(spec_smooth, mixed.labels, mixed.is_pseudo, 10)
print("labeled row target peak:", targets[0].max(),
      " pseudo row target peak:", targets[2].max())
