"""Norm-ball geometry and PGD on a model with a known worst case.

For a linear binary classifier the strongest linf perturbation is
eps * sign(w1 - w0); PGD should land exactly there.
"""

import numpy as np

from robustlab import autodiff as ad
from robustlab import attacks
from robustlab.attacks import AttackSpec, PerturbationSet

# --- projections ----------------------------------------------------------------
pset_inf = PerturbationSet("linf", 8 / 255)
print("linf projection of (0.1, -0.1) at eps=8/255:",
      attacks.project(np.array([0.1, -0.1]), pset_inf))

pset_l2 = PerturbationSet("l2", 1.0)
print("l2 projection of (3, 4) onto the unit ball:",
      attacks.project(np.array([3.0, 4.0]), pset_l2))

# --- PGD against a linear model ----------------------------------------------------
rng = np.random.default_rng(0)
W = rng.normal(size=(6, 2))


class Linear:
    def __call__(self, x):
        return ad.matmul(x, ad.tensor(W))


eps = 0.1
x = rng.normal(size=(1, 6)).astype(np.float32)
spec = AttackSpec(steps=40, step_size=eps / 8, objective="xent",
                  clip_to_unit_box=False)
delta = attacks.pgd(Linear(), x, [0], None, PerturbationSet("linf", eps), spec,
                    seed=1)
closed_form = eps * np.sign(W[:, 1] - W[:, 0])
print("\nPGD-40 delta:    ", np.round(delta[0], 4))
print("closed-form delta:", np.round(closed_form, 4))
print("max deviation: %.2e" % np.max(np.abs(delta[0] - closed_form)))

# --- objectives -------------------------------------------------------------------
z = ad.tensor([[3.0, 2.0, 1.0]])
print("\ninner objectives on logits (3,2,1) with true class 0:")
for kind in ("xent", "margin", "dlr"):
    v = attacks.inner_objective(kind, z, None, [0])
    print(f"  {kind:>6}: {v.item(): .4f}")

# higher objective = better for the attacker; margin > 0 means misclassified
print("margin values helper:", attacks.margin_values(z.data, [0]))
