"""Weight averaging mechanics: batch-scaled decay and the closed form."""

import math

import numpy as np

from robustlab import models
from robustlab.models import ModelSpec
from robustlab.training import WAState, wa_tau_eff, wa_update

print("effective decay rate by batch size (base tau = 0.995 per 1024):")
for b in (128, 256, 512, 1024, 2048):
    print(f"  batch {b:>4}: tau_eff = {wa_tau_eff(0.995, b):.6f}")
print(f"  (batch 512 equals sqrt(0.995) = {math.sqrt(0.995):.6f} exactly: "
      f"{wa_tau_eff(0.995, 512) == math.sqrt(0.995)})")

# shadow follows the closed-form geometric sum
spec = ModelSpec(depth=10, width_multiplier=1, num_classes=10,
                 input_shape=(1, 8, 8))
params = models.ParameterSet(spec, seed=0)
params.add("w", np.array([0.0]))

tau = 0.99
state = WAState.init(params, tau)
rng = np.random.default_rng(0)
thetas = rng.normal(size=100)
for t in range(100):
    params["w"].data[:] = thetas[t]
    wa_update(state, params, batch_size=1024)

closed = (tau ** 100) * 0.0 + (1 - tau) * sum(
    tau ** (100 - 1 - t) * thetas[t] for t in range(100))
print(f"\nshadow after 100 noisy steps: {float(state.shadow['w'].data[0]):+.6f}")
print(f"closed-form geometric sum:    {closed:+.6f}")
print(f"last raw parameter value:     {thetas[-1]:+.6f}  (noisier than the shadow)")
