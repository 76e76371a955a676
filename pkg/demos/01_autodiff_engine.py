"""Tour of the tensor engine: graphs, gradients, activations, losses.

Builds a two-layer network by hand, differentiates it, and checks the
result against central finite differences computed with plain numpy.
"""

import numpy as np

from robustlab import autodiff as ad

ad.set_default_dtype(np.float64)

# --- a scalar chain ----------------------------------------------------------
x = ad.tensor([2.0], requires_grad=True)
y = ad.mul(x, x)          # x^2
loss = y.sum()
loss.backward()
print(f"d(x^2)/dx at x=2: {x.grad[0]:.1f}   (expected 4.0)")

# --- a small MLP, checked against finite differences --------------------------
rng = np.random.default_rng(0)
w1 = ad.tensor(rng.normal(size=(5, 16)) * 0.4, requires_grad=True)
w2 = ad.tensor(rng.normal(size=(16, 3)) * 0.4, requires_grad=True)
inputs = rng.normal(size=(8, 5))
targets = np.eye(3)[rng.integers(0, 3, size=8)]


def forward(w1_arr, w2_arr):
    h = ad.activation("swish", ad.matmul(ad.tensor(inputs), ad.as_tensor(w1_arr)))
    logits = ad.matmul(h, ad.as_tensor(w2_arr))
    return ad.softmax_cross_entropy(logits, targets)


loss = forward(w1, w2)
grads = ad.gradients(loss, {"w1": w1, "w2": w2})

h = 1e-5
flat = w1.data.reshape(-1)
i = 7
orig = flat[i]
flat[i] = orig + h
up = forward(w1.data, w2.data).item()
flat[i] = orig - h
down = forward(w1.data, w2.data).item()
flat[i] = orig
numeric = (up - down) / (2 * h)
print(f"analytic dL/dw1[{i}] = {grads['w1'].reshape(-1)[i]: .8f}")
print(f"numeric  dL/dw1[{i}] = {numeric: .8f}")

# --- the activation zoo --------------------------------------------------------
xs = ad.tensor([-2.0, -0.5, 0.0, 0.5, 2.0])
print("\nactivation values on [-2, -0.5, 0, 0.5, 2]:")
for kind in ad.ACTIVATIONS:
    vals = ad.activation(kind, xs).data
    print(f"  {kind:>10}: " + "  ".join(f"{v: .4f}" for v in vals))

# --- loss sanity ----------------------------------------------------------------
print(f"\nxent(uniform 2-way logits) = {ad.softmax_cross_entropy(ad.tensor([[0.0, 0.0]]), [[1.0, 0.0]]).item():.6f} (ln 2 = {np.log(2):.6f})")
same = ad.tensor([[1.0, 2.0, 3.0]])
print(f"KL(P||P) = {ad.kl_divergence(same, same).item():.6f}")
