"""Differentiable operations: arithmetic, layers, activations.

Each op builds one graph node whose backward rule returns gradients aligned
with its parents.  Shape checks raise ContractViolation; unknown
configuration values raise ConfigurationError.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, ContractViolation
from .tensor import Tensor, as_tensor

ACTIVATIONS = ("relu", "leaky_relu", "elu", "softplus", "swish", "gelu")

LEAKY_SLOPE = 0.01
ELU_ALPHA = 1.0
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out_data, a.requires_grad or b.requires_grad,
                  (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        return scale(as_tensor(a), float(b))
    if isinstance(a, (int, float)):
        return scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, a.requires_grad or b.requires_grad,
                  (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        return (g * s,)

    return Tensor(a.data * s, a.requires_grad, (a,), bwd, "scale")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return Tensor(-a.data, a.requires_grad, (a,), bwd, "neg")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor(out_data, a.requires_grad or b.requires_grad,
                  (a, b), bwd, "div")


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return Tensor(out_data, a.requires_grad, (a,), bwd, "reshape")


def flatten(a: Tensor) -> Tensor:
    """(B, ...) -> (B, prod(...))."""
    return reshape(a, (a.shape[0], -1))


def sum_(a: Tensor, axis=None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor(np.asarray(out_data), a.requires_grad, (a,), bwd, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out_data, a.requires_grad or b.requires_grad,
                  (a, b), bwd, "matmul")


def conv2d(x: Tensor, w: Tensor, bias=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, NCHW layout, symmetric zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractViolation("conv2d expects 4-D input and kernel")
    B, C, H, W = x.shape
    OC, IC, kh, kw = w.shape
    if IC != C:
        raise ContractViolation(f"conv2d channels mismatch: input {C}, kernel {IC}")
    s, p = int(stride), int(padding)
    if H + 2 * p < kh or W + 2 * p < kw:
        raise ContractViolation("conv2d kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # win: (B, C, OH, OW, kh, kw)
    out_data = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    parents = [x, w]
    if bias is not None:
        out_data += bias.data.reshape(1, OC, 1, 1)
        parents.append(bias)
    OH, OW = out_data.shape[2], out_data.shape[3]

    def bwd(g):
        dw = None
        if w.requires_grad:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        dx = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    # (B,OC,OH,OW) x (OC,C) -> (B,OH,OW,C)
                    part = np.tensordot(g, w.data[:, :, di, dj], axes=([1], [0]))
                    dxp[:, :, di:di + s * OH:s, dj:dj + s * OW:s] += \
                        part.transpose(0, 3, 1, 2)
            dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor(out_data, any(t.requires_grad for t in parents),
                  parents, bwd, "conv2d")


def mean_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide evenly."""
    B, C, H, W = x.shape
    k = int(window)
    if H % k or W % k:
        raise ContractViolation(f"mean_pool window {k} does not divide ({H},{W})")
    v = x.data.reshape(B, C, H // k, k, W // k, k)
    out_data = v.mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return Tensor(out_data, x.requires_grad, (x,), bwd, "mean_pool")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: Tensor, running_var: Tensor, *,
               training: bool, momentum: float = 0.9, eps: float = 1e-5,
               update_stats=None) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes by current-batch statistics; eval mode by the
    running statistics.  Running buffers are plain state (never receive
    gradient) and are updated in place only when `update_stats` is true,
    which defaults to `training`.  Set `update_stats=False` to use batch
    statistics without touching the buffers (attack-time forwards).
    """
    if x.data.ndim != 4:
        raise ContractViolation("batch_norm expects 4-D input")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ContractViolation("batch_norm scale/offset shape mismatch")
    if update_stats is None:
        update_stats = training

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            running_mean.data *= momentum
            running_mean.data += (1.0 - momentum) * mu
            running_var.data *= momentum
            running_var.data += (1.0 - momentum) * var
    else:
        mu = running_mean.data
        var = running_var.data

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
    out_data = gamma.data.reshape(1, C, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(1, C, 1, 1)
            if training:
                n = x.data.size // C
                t1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                t2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv_std.reshape(1, C, 1, 1) / n) * (n * dxhat - t1 - xhat * t2)
            else:
                dx = dxhat * inv_std.reshape(1, C, 1, 1)
        return dx, dgamma, dbeta, None, None

    return Tensor(out_data,
                  x.requires_grad or gamma.requires_grad or beta.requires_grad,
                  (x, gamma, beta, running_mean, running_var), bwd, "batch_norm")


def gather_rows(z: Tensor, idx) -> Tensor:
    """out[b] = z[b, idx[b]] for a (B, C) tensor; idx is constant."""
    idx = np.asarray(idx, dtype=np.int64)
    B = z.shape[0]
    rows = np.arange(B)
    out_data = z.data[rows, idx]

    def bwd(g):
        dz = np.zeros_like(z.data)
        dz[rows, idx] = g
        return (dz,)

    return Tensor(out_data, z.requires_grad, (z,), bwd, "gather_rows")


def masked_row_max(z: Tensor, mask) -> Tensor:
    """Row-wise max of a (B, C) tensor over positions where mask is True.

    Subgradient flows to one argmax position per row.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != z.shape:
        raise ContractViolation("masked_row_max mask shape mismatch")
    if not mask.any(axis=1).all():
        raise ContractViolation("masked_row_max: a row excludes every class")
    masked = np.where(mask, z.data, -np.inf)
    arg = masked.argmax(axis=1)
    rows = np.arange(z.shape[0])
    out_data = z.data[rows, arg]

    def bwd(g):
        dz = np.zeros_like(z.data)
        dz[rows, arg] = g
        return (dz,)

    return Tensor(out_data, z.requires_grad, (z,), bwd, "masked_row_max")


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log softmax of a (B, C) tensor via the log-sum-exp trick."""
    if z.data.ndim != 2:
        raise ContractViolation("log_softmax expects a (B, C) tensor")
    zmax = z.data.max(axis=1, keepdims=True)
    shifted = z.data - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    softmax = np.exp(out_data)

    def bwd(g):
        return (g - softmax * g.sum(axis=1, keepdims=True),)

    return Tensor(out_data, z.requires_grad, (z,), bwd, "log_softmax")


def softmax(z: np.ndarray) -> np.ndarray:
    """Plain-array softmax helper (no graph node)."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# --- activations ------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return Tensor(out_data, x.requires_grad, (x,), bwd, "relu")


def leaky_relu(x: Tensor) -> Tensor:
    out_data = np.where(x.data > 0, x.data, LEAKY_SLOPE * x.data)

    def bwd(g):
        return (g * np.where(x.data > 0, 1.0, LEAKY_SLOPE).astype(x.data.dtype),)

    return Tensor(out_data, x.requires_grad, (x,), bwd, "leaky_relu")


def elu(x: Tensor) -> Tensor:
    ex = np.exp(np.minimum(x.data, 0.0))
    out_data = np.where(x.data > 0, x.data, ELU_ALPHA * (ex - 1.0))

    def bwd(g):
        return (g * np.where(x.data > 0, 1.0, ELU_ALPHA * ex).astype(x.data.dtype),)

    return Tensor(out_data, x.requires_grad, (x,), bwd, "elu")


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x) computed as max(x, 0) + log1p(e^-|x|) to stay finite
    out_data = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = _sigmoid(x.data)

    def bwd(g):
        return (g * sig,)

    return Tensor(out_data, x.requires_grad, (x,), bwd, "softplus")


def swish(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)
    out_data = x.data * sig

    def bwd(g):
        return (g * (sig + x.data * sig * (1.0 - sig)),)

    return Tensor(out_data, x.requires_grad, (x,), bwd, "swish")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    inner = _GELU_C * (x.data + _GELU_K * x.data ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x.data * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * x.data ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner
        return (g * d,)

    return Tensor(out_data, x.requires_grad, (x,), bwd, "gelu")


_ACTIVATION_FNS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "elu": elu,
    "softplus": softplus,
    "swish": swish,
    "gelu": gelu,
}


def activation(kind: str, x: Tensor) -> Tensor:
    """Elementwise nonlinearity selected by name."""
    try:
        fn = _ACTIVATION_FNS[kind]
    except KeyError:
        raise ConfigurationError(
            f"unknown activation {kind!r}; choose from {ACTIVATIONS}") from None
    return fn(x)
