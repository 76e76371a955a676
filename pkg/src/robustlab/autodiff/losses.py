"""Classification losses with analytic backward rules."""

import numpy as np

from ..errors import ContractViolation
from .tensor import Tensor
from .ops import softmax


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over the batch of -sum_c target * log softmax(logits).

    `target` holds one probability distribution per row (sums to 1 within
    1e-5); it is treated as a constant.  Stable for |logits| up to ~1e2 via
    the log-sum-exp path.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != logits.shape:
        raise ContractViolation(
            f"target shape {t.shape} != logits shape {logits.shape}")
    sums = t.sum(axis=1)
    if not np.all(np.abs(sums - 1.0) <= 1e-5):
        raise ContractViolation("target rows must each sum to 1 (within 1e-5)")
    B = logits.shape[0]
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    log_p = z - lse
    out_data = np.asarray(-(t * log_p).sum() / B)
    p = np.exp(log_p)

    def bwd(g):
        return (g * (p - t) / B,)

    return Tensor(out_data, logits.requires_grad, (logits,), bwd, "xent")


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over the batch of KL(P || Q), P and Q from the two logit rows.

    Gradients flow through both arguments; detach one to stop it.
    """
    if p_logits.shape != q_logits.shape:
        raise ContractViolation(
            f"shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    B = p_logits.shape[0]

    def _log_soft(z):
        zmax = z.max(axis=1, keepdims=True)
        return z - (np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax)

    lp = _log_soft(p_logits.data)
    lq = _log_soft(q_logits.data)
    p = np.exp(lp)
    q = np.exp(lq)
    per_row = (p * (lp - lq)).sum(axis=1, keepdims=True)
    out_data = np.asarray(per_row.sum() / B)

    def bwd(g):
        dp = g * p * ((lp - lq) - per_row) / B if p_logits.requires_grad else None
        dq = g * (q - p) / B if q_logits.requires_grad else None
        return dp, dq

    return Tensor(out_data, p_logits.requires_grad or q_logits.requires_grad,
                  (p_logits, q_logits), bwd, "kl")
