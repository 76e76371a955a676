"""Outer minimization losses: AT and TRADES with selectable inner objective.

The inner maximization always runs with gradients stopped: the found
perturbation enters the outer graph as a constant array.  For gradient
testing, `adv_perturbation` and `outer_loss_at` split the attack from the
pure loss-at-perturbation function.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import attacks, models
from .attacks import AttackSpec, PerturbationSet
from .errors import ConfigurationError, ContractViolation

OUTER_KINDS = ("at", "trades", "mart")
INNER_KINDS = ("xent", "kl", "margin")


@dataclass(frozen=True)
class OuterObjectiveSpec:
    outer: str = "at"
    inner: str = "xent"
    beta: float = 6.0           # TRADES regularization weight; ignored for at
    smoothing_labeled: float = 0.0
    smoothing_unlabeled: float = 0.0
    train_epsilon_scale: float = 1.0
    kl_swap: bool = False       # swap KL arguments to the conventional order

    def __post_init__(self):
        if self.outer not in OUTER_KINDS:
            raise ConfigurationError(f"outer must be one of {OUTER_KINDS}")
        if self.inner not in INNER_KINDS:
            raise ConfigurationError(f"inner must be one of {INNER_KINDS}")
        if self.beta < 0:
            raise ConfigurationError("beta must be >= 0")
        for g in (self.smoothing_labeled, self.smoothing_unlabeled):
            if not 0.0 <= g < 1.0:
                raise ConfigurationError("smoothing must be in [0, 1)")
        if self.train_epsilon_scale <= 0:
            raise ConfigurationError("train_epsilon_scale must be > 0")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=ad.default_dtype())
    out[np.arange(labels.size), labels] = 1.0
    return out


def smooth_labels(y: np.ndarray, gamma: float, num_classes: int) -> np.ndarray:
    """(1-gamma) * y + gamma/C, so rows still sum to one."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"gamma must be in [0, 1), got {gamma}")
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[1] != num_classes:
        raise ContractViolation("smooth_labels expects one-hot rows (B, C)")
    if gamma == 0.0:
        return y.copy()
    return (1.0 - gamma) * y + gamma / num_classes


def _batch_fields(batch):
    if isinstance(batch, tuple):
        images, labels = batch
        return (np.asarray(images), np.asarray(labels, dtype=np.int64),
                np.zeros(len(labels), dtype=bool))
    return (np.asarray(batch.images),
            np.asarray(batch.labels, dtype=np.int64),
            np.asarray(batch.is_pseudo, dtype=bool))


def build_targets(spec: OuterObjectiveSpec, labels, is_pseudo,
                  num_classes: int) -> np.ndarray:
    """Smoothed target rows; labeled and pseudo examples get their own gamma."""
    y = one_hot(labels, num_classes)
    if spec.smoothing_labeled == 0.0 and spec.smoothing_unlabeled == 0.0:
        return y
    lab = smooth_labels(y, spec.smoothing_labeled, num_classes)
    pse = smooth_labels(y, spec.smoothing_unlabeled, num_classes)
    return np.where(np.asarray(is_pseudo, dtype=bool)[:, None], pse, lab)


def adv_perturbation(spec: OuterObjectiveSpec, params, batch,
                     pset: PerturbationSet, attack: AttackSpec,
                     seed: int = 0) -> np.ndarray:
    """Inner maximization at the training radius; gradients are stopped."""
    if attack.objective != spec.inner:
        raise ContractViolation(
            f"attack objective {attack.objective!r} must equal the loss "
            f"inner objective {spec.inner!r}")
    images, labels, _ = _batch_fields(batch)
    train_pset = pset.scaled(spec.train_epsilon_scale)
    clean_ref = None
    if spec.inner == "kl":
        clean_ref = models.attack_forward(params, ad.tensor(images)).data
    return attacks.pgd(params, images, labels, clean_ref, train_pset, attack,
                       seed=seed, mode="train")


def outer_loss_at(spec: OuterObjectiveSpec, params, batch, delta,
                  update_stats: bool = True) -> ad.Tensor:
    """Outer loss with the perturbation held fixed (pure in the parameters)."""
    if spec.outer == "mart":
        raise ConfigurationError(
            "mart is a placeholder; its boosted loss is not implemented")
    images, labels, is_pseudo = _batch_fields(batch)
    num_classes = params.spec.num_classes if not callable(params) else None
    if num_classes is None:
        num_classes = models.eval_logits(params, images[:1]).shape[1]
    targets = build_targets(spec, labels, is_pseudo, num_classes)
    x_adv = (images + delta).astype(images.dtype)

    def fwd(arr):
        if callable(params):
            return params(ad.tensor(arr))
        return models.forward(params, ad.tensor(arr), mode="train",
                              update_stats=update_stats)

    if spec.outer == "at":
        return ad.softmax_cross_entropy(fwd(x_adv), targets)

    clean_logits = fwd(images)
    loss = ad.softmax_cross_entropy(clean_logits, targets)
    if spec.beta != 0.0:
        adv_logits = fwd(x_adv)
        first, second = (clean_logits, adv_logits) if spec.kl_swap \
            else (adv_logits, clean_logits)
        loss = ad.add(loss, ad.scale(ad.kl_divergence(first, second), spec.beta))
    return loss


def outer_loss(spec: OuterObjectiveSpec, params, batch,
               pset: PerturbationSet, attack: AttackSpec,
               seed: int = 0, update_stats: bool = True) -> ad.Tensor:
    """Full outer objective: run the inner attack, then score at its result."""
    delta = adv_perturbation(spec, params, batch, pset, attack, seed=seed)
    return outer_loss_at(spec, params, batch, delta, update_stats=update_stats)
