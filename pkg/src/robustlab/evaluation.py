"""Final measurement: stacked attack protocol and loss-landscape grids."""

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import attacks, models
from .attacks import AttackSpec, PerturbationSet
from .errors import ContractViolation


@dataclass
class EvalReport:
    """Outcome of a stacked robustness evaluation.

    `per_attack` rows are (attack name, incremental breaks, cumulative
    robust accuracy); cumulative accuracy is non-increasing down the list
    and the final value never exceeds clean accuracy.
    """

    clean_accuracy: float
    per_attack: list
    final_robust_accuracy: float
    dataset_size: int
    threat: dict
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "per_attack": [
                {"attack": name, "incremental_breaks": breaks,
                 "cumulative_robust_accuracy": acc}
                for name, breaks, acc in self.per_attack
            ],
            "final_robust_accuracy": self.final_robust_accuracy,
            "dataset_size": self.dataset_size,
            "threat": self.threat,
            "extras": self.extras,
        }


def standard_stack(pset: PerturbationSet, steps_scale: float = 1.0,
                   restarts_scale: float = 1.0,
                   step_size: float = None) -> list:
    """The three-attack evaluation sequence.

    Restart-PGD on cross-entropy (5x100), restart-PGD on the
    difference-of-logits-ratio objective (5x100), then MultiTargeted margin
    (10x200).  Fixed steps with halving at 50%/75% stand in for adaptive
    step-size scheduling.  The scale knobs shrink the budget for desk-size
    smoke runs without changing the sequence.
    """
    alpha = attacks.DEFAULT_EVAL_ALPHA[pset.norm] if step_size is None \
        else step_size

    def n(base, scale):
        return max(1, int(round(base * scale)))

    return [
        AttackSpec(steps=n(100, steps_scale), step_size=alpha,
                   objective="xent", restarts=n(5, restarts_scale),
                   halve_at=(0.5, 0.75)),
        AttackSpec(steps=n(100, steps_scale), step_size=alpha,
                   objective="dlr", restarts=n(5, restarts_scale),
                   halve_at=(0.5, 0.75)),
        AttackSpec(steps=n(200, steps_scale), step_size=alpha,
                   objective="margin", restarts=n(10, restarts_scale),
                   multi_targeted=True),
    ]


def standard_protocol(model, test_set, pset: PerturbationSet, seed: int = 0,
                      batch_size: int = 256, steps_scale: float = 1.0,
                      restarts_scale: float = 1.0, step_size: float = None,
                      pgd40_step_size: float = None):
    """Clean accuracy, PGD-40-margin accuracy, and the stacked attack run.

    Returns (EvalReport, per-example rows, robust mask).  The PGD-40 margin
    column is the weaker reference adversary; the stack is the headline
    number.
    """
    stack = standard_stack(pset, steps_scale, restarts_scale, step_size)
    report, rows, robust = attacks.evaluate_stack(
        model, test_set, pset, stack, seed=seed, batch_size=batch_size)

    pgd40 = attacks.pgd40_margin(pset, step_size=pgd40_step_size)
    ref_report, ref_rows, _ = attacks.evaluate_stack(
        model, test_set, pset, [pgd40], seed=seed, batch_size=batch_size)
    report.extras["pgd40_margin_accuracy"] = ref_report.final_robust_accuracy
    rows = rows + ref_rows
    return report, rows, robust


@dataclass
class LandscapeGrid:
    """Margin surface around one input.

    Grid coordinates are in units of the attack perturbation: cell (a, b)
    evaluates the margin at clip(x + a*u + b*v), so (0, 0) is the clean
    input and (1, 0) is exactly the attacked point.  `u_range`/`v_range`
    give the corresponding pixel magnitudes (units times the linf norm of
    the direction).
    """

    u_direction: np.ndarray
    v_direction: np.ndarray
    units: np.ndarray
    u_range: np.ndarray
    v_range: np.ndarray
    values: np.ndarray
    epsilon_diamond: float
    label: int
    predicted: int
    clean_margin: float


def loss_landscape(model, x, y, pset: PerturbationSet, grid_n: int = 41,
                   span: float = 2.0, seed: int = 0, steps: int = 40,
                   step_size: float = None) -> LandscapeGrid:
    """Margin values over the plane spanned by the PGD-found worst
    perturbation (u) and a Rademacher direction of equal linf magnitude (v).

    `grid_n` must be odd so the clean input sits at the center cell.
    Correct classification corresponds to positive values; the attacked
    point, when the attack succeeded, is the negative cell at (1, 0).
    """
    if grid_n % 2 != 1:
        raise ContractViolation("grid_n must be odd")
    x = np.asarray(x.data if isinstance(x, ad.Tensor) else x,
                   dtype=ad.default_dtype())
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ContractViolation("loss_landscape works on a single example")
    label = int(y if np.isscalar(y) else np.asarray(y).reshape(-1)[0])

    alpha = step_size
    if alpha is None:
        alpha = attacks.DEFAULT_EVAL_ALPHA[pset.norm]
    spec = AttackSpec(steps=steps, step_size=alpha, objective="margin")
    delta = attacks.pgd(model, x, [label], None, pset, spec, seed=seed)[0]

    mag = float(np.max(np.abs(delta)))
    if mag == 0.0:
        warnings.warn("attack produced a zero perturbation; u is the zero "
                      "direction and the landscape is flat along u")
        v = np.zeros_like(delta)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7ade]))
        v = (rng.integers(0, 2, size=delta.shape) * 2 - 1).astype(delta.dtype)
        v *= mag  # match the linf magnitude of u

    half = grid_n // 2
    units = (np.arange(grid_n, dtype=np.float64) - half) / (half / span)

    points = np.empty((grid_n * grid_n,) + x.shape[1:], dtype=x.dtype)
    for i, a in enumerate(units):
        for j, b in enumerate(units):
            pert = a * delta + b * v
            points[i * grid_n + j] = np.clip(x[0] + pert.astype(x.dtype), 0.0, 1.0)

    logits = models.eval_logits(model, points, batch_size=512)
    margins = -attacks.margin_values(logits, np.full(len(points), label))
    values = margins.reshape(grid_n, grid_n)

    # the clean input is the center cell; read its margin from the same
    # batched forward so the equality is exact
    center = half * grid_n + half
    clean_margin = float(values[half, half])
    predicted = int(logits[center].argmax())

    return LandscapeGrid(
        u_direction=delta,
        v_direction=v,
        units=units,
        u_range=units * mag,
        v_range=units * mag,
        values=values,
        epsilon_diamond=pset.epsilon,
        label=label,
        predicted=predicted,
        clean_margin=clean_margin,
    )


def write_landscape(grid: LandscapeGrid, csv_path, json_path) -> None:
    """Values matrix as CSV plus a sidecar JSON with ranges and metadata."""
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([""] + [f"{b:.6g}" for b in grid.units])
        for a, row in zip(grid.units, grid.values):
            writer.writerow([f"{a:.6g}"] + [f"{v:.8g}" for v in row])
    sidecar = {
        "units": list(grid.units),
        "u_range_pixels": [float(v) for v in grid.u_range],
        "v_range_pixels": [float(v) for v in grid.v_range],
        "epsilon": grid.epsilon_diamond,
        "label": grid.label,
        "predicted": grid.predicted,
        "clean_margin": grid.clean_margin,
        "axes": "rows follow u (attack direction), columns follow v "
                "(Rademacher direction); margin > 0 means correct",
    }
    with open(json_path, "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
