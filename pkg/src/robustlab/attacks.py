"""Inner maximization: norm-ball projections, PGD, MultiTargeted, stacks.

Attacks are pure functions of (model, inputs, seed): restarts and targets
draw from derived child generators and results are reduced in a fixed
order, so repeated calls are bit-identical.

Models are either a ParameterSet (forwarded through the network in the
configured batch-norm mode) or any callable Tensor -> logits Tensor, which
keeps toy analytic models usable in tests.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import models
from .errors import AttackDiverged, ConfigurationError, ContractViolation
from .seeding import derive

INNER_OBJECTIVES = ("xent", "kl", "margin", "dlr", "targeted_margin")

# evaluation step sizes for PGD-40, per norm
DEFAULT_EVAL_ALPHA = {"linf": 2.0 / 255.0, "l2": 15.0 / 255.0}


def step_size_rule(epsilon: float, steps: int) -> float:
    """Training step size for a K-step attack: max(1.25 eps / K, 0.007)."""
    return max(1.25 * epsilon / steps, 0.007)


@dataclass(frozen=True)
class PerturbationSet:
    """Threat model: norm kind and radius (pixel units, images in [0, 1])."""

    norm: str
    epsilon: float

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ConfigurationError(f"norm must be linf or l2, got {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")

    def scaled(self, factor: float) -> "PerturbationSet":
        return PerturbationSet(self.norm, self.epsilon * factor)


@dataclass(frozen=True)
class AttackSpec:
    steps: int
    step_size: float
    objective: str = "xent"
    restarts: int = 1
    random_init: bool = True
    clip_to_unit_box: bool = True
    target: int = -1              # class index for targeted_margin
    multi_targeted: bool = False  # run the objective per wrong class
    halve_at: tuple = ()          # fractions of steps where step size halves
    label: str = ""

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.step_size <= 0:
            raise ConfigurationError("step_size must be > 0")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")
        if self.objective not in INNER_OBJECTIVES:
            raise ConfigurationError(
                f"objective must be one of {INNER_OBJECTIVES}, "
                f"got {self.objective!r}")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        base = "multitargeted_margin" if self.multi_targeted \
            else f"pgd_{self.objective}"
        return f"{base}_k{self.steps}_r{self.restarts}"


def pgd40_margin(pset: PerturbationSet, step_size: float = None) -> AttackSpec:
    """The PGD-40 margin attack used for validation and reporting."""
    alpha = DEFAULT_EVAL_ALPHA[pset.norm] if step_size is None else step_size
    return AttackSpec(steps=40, step_size=alpha, objective="margin")


# --- geometry ---------------------------------------------------------------

def _batch_axes(delta: np.ndarray) -> tuple:
    # 1-D arrays are a single perturbation; otherwise axis 0 is the batch
    return tuple(range(delta.ndim)) if delta.ndim <= 1 \
        else tuple(range(1, delta.ndim))


def project(delta, pset: PerturbationSet) -> np.ndarray:
    """Project onto the norm ball; idempotent.

    For l2, norms are computed per example (axis 0 is the batch for arrays
    of rank >= 2) in float64 so the bound holds to a few ulp.
    """
    d = np.asarray(delta.data if isinstance(delta, ad.Tensor) else delta)
    if not np.all(np.isfinite(d)):
        raise ContractViolation("project: delta must be finite")
    if pset.norm == "linf":
        return np.clip(d, -pset.epsilon, pset.epsilon)
    axes = _batch_axes(d)
    norms = np.sqrt(np.sum(d.astype(np.float64) ** 2, axis=axes, keepdims=True))
    # rescale only when clearly outside: keeps the map exactly idempotent in
    # the storage dtype while staying within 1+1e-6 of the radius
    slack = 1.0 + 4.0 * np.finfo(d.dtype).eps if d.dtype.kind == "f" else 1.0
    scale = np.where(norms > pset.epsilon * slack,
                     pset.epsilon / np.maximum(norms, 1e-300), 1.0)
    return (d * scale).astype(d.dtype)


def init_delta(pset: PerturbationSet, shape, rng) -> np.ndarray:
    """Random start inside the ball (uniform per coordinate for linf,
    uniform in the ball via radial u^(1/d) scaling for l2)."""
    dtype = ad.default_dtype()
    if pset.epsilon == 0.0:
        return np.zeros(shape, dtype=dtype)
    if pset.norm == "linf":
        return rng.uniform(-pset.epsilon, pset.epsilon, size=shape).astype(dtype)
    d = np.zeros(shape, dtype=np.float64)
    axes = _batch_axes(d)
    g = rng.normal(size=shape)
    norms = np.sqrt(np.sum(g ** 2, axis=axes, keepdims=True))
    n_per = int(np.prod([shape[a] for a in axes])) if axes else int(np.prod(shape))
    n_batch = 1 if len(axes) == len(shape) else shape[0]
    u = rng.uniform(size=(n_batch,) + (1,) * (len(shape) - 1)) \
        if len(axes) != len(shape) else rng.uniform()
    radius = pset.epsilon * u ** (1.0 / n_per)
    d = g / np.maximum(norms, 1e-300) * radius
    return d.astype(dtype)


# --- objectives -------------------------------------------------------------

def _order_stat_indices(z: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(z, axis=1)[:, -k]


def inner_objective_per_example(kind: str, adv_logits: ad.Tensor,
                                clean_logits, y, *, kl_swap: bool = False,
                                target: int = -1) -> ad.Tensor:
    """Per-example value of the inner maximization objective, to be ascended.

    `clean_logits` (a constant array) is required for `kl`; `target` for
    `targeted_margin`.
    """
    y = np.asarray(y, dtype=np.int64)
    B, C = adv_logits.shape
    if kind == "xent":
        return ad.neg(ad.gather_rows(ad.log_softmax(adv_logits), y))
    if kind == "kl":
        if clean_logits is None:
            raise ContractViolation("kl objective needs clean_logits")
        ref_arr = np.asarray(clean_logits.data if isinstance(clean_logits, ad.Tensor)
                             else clean_logits, dtype=adv_logits.data.dtype)
        ref = ad.log_softmax(ad.Tensor(ref_arr))
        lsm = ad.log_softmax(adv_logits)
        # row KL = sum_c exp(p_log) * (p_log - q_log); adversarial
        # distribution first unless kl_swap
        p_log, q_log = (ref, lsm) if kl_swap else (lsm, ref)
        probs = _softmax_tensor(p_log)
        return ad.sum_(ad.mul(probs, ad.add(p_log, ad.neg(q_log))), axis=1)
    if kind == "margin":
        mask = np.ones((B, C), dtype=bool)
        mask[np.arange(B), y] = False
        return ad.add(ad.masked_row_max(adv_logits, mask),
                      ad.neg(ad.gather_rows(adv_logits, y)))
    if kind == "dlr":
        if C < 3:
            raise ConfigurationError("dlr objective needs at least 3 classes")
        mask = np.ones((B, C), dtype=bool)
        mask[np.arange(B), y] = False
        num = ad.add(ad.gather_rows(adv_logits, y),
                     ad.neg(ad.masked_row_max(adv_logits, mask)))
        z1 = ad.gather_rows(adv_logits, _order_stat_indices(adv_logits.data, 1))
        z3 = ad.gather_rows(adv_logits, _order_stat_indices(adv_logits.data, 3))
        # tiny floor keeps an exact top-1/top-3 logit tie from dividing by 0
        denom = ad.add(ad.add(z1, ad.neg(z3)), 1e-12)
        return ad.neg(ad.div(num, denom))
    if kind == "targeted_margin":
        if target < 0 or target >= C:
            raise ConfigurationError(f"targeted_margin needs a class in [0,{C})")
        t = np.full(B, target, dtype=np.int64)
        return ad.add(ad.gather_rows(adv_logits, t),
                      ad.neg(ad.gather_rows(adv_logits, y)))
    raise ConfigurationError(f"unknown inner objective {kind!r}")


def _softmax_tensor(log_probs: ad.Tensor) -> ad.Tensor:
    """exp(log_probs) as a graph op."""
    out_data = np.exp(log_probs.data)

    def bwd(g):
        return (g * out_data,)

    return ad.Tensor(out_data, log_probs.requires_grad, (log_probs,), bwd, "exp")


def inner_objective(kind, adv_logits, clean_logits, y, **kw) -> ad.Tensor:
    """Batch-summed inner objective (scalar Tensor to ascend)."""
    return ad.sum_(inner_objective_per_example(
        kind, adv_logits, clean_logits, y, **kw))


def margin_values(logits: np.ndarray, y) -> np.ndarray:
    """max_{i != y} z_i - z_y per example; > 0 means misclassified."""
    z = np.asarray(logits)
    y = np.asarray(y, dtype=np.int64)
    B = z.shape[0]
    other = z.copy()
    other[np.arange(B), y] = -np.inf
    return other.max(axis=1) - z[np.arange(B), y]


# --- PGD --------------------------------------------------------------------

def _forward_for(model, x_t: ad.Tensor, mode: str) -> ad.Tensor:
    if callable(model):
        return model(x_t)
    if mode == "train":
        return models.attack_forward(model, x_t)
    return models.eval_forward(model, x_t)


def _step_sizes(spec: AttackSpec) -> np.ndarray:
    alphas = np.full(spec.steps, spec.step_size, dtype=np.float64)
    for frac in spec.halve_at:
        alphas[int(np.floor(frac * spec.steps)):] /= 2.0
    return alphas


def _exact_box(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Nudge delta so x + delta lands in [0,1] exactly.

    clip(x+d) - x can overshoot the box by an ulp when re-added; offending
    coordinates are stepped toward the interior, which can only shrink
    |delta|, so norm bounds are preserved.
    """
    delta = np.clip(x + delta, 0.0, 1.0) - x
    adv = x + delta
    over, under = adv > 1.0, adv < 0.0
    while over.any() or under.any():
        delta = np.where(over, np.nextafter(delta, -np.inf), delta)
        delta = np.where(under, np.nextafter(delta, np.inf), delta)
        adv = x + delta
        over, under = adv > 1.0, adv < 0.0
    return delta


def _batch_init(pset: PerturbationSet, shape, spec: AttackSpec, seed: int,
                example_keys, restart: int) -> np.ndarray:
    """Random start drawn per example, keyed by (attack, example, restart).

    Keying by example identity rather than batch position makes stacked
    evaluations invariant to attack order and batching.
    """
    delta = np.empty(shape, dtype=ad.default_dtype())
    for i, key in enumerate(example_keys):
        rng = derive(seed, "pgd", spec.name, "ex", int(key), "r", restart)
        delta[i] = init_delta(pset, (1,) + tuple(shape[1:]), rng)[0]
    return delta


def _run_pgd_once(model, x: np.ndarray, y: np.ndarray, clean_logits,
                  pset: PerturbationSet, spec: AttackSpec, delta,
                  mode: str) -> np.ndarray:
    delta = project(delta, pset)
    if spec.clip_to_unit_box:
        delta = np.clip(x + delta, 0.0, 1.0) - x
    if pset.epsilon == 0.0:
        return delta
    alphas = _step_sizes(spec)
    axes = _batch_axes(delta)
    for k in range(spec.steps):
        d_t = ad.tensor(delta, requires_grad=True)
        x_adv = ad.add(ad.tensor(x), d_t)
        logits = _forward_for(model, x_adv, mode)
        obj = inner_objective(spec.objective, logits, clean_logits, y,
                              target=spec.target)
        if not np.isfinite(obj.data):
            raise AttackDiverged(
                f"non-finite {spec.objective} objective at step {k}")
        obj.backward()
        g = d_t.grad
        if pset.norm == "linf":
            delta = delta + float(alphas[k]) * np.sign(g)
        else:
            norms = np.sqrt(np.sum(g.astype(np.float64) ** 2,
                                   axis=axes, keepdims=True))
            ok = norms > 0  # zero gradient: direction undefined, skip step
            delta = np.where(ok, delta + alphas[k] * g / np.maximum(norms, 1e-300),
                             delta).astype(delta.dtype)
        delta = project(delta, pset)
        if spec.clip_to_unit_box:
            delta = np.clip(x + delta, 0.0, 1.0) - x
    if spec.clip_to_unit_box:
        # box-exact first, then project: projection only shrinks coordinates,
        # which cannot push x + delta back out of [0,1]
        delta = project(_exact_box(x, delta), pset)
    return delta


def _final_scores(model, x, y, delta, clean_logits, spec, mode):
    logits = _forward_for(model, ad.tensor(x + delta), mode).data
    margins = margin_values(logits, y)
    obj = inner_objective_per_example(
        spec.objective, ad.Tensor(logits), clean_logits, y,
        target=spec.target).data
    return margins, obj


def _merge_best(best, cand):
    """Per-example winner: misclassification first, then larger margin among
    misclassifying candidates, then larger objective value."""
    b_delta, b_margin, b_obj = best
    c_delta, c_margin, c_obj = cand
    b_broken = b_margin > 0
    c_broken = c_margin > 0
    take = (c_broken & ~b_broken) \
        | (c_broken & b_broken & (c_margin > b_margin)) \
        | (~c_broken & ~b_broken & (c_obj > b_obj))
    shape = (-1,) + (1,) * (b_delta.ndim - 1)
    delta = np.where(take.reshape(shape), c_delta, b_delta)
    return (delta,
            np.where(take, c_margin, b_margin),
            np.where(take, c_obj, b_obj))


def pgd(model, x, y, clean_logits, pset: PerturbationSet, spec: AttackSpec,
        seed: int = 0, mode: str = "eval", example_keys=None) -> np.ndarray:
    """K-step projected gradient ascent; returns the perturbation array.

    linf takes sign steps, l2 normalized-gradient steps.  With several
    restarts the per-example winner is the misclassifying perturbation with
    the largest margin violation, falling back to the largest objective.
    `mode` picks the forward used for gradients: "train" honours the model's
    batch-norm attack mode, "eval" uses frozen statistics.  `example_keys`
    ties each example's random starts to a stable identity (defaults to the
    batch position).
    """
    x = np.asarray(x.data if isinstance(x, ad.Tensor) else x,
                   dtype=ad.default_dtype())
    y = np.asarray(y, dtype=np.int64)
    if spec.objective == "kl" and clean_logits is None:
        raise ContractViolation("kl objective requires clean_logits")
    if example_keys is None:
        example_keys = np.arange(x.shape[0])
    best = None
    for r in range(spec.restarts):
        delta0 = _batch_init(pset, x.shape, spec, seed, example_keys, r) \
            if spec.random_init else np.zeros_like(x)
        delta = _run_pgd_once(model, x, y, clean_logits, pset, spec, delta0,
                              mode)
        scores = _final_scores(model, x, y, delta, clean_logits, spec, mode)
        cand = (delta,) + scores
        best = cand if best is None else _merge_best(best, cand)
    return best[0]


def multitargeted(model, x, y, pset: PerturbationSet, steps: int = 200,
                  restarts: int = 10, step_size: float = None,
                  seed: int = 0, clip_to_unit_box: bool = True,
                  halve_at: tuple = (), mode: str = "eval",
                  example_keys=None) -> np.ndarray:
    """Targeted margin ascent toward every wrong class; best result wins.

    Cross-target winners are compared on the untargeted margin so values
    are commensurable.
    """
    x = np.asarray(x.data if isinstance(x, ad.Tensor) else x,
                   dtype=ad.default_dtype())
    y = np.asarray(y, dtype=np.int64)
    logits0 = _forward_for(model, ad.tensor(x), mode).data
    n_classes = logits0.shape[1]
    if n_classes < 2:
        raise ContractViolation("multitargeted needs at least 2 classes")
    alpha = DEFAULT_EVAL_ALPHA[pset.norm] if step_size is None else step_size
    if example_keys is None:
        example_keys = np.arange(x.shape[0])

    best = None
    for t in range(n_classes):
        spec = AttackSpec(steps=steps, step_size=alpha,
                          objective="targeted_margin", restarts=1,
                          clip_to_unit_box=clip_to_unit_box, target=t,
                          halve_at=tuple(halve_at), label=f"mt_t{t}")
        for r in range(restarts):
            delta0 = _batch_init(pset, x.shape, spec, seed, example_keys, r) \
                if spec.random_init else np.zeros_like(x)
            delta = _run_pgd_once(model, x, y, None, pset, spec, delta0, mode)
            adv = _forward_for(model, ad.tensor(x + delta), mode).data
            margins = margin_values(adv, y)
            # examples whose true label equals this target gain nothing
            skip = y == t
            margins = np.where(skip, -np.inf, margins)
            cand = (delta, margins, margins)
            best = cand if best is None else _merge_best(best, cand)
    return best[0]


# --- stacked evaluation -----------------------------------------------------

def _dataset_arrays(dataset):
    if isinstance(dataset, tuple):
        images, labels = dataset
        return np.asarray(images), np.asarray(labels, dtype=np.int64)
    images = np.stack([e.image for e in dataset])
    labels = np.asarray([e.label for e in dataset], dtype=np.int64)
    return images, labels


def _run_stack_attack(model, x, y, pset, spec, seed, example_keys):
    if spec.multi_targeted:
        return multitargeted(model, x, y, pset, steps=spec.steps,
                             restarts=spec.restarts,
                             step_size=spec.step_size, seed=seed,
                             clip_to_unit_box=spec.clip_to_unit_box,
                             halve_at=spec.halve_at,
                             example_keys=example_keys)
    clean = _forward_for(model, ad.tensor(x), "eval").data \
        if spec.objective == "kl" else None
    return pgd(model, x, y, clean, pset, spec, seed=seed,
               example_keys=example_keys)


def evaluate_stack(model, dataset, pset: PerturbationSet, stack,
                   seed: int = 0, batch_size: int = 256):
    """Run attacks in sequence; an example is robust iff none breaks it.

    Already-broken examples are skipped by later attacks.  Returns an
    EvalReport plus one table row per (example, attack) actually run.
    """
    from .evaluation import EvalReport

    if not stack:
        raise ContractViolation("attack stack must be non-empty")
    images, labels = _dataset_arrays(dataset)
    images = images.astype(ad.default_dtype())
    n = images.shape[0]

    clean_logits = models.eval_logits(model, images, batch_size)
    clean_correct = clean_logits.argmax(axis=1) == labels
    robust = clean_correct.copy()

    per_attack = []
    rows = []
    for spec in stack:
        active = np.flatnonzero(robust)
        breaks = 0
        for start in range(0, active.size, batch_size):
            idx = active[start:start + batch_size]
            x, yb = images[idx], labels[idx]
            # randomness is keyed by (attack, example), so the union of
            # broken examples is invariant to attack order and batching
            delta = _run_stack_attack(model, x, yb, pset, spec, seed=seed,
                                      example_keys=idx)
            adv_logits = _forward_for(model, ad.tensor(x + delta), "eval").data
            margins = margin_values(adv_logits, yb)
            broken = margins > 0
            robust[idx[broken]] = False
            breaks += int(broken.sum())
            norms = np.sqrt(np.sum(
                delta.reshape(delta.shape[0], -1).astype(np.float64) ** 2, axis=1)) \
                if pset.norm == "l2" else np.max(
                    np.abs(delta.reshape(delta.shape[0], -1)), axis=1)
            for j, ex in enumerate(idx):
                rows.append({"example": int(ex), "attack": spec.name,
                             "broken": bool(broken[j]),
                             "objective": float(margins[j]),
                             "delta_norm": float(norms[j])})
        per_attack.append((spec.name, breaks, float(robust.mean())))

    report = EvalReport(
        clean_accuracy=float(clean_correct.mean()),
        per_attack=per_attack,
        final_robust_accuracy=float(robust.mean()),
        dataset_size=n,
        threat={"norm": pset.norm, "epsilon": pset.epsilon},
    )
    return report, rows, robust


def derive_seed(seed: int, *tags) -> int:
    """Deterministic child seed for one unit of stack work."""
    rng = derive(seed, "stack", *tags)
    return int(rng.integers(0, 2 ** 31 - 1))


def write_attack_csv(rows, path):
    """Attack outcome table: example, attack, broken, objective, delta norm."""
    import csv

    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=[
            "example", "attack", "broken", "objective", "delta_norm"])
        w.writeheader()
        for row in rows:
            w.writerow(row)
