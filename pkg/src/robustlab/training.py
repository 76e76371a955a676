"""Outer optimization loop.

SGD with Nesterov momentum and coupled weight decay (batch-norm parameters
exempt), learning-rate schedules with the batch-size scaling rule, model
weight averaging, and early stopping on validation robust accuracy.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import attacks, checkpoint, data, models, objectives
from .attacks import AttackSpec, PerturbationSet
from .errors import ConfigurationError, ContractViolation, TrainingDiverged
from .models import ModelSpec, ParameterSet
from .objectives import OuterObjectiveSpec

SCHEDULE_KINDS = ("multistep", "cosine", "exponential")


@dataclass(frozen=True)
class Schedule:
    kind: str
    total_steps: int
    batch_size: int
    base_lr: float = 0.1
    steps_per_epoch: int = 0  # needed by the per-5-epoch exponential decay

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"schedule kind must be one of "
                                     f"{SCHEDULE_KINDS}, got {self.kind!r}")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")

    @property
    def effective_base(self) -> float:
        return max(self.base_lr * self.batch_size / 256.0, self.base_lr)


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate at a step; the base is scaled by batch_size/256 (never
    below the configured value)."""
    if not 0 <= step <= schedule.total_steps:
        raise ContractViolation(
            f"step {step} outside [0, {schedule.total_steps}]")
    base = schedule.effective_base
    t = schedule.total_steps
    if schedule.kind == "multistep":
        # two 10x decays, half-way and three-quarters of the way through
        if step >= 0.75 * t:
            return base / 100.0
        if step >= 0.5 * t:
            return base / 10.0
        return base
    if schedule.kind == "cosine":
        return base * 0.5 * (1.0 + np.cos(np.pi * step / t))
    # exponential: stepwise decay every 5 epochs reaching base/100 at the end
    spe = schedule.steps_per_epoch
    if spe <= 0:
        return base * 10.0 ** (-2.0 * step / t)  # per-step fallback
    epochs_total = max(1, t // spe)
    last_block = (epochs_total - 1) // 5
    if last_block < 1:
        return base
    block = min(step // spe, epochs_total - 1) // 5
    return base * (10.0 ** (-2.0 / last_block)) ** block


@dataclass
class OptState:
    velocity: dict = field(default_factory=dict)  # name -> array


def sgd_nesterov_step(params: ParameterSet, grads: dict, lr: float,
                      momentum: float, weight_decay: float,
                      state: OptState) -> None:
    """In-place Nesterov update: v <- m v + (g + wd th);
    th <- th - lr (g + wd th + m v).  Decay skips batch-norm parameters."""
    for name, tensor in params.trainable_items():
        if name not in grads:
            raise ContractViolation(f"missing gradient for {name!r}")
        g = grads[name]
        if g.shape != tensor.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} != parameter shape {tensor.shape} "
                f"for {name!r}")
        if weight_decay != 0.0 and params.decayed[name]:
            g = g + weight_decay * tensor.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(tensor.data)
        v = momentum * v + g
        state.velocity[name] = v
        tensor.data -= lr * (g + momentum * v)


def wa_tau_eff(tau_base: float, batch_size: int) -> float:
    """Decay rate adjusted for batch size: tau ** (batch/1024)."""
    return tau_base ** (batch_size / 1024.0)


@dataclass
class WAState:
    tau_base: float
    shadow: ParameterSet

    @staticmethod
    def init(params: ParameterSet, tau_base: float) -> "WAState":
        if not 0.0 < tau_base < 1.0:
            raise ConfigurationError("wa tau must be in (0, 1)")
        return WAState(tau_base=tau_base, shadow=params.copy())


def wa_update(state: WAState, params: ParameterSet, batch_size: int) -> "WAState":
    """shadow <- tau_eff shadow + (1 - tau_eff) params, elementwise.

    Implemented as shadow -= (1 - tau_eff) (shadow - params) so a constant
    trajectory is a bitwise fixed point.
    """
    tau = wa_tau_eff(state.tau_base, batch_size)
    for name, tensor in params.entries.items():
        s = state.shadow.entries[name].data
        s -= (1.0 - tau) * (s - tensor.data)
    return state


@dataclass
class BestSnapshot:
    robust_accuracy: float = -1.0
    clean_accuracy: float = 0.0
    step: int = -1
    params: ParameterSet = None


def validate_and_track(candidate: ParameterSet, validation, eval_attack,
                       pset: PerturbationSet, best: BestSnapshot,
                       step: int, seed: int = 0):
    """PGD robust accuracy on the validation set; snapshot strict improvements.

    `candidate` is whatever will be evaluated at test time (the WA shadow
    when averaging is active).  Ties keep the earlier snapshot.
    """
    report, _, _ = attacks.evaluate_stack(
        candidate, validation, pset, [eval_attack],
        seed=attacks.derive_seed(seed, "val", step))
    acc = report.final_robust_accuracy
    is_best = acc > best.robust_accuracy
    if is_best:
        best.robust_accuracy = acc
        best.clean_accuracy = report.clean_accuracy
        best.step = step
        best.params = candidate.copy()
    return best, acc, report.clean_accuracy, is_best


@dataclass
class TrainConfig:
    model_spec: ModelSpec
    objective: OuterObjectiveSpec
    train_attack: AttackSpec
    pset: PerturbationSet
    plan: data.BatchPlan
    epochs: int
    schedule_kind: str = "multistep"
    base_lr: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    wa_tau: float = 0.0            # 0 disables weight averaging
    eval_attack: AttackSpec = None  # defaults to PGD-40 margin
    validation_size: int = 1024
    validate_every: int = 1        # labeled-equivalent epochs
    augment_kind: str = "default"  # none | default | color_jitter
    jitter_strength: float = 0.0
    dtype: str = "f32"
    record_wall_time: bool = True
    seeds: tuple = (0, 1)

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.augment_kind not in ("none", "default", "color_jitter"):
            raise ConfigurationError(
                f"augment must be none, default or color_jitter, "
                f"got {self.augment_kind!r}")
        if self.eval_attack is None:
            self.eval_attack = attacks.pgd40_margin(self.pset)


def _augmented(config: TrainConfig, images: np.ndarray, seed: int,
               step: int) -> np.ndarray:
    if config.augment_kind == "none":
        return images
    strength = config.jitter_strength if config.augment_kind == "color_jitter" \
        else None
    return data.augment_batch(images, seed, step, strength)


class _MetricsWriter:
    def __init__(self, path):
        self.path = path
        self._f = open(path, "a") if path else None

    def write(self, record: dict):
        if self._f:
            self._f.write(json.dumps(record) + "\n")
            self._f.flush()

    def close(self):
        if self._f:
            self._f.close()


def _save_train_state(path, params, opt: OptState, wa, step, epoch,
                      best: BestSnapshot, seed):
    arrays = {name: t.data for name, t in params.entries.items()}
    for name, v in opt.velocity.items():
        arrays[f"opt/{name}"] = v
    if wa is not None:
        for name, t in wa.shadow.entries.items():
            arrays[f"wa/{name}"] = t.data
    extra = {"train_state": {
        "step": step, "epoch": epoch, "run_seed": seed,
        "best_robust_accuracy": best.robust_accuracy,
        "best_clean_accuracy": best.clean_accuracy,
        "best_step": best.step,
    }}
    checkpoint.save(path, arrays, params.spec.to_dict(), params.seed, extra)


def _load_train_state(path, config: TrainConfig):
    arrays, manifest = checkpoint.load(path)
    spec = ModelSpec.from_dict(manifest["model_spec"])
    params = models.build(spec, seed=manifest["seed"])
    params.load_arrays({k: v for k, v in arrays.items() if "/" not in k})
    opt = OptState()
    for key, arr in arrays.items():
        if key.startswith("opt/"):
            opt.velocity[key[4:]] = arr.astype(params.entries[key[4:]].data.dtype)
    wa = None
    if config.wa_tau and any(k.startswith("wa/") for k in arrays):
        wa = WAState.init(params, config.wa_tau)
        wa.shadow.load_arrays(
            {k[3:]: v for k, v in arrays.items() if k.startswith("wa/")})
    state = manifest["extra"]["train_state"]
    return params, opt, wa, state


def train(config: TrainConfig, labeled, pseudo, validation, seed: int = 0,
          run_dir=None, resume: bool = False):
    """Full training loop; returns (best ParameterSet, metric history).

    Per step: compose batch -> augment -> inner maximization at the scaled
    radius -> outer loss -> backward -> Nesterov SGD -> WA update.
    Validates every `validate_every` labeled-equivalent epochs, tracking the
    snapshot with the highest validation robust accuracy (the WA shadow when
    averaging is on).  With `run_dir`, metrics stream to metrics.jsonl and
    last/best checkpoints are written; `resume=True` continues an
    interrupted run from the last epoch boundary.
    """
    dtype = np.float64 if config.dtype == "f64" else np.float32
    with ad.dtype_scope(dtype):
        return _train_inner(config, labeled, pseudo, validation, seed,
                            run_dir, resume)


def _train_inner(config, labeled, pseudo, validation, seed, run_dir, resume):
    eval_attack = config.eval_attack or attacks.pgd40_margin(config.pset)
    plan = data.BatchPlan(config.plan.batch_size, config.plan.labeled_fraction,
                          seed=derive_int(seed, "plan"))
    spe = data.steps_per_epoch(plan, len(labeled))
    total_steps = config.epochs * spe
    schedule = Schedule(config.schedule_kind, total_steps, plan.batch_size,
                        config.base_lr, steps_per_epoch=spe)

    start_epoch = 0
    best = BestSnapshot()
    history = []
    metrics_path = os.path.join(run_dir, "metrics.jsonl") if run_dir else None
    last_path = os.path.join(run_dir, "last.ckpt") if run_dir else None
    best_path = os.path.join(run_dir, "best.ckpt") if run_dir else None

    if resume and last_path and os.path.exists(last_path):
        params, opt, wa, state = _load_train_state(last_path, config)
        start_epoch = state["epoch"] + 1
        best.robust_accuracy = state["best_robust_accuracy"]
        best.clean_accuracy = state["best_clean_accuracy"]
        best.step = state["best_step"]
        if best_path and os.path.exists(best_path):
            best.params, _ = checkpoint.load_params(best_path)
    else:
        params = models.build(config.model_spec, seed=derive_int(seed, "init"))
        opt = OptState()
        wa = WAState.init(params, config.wa_tau) if config.wa_tau else None
        if metrics_path and os.path.exists(metrics_path) and not resume:
            raise ConfigurationError(
                f"{metrics_path} already exists; refusing to overwrite")

    writer = _MetricsWriter(metrics_path)
    t0 = time.monotonic()
    val_images = validation[0].astype(ad.default_dtype())
    val_set = (val_images, validation[1])

    try:
        global_step = start_epoch * spe
        for epoch in range(start_epoch, config.epochs):
            labeled_stream = data.ExampleStream(
                labeled, derive_int(seed, "lab", epoch), tag="lab")
            pseudo_stream = data.ExampleStream(
                pseudo, derive_int(seed, "pse", epoch), tag="pse") \
                if pseudo else None
            epoch_loss = 0.0
            for _ in range(spe):
                batch = data.compose_batch(labeled_stream, pseudo_stream,
                                           plan, step=global_step)
                images = _augmented(config, batch.images,
                                    derive_int(seed, "aug"), global_step)
                images = images.astype(ad.default_dtype())
                bt = data.Batch(images, batch.labels, batch.is_pseudo)

                loss = objectives.outer_loss(
                    config.objective, params, bt, config.pset,
                    config.train_attack,
                    seed=derive_int(seed, "attack", global_step))
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(
                        f"non-finite loss at step {global_step}")
                params.zero_grads()
                loss.backward()
                grads = {name: t.grad for name, t in params.trainable_items()}
                lr = lr_at(schedule, global_step)
                sgd_nesterov_step(params, grads, lr, config.momentum,
                                  config.weight_decay, opt)
                if wa is not None:
                    wa_update(wa, params, plan.batch_size)
                epoch_loss += loss.item()
                global_step += 1

            if (epoch + 1) % config.validate_every == 0 \
                    or epoch == config.epochs - 1:
                candidate = wa.shadow if wa is not None else params
                best, racc, cacc, is_best = validate_and_track(
                    candidate, val_set, eval_attack, config.pset, best,
                    global_step, seed=derive_int(seed, "valseed"))
                record = {
                    "step": global_step,
                    "epoch": epoch + 1,
                    "lr": lr_at(schedule, global_step - 1),
                    "train_loss": epoch_loss / spe,
                    "clean_val_acc": cacc,
                    "robust_val_acc": racc,
                    "is_best": is_best,
                    "wall_time_s": round(time.monotonic() - t0, 3)
                    if config.record_wall_time else 0.0,
                }
                history.append(record)
                writer.write(record)
                if run_dir:
                    _save_train_state(last_path, params, opt, wa, global_step,
                                      epoch, best, seed)
                    if is_best:
                        checkpoint.save_params(
                            best_path, best.params,
                            extra={"robust_val_acc": racc,
                                   "clean_val_acc": cacc,
                                   "step": global_step})
    finally:
        writer.close()

    if best.params is None:  # no validation ran (validate_every > epochs)
        best.params = (wa.shadow if wa is not None else params).copy()
    return best.params, history


def train_dual(config: TrainConfig, labeled, pseudo, validation,
               run_dir=None, resume: bool = False):
    """Train one model per seed in config.seeds and keep the one with the
    higher validation robust accuracy."""
    results = []
    for i, seed in enumerate(config.seeds):
        sub = os.path.join(run_dir, f"seed{i}") if run_dir else None
        if sub:
            os.makedirs(sub, exist_ok=True)
        params, history = train(config, labeled, pseudo, validation,
                                seed=seed, run_dir=sub, resume=resume)
        best_acc = max((h["robust_val_acc"] for h in history), default=-1.0)
        results.append({"seed": seed, "seed_index": i, "params": params,
                        "history": history, "robust_val_acc": best_acc})
    winner = max(results, key=lambda r: r["robust_val_acc"])
    return winner, results


def derive_int(seed: int, *tags) -> int:
    from .seeding import derive

    return int(derive(seed, *tags).integers(0, 2 ** 31 - 1))
