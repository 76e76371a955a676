"""Flat dotted-key experiment configuration.

Config files are plain text, one `key = value` per line, `#` comments.
Every key has a documented default matching the baseline training recipe;
command-line overrides use the same `key=value` form.  Unknown keys are
rejected by name.
"""

from dataclasses import dataclass

from . import attacks, data
from .attacks import AttackSpec, PerturbationSet
from .errors import ConfigurationError
from .models import ModelSpec
from .objectives import OuterObjectiveSpec
from .training import TrainConfig

# key -> (default, help)
DEFAULTS = {
    "model.depth": (28, "network depth, 6n+4"),
    "model.width": (10, "width multiplier"),
    "model.activation": ("relu", "relu|leaky_relu|elu|softplus|swish|gelu"),
    "model.classes": (10, "number of classes"),
    "model.input": ("3,32,32", "channels,height,width"),
    "model.batchnorm": ("float_stats", "batch-norm statistics inside attacks: "
                                       "float_stats|frozen_stats"),
    "data.dataset": ("cifar10", "dataset name: digits | typeset | an IDX "
                                "directory under data.dir"),
    "data.dir": ("data", "root directory for IDX datasets"),
    "data.n_train": (0, "cap on training examples, 0 = all"),
    "data.n_val": (1024, "validation examples held out of the train split"),
    "data.n_test": (0, "cap on test examples, 0 = all"),
    "data.batch_size": (128, "training batch size"),
    "data.ratio": ("10:0", "labeled-to-unlabeled per-batch ratio, e.g. 3:7"),
    "data.labeled_size": (0, "labeled subset size for semi-supervised runs; "
                             "0 = everything is labeled"),
    "data.pseudo_csv": ("", "pseudo-label index CSV over the unlabeled pool"),
    "data.augment": ("default", "none | default | color_jitter"),
    "data.jitter": (0.0, "color jitter strength"),
    "threat.norm": ("linf", "linf | l2"),
    "threat.epsilon": ("8/255", "perturbation radius (fractions allowed); "
                                "'auto' = 8/255 for 3-channel, 0.3 for "
                                "1-channel inputs"),
    "attack.steps": (10, "training attack steps"),
    "attack.step_size": ("2/255", "training attack step size; 'auto' = "
                                  "max(1.25 eps / steps, 0.007)"),
    "attack.restarts": (1, "training attack restarts"),
    "attack.random_init": (True, "random start inside the ball"),
    "attack.clip": (True, "clip adversarial images to [0,1]"),
    "loss.outer": ("at", "at | trades"),
    "loss.inner": ("xent", "xent | kl | margin"),
    "loss.beta": (6.0, "TRADES weight"),
    "loss.smoothing_labeled": (0.0, "label smoothing for labeled examples"),
    "loss.smoothing_unlabeled": (0.0, "label smoothing for pseudo examples"),
    "loss.epsilon_scale": (1.0, "training-radius multiplier"),
    "loss.kl_swap": (False, "swap KL arguments to KL(clean||adv)"),
    "schedule.kind": ("multistep", "multistep | cosine | exponential"),
    "schedule.lr": (0.1, "base learning rate before batch scaling"),
    "train.epochs": (200, "labeled-equivalent epochs"),
    "train.weight_decay": (5e-4, "coupled weight decay"),
    "train.momentum": (0.9, "Nesterov momentum"),
    "train.wa_tau": (0.0, "weight-averaging decay per 1024 examples; "
                          "0 disables"),
    "train.validate_every": (1, "validation cadence in epochs"),
    "train.dtype": ("f32", "f32 | f64"),
    "train.wall_time": (True, "record wall time in metrics"),
    "eval.steps": (40, "reference attack steps"),
    "eval.step_size": ("auto", "reference attack step size; 'auto' = "
                               "max(per-norm default, 1.25 eps / steps)"),
    "eval.objective": ("margin", "reference attack objective"),
    "eval.steps_scale": (1.0, "stacked-protocol step budget multiplier"),
    "eval.restarts_scale": (1.0, "stacked-protocol restart budget multiplier"),
    "eval.batch": (256, "evaluation batch size"),
    "seeds": ("0,1", "seed pair for dual runs"),
}


def parse_value(key: str, text):
    """Coerce `text` to the type of the key's default."""
    if key not in DEFAULTS:
        raise ConfigurationError(f"unknown config key {key!r}")
    default = DEFAULTS[key][0]
    if not isinstance(text, str):
        return text
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(text)
        except ValueError:
            raise ConfigurationError(
                f"{key}: expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return _number(text)
        except ValueError:
            raise ConfigurationError(
                f"{key}: expected a number, got {text!r}") from None
    return text


def _number(text: str) -> float:
    if "/" in text:
        num, den = text.split("/")
        return float(num) / float(den)
    return float(text)


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, value):
        self.values[key] = parse_value(key, value)

    def snapshot(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    # --- resolved pieces ---

    def input_shape(self):
        parts = [int(v) for v in str(self["model.input"]).split(",")]
        if len(parts) != 3:
            raise ConfigurationError("model.input must be C,H,W")
        return tuple(parts)

    def epsilon(self) -> float:
        text = str(self["threat.epsilon"])
        if text == "auto":
            return 0.3 if self.input_shape()[0] == 1 else 8.0 / 255.0
        return _number(text)

    def pset(self) -> PerturbationSet:
        return PerturbationSet(self["threat.norm"], self.epsilon())

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            depth=self["model.depth"],
            width_multiplier=self["model.width"],
            activation=self["model.activation"],
            num_classes=self["model.classes"],
            input_shape=self.input_shape(),
            batchnorm_mode=self["model.batchnorm"],
        )

    def train_attack(self) -> AttackSpec:
        step_size = self["attack.step_size"]
        if step_size == "auto":
            alpha = attacks.step_size_rule(
                self.epsilon() * self["loss.epsilon_scale"],
                self["attack.steps"])
        else:
            alpha = _number(str(step_size))
        return AttackSpec(
            steps=self["attack.steps"],
            step_size=alpha,
            objective=self["loss.inner"],
            restarts=self["attack.restarts"],
            random_init=self["attack.random_init"],
            clip_to_unit_box=self["attack.clip"],
        )

    def eval_attack(self) -> AttackSpec:
        step_size = self["eval.step_size"]
        if step_size == "auto":
            alpha = max(attacks.DEFAULT_EVAL_ALPHA[self["threat.norm"]],
                        1.25 * self.epsilon() / self["eval.steps"])
        else:
            alpha = _number(str(step_size))
        return AttackSpec(steps=self["eval.steps"], step_size=alpha,
                          objective=self["eval.objective"])

    def objective_spec(self) -> OuterObjectiveSpec:
        return OuterObjectiveSpec(
            outer=self["loss.outer"],
            inner=self["loss.inner"],
            beta=self["loss.beta"],
            smoothing_labeled=self["loss.smoothing_labeled"],
            smoothing_unlabeled=self["loss.smoothing_unlabeled"],
            train_epsilon_scale=self["loss.epsilon_scale"],
            kl_swap=self["loss.kl_swap"],
        )

    def seeds(self) -> tuple:
        return tuple(int(v) for v in str(self["seeds"]).split(","))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            model_spec=self.model_spec(),
            objective=self.objective_spec(),
            train_attack=self.train_attack(),
            pset=self.pset(),
            plan=data.BatchPlan(self["data.batch_size"],
                                data.parse_ratio(self["data.ratio"])),
            epochs=self["train.epochs"],
            schedule_kind=self["schedule.kind"],
            base_lr=self["schedule.lr"],
            weight_decay=self["train.weight_decay"],
            momentum=self["train.momentum"],
            wa_tau=self["train.wa_tau"],
            eval_attack=self.eval_attack(),
            validation_size=self["data.n_val"],
            validate_every=self["train.validate_every"],
            augment_kind=self["data.augment"],
            jitter_strength=self["data.jitter"],
            dtype=self["train.dtype"],
            record_wall_time=self["train.wall_time"],
            seeds=self.seeds(),
        )


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def default_config() -> ExperimentConfig:
    return ExperimentConfig({k: v for k, (v, _) in DEFAULTS.items()})


def parse_config_text(text: str, base: ExperimentConfig = None):
    cfg = base or default_config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = default_config()
    if path:
        with open(path) as f:
            cfg = parse_config_text(f.read(), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(
                f"override {item!r} must look like key=value")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg
