"""Residual convolutional classifiers with pluggable activations.

The family is parametrized by depth (6n+4) and a width multiplier, built
from pre-activation residual blocks with batch normalization.  Parameters
live in a ParameterSet: an insertion-ordered name->Tensor map that also
tracks which entries are trainable and which participate in weight decay.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractViolation
from .seeding import derive

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    depth: int
    width_multiplier: int
    activation: str = "relu"
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)
    batchnorm_mode: str = "float_stats"  # statistics source inside attacks

    def __post_init__(self):
        if (self.depth - 4) % 6 != 0 or self.depth < 10:
            raise ConfigurationError(
                f"depth must be 6n+4 with n >= 1, got {self.depth}")
        if self.width_multiplier < 1:
            raise ConfigurationError("width_multiplier must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.batchnorm_mode not in ("float_stats", "frozen_stats"):
            raise ConfigurationError(
                f"batchnorm_mode must be float_stats or frozen_stats, "
                f"got {self.batchnorm_mode!r}")

    @property
    def blocks_per_group(self) -> int:
        return (self.depth - 4) // 6

    @property
    def group_widths(self) -> tuple:
        k = self.width_multiplier
        return (16 * k, 32 * k, 64 * k)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "width_multiplier": self.width_multiplier,
            "activation": self.activation,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "batchnorm_mode": self.batchnorm_mode,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            depth=int(d["depth"]),
            width_multiplier=int(d["width_multiplier"]),
            activation=d["activation"],
            num_classes=int(d["num_classes"]),
            input_shape=tuple(int(v) for v in d["input_shape"]),
            batchnorm_mode=d.get("batchnorm_mode", "float_stats"),
        )


@dataclass
class ParameterSet:
    """Ordered named tensors plus trainability/decay flags."""

    spec: ModelSpec
    seed: int
    entries: dict = field(default_factory=dict)       # name -> Tensor
    trainable: dict = field(default_factory=dict)     # name -> bool
    decayed: dict = field(default_factory=dict)       # name -> bool
    _frozen_view: "ParameterSet" = field(default=None, repr=False)

    def add(self, name, data, trainable=True, decayed=True):
        if name in self.entries:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        self.entries[name] = ad.Tensor(
            np.asarray(data, dtype=ad.default_dtype()), requires_grad=trainable)
        self.trainable[name] = trainable
        self.decayed[name] = trainable and decayed

    def names(self):
        return list(self.entries)

    def __getitem__(self, name) -> ad.Tensor:
        return self.entries[name]

    def trainable_items(self):
        return [(n, t) for n, t in self.entries.items() if self.trainable[n]]

    def n_parameters(self, trainable_only=True) -> int:
        return sum(t.size for n, t in self.entries.items()
                   if self.trainable[n] or not trainable_only)

    def zero_grads(self):
        for _, t in self.trainable_items():
            t.zero_grad()

    def copy(self) -> "ParameterSet":
        out = ParameterSet(self.spec, self.seed)
        for name, t in self.entries.items():
            out.add(name, t.data.copy(),
                    trainable=self.trainable[name], decayed=self.decayed[name])
        return out

    def frozen(self) -> "ParameterSet":
        """View with requires_grad off everywhere, sharing storage.

        Used for attack-time forwards so gradients stop at the inputs and
        never accumulate on the weights.  Valid as long as parameter arrays
        are updated in place (the optimizer contract).
        """
        if self._frozen_view is None:
            view = ParameterSet(self.spec, self.seed)
            for name, t in self.entries.items():
                view.entries[name] = ad.Tensor(t.data, requires_grad=False)
                view.trainable[name] = False
                view.decayed[name] = False
            self._frozen_view = view
        return self._frozen_view

    def load_arrays(self, arrays: dict):
        """Overwrite entry data from {name: array}, checking shapes."""
        missing = [n for n in self.entries if n not in arrays]
        extra = [n for n in arrays if n not in self.entries]
        if missing or extra:
            raise ContractViolation(
                f"parameter names mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, t in self.entries.items():
            a = np.asarray(arrays[name])
            if tuple(a.shape) != tuple(t.shape):
                raise ContractViolation(
                    f"shape mismatch for {name!r}: checkpoint {a.shape}, "
                    f"model {tuple(t.shape)}")
            t.data = a.astype(t.data.dtype)
        self._frozen_view = None


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build(spec: ModelSpec, seed: int = 0) -> ParameterSet:
    """He-initialized parameters for `spec`, deterministic given `seed`."""
    rng = derive(seed, "init")
    ps = ParameterSet(spec, seed)
    in_ch = spec.input_shape[0]

    def add_conv(name, cin, cout, k):
        ps.add(f"{name}.w", _he_normal(rng, (cout, cin, k, k), cin * k * k))

    def add_bn(name, c):
        ps.add(f"{name}.gamma", np.ones(c), decayed=False)
        ps.add(f"{name}.beta", np.zeros(c), decayed=False)
        ps.add(f"{name}.rmean", np.zeros(c), trainable=False)
        ps.add(f"{name}.rvar", np.ones(c), trainable=False)

    add_conv("init_conv", in_ch, 16, 3)
    cin = 16
    for g, width in enumerate(spec.group_widths):
        for b in range(spec.blocks_per_group):
            prefix = f"g{g}.b{b}"
            stride = (2 if g > 0 else 1) if b == 0 else 1
            add_bn(f"{prefix}.bn1", cin)
            add_conv(f"{prefix}.conv1", cin, width, 3)
            add_bn(f"{prefix}.bn2", width)
            add_conv(f"{prefix}.conv2", width, width, 3)
            if stride != 1 or cin != width:
                add_conv(f"{prefix}.shortcut", cin, width, 1)
            cin = width
    add_bn("final_bn", cin)
    ps.add("fc.w", _he_normal(rng, (cin, spec.num_classes), cin))
    ps.add("fc.b", np.zeros(spec.num_classes), decayed=False)
    return ps


def _bn(ps, name, x, training, update_stats):
    return ad.batch_norm(
        x, ps[f"{name}.gamma"], ps[f"{name}.beta"],
        ps[f"{name}.rmean"], ps[f"{name}.rvar"],
        training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
        update_stats=update_stats)


def forward(params: ParameterSet, images, mode: str = "train",
            update_stats=None) -> ad.Tensor:
    """Logits for a batch of images in [0, 1], NCHW.

    `mode="train"` normalizes with current-batch statistics (and by default
    updates the running buffers); `mode="eval"` is a pure function of
    (params, images).
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be train or eval, got {mode!r}")
    spec = params.spec
    x = ad.as_tensor(images)
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ContractViolation(
            f"input shape {tuple(x.shape[1:])} != model input {spec.input_shape}")
    training = mode == "train"
    if update_stats is None:
        update_stats = training
    act = lambda t: ad.activation(spec.activation, t)

    h = ad.conv2d(x, params["init_conv.w"], stride=1, padding=1)
    cin = 16
    for g, width in enumerate(spec.group_widths):
        for b in range(spec.blocks_per_group):
            prefix = f"g{g}.b{b}"
            stride = (2 if g > 0 else 1) if b == 0 else 1
            pre = act(_bn(params, f"{prefix}.bn1", h, training, update_stats))
            out = ad.conv2d(pre, params[f"{prefix}.conv1.w"],
                            stride=stride, padding=1)
            out = act(_bn(params, f"{prefix}.bn2", out, training, update_stats))
            out = ad.conv2d(out, params[f"{prefix}.conv2.w"], stride=1, padding=1)
            if f"{prefix}.shortcut.w" in params.entries:
                short = ad.conv2d(pre, params[f"{prefix}.shortcut.w"],
                                  stride=stride, padding=0)
            else:
                short = h
            h = ad.add(out, short)
            cin = width
    h = act(_bn(params, "final_bn", h, training, update_stats))
    h = ad.mean_pool(h, h.shape[2])
    h = ad.flatten(h)
    return ad.add(ad.matmul(h, params["fc.w"]), params["fc.b"])


def attack_forward(model, x) -> ad.Tensor:
    """Forward used inside inner maximization.

    Accepts either a ParameterSet (batch-norm statistics float or stay
    frozen per its spec, running buffers untouched) or a plain callable
    mapping a Tensor to logits (toy models in tests).
    """
    if callable(model):
        return model(x)
    frozen = model.frozen()
    if model.spec.batchnorm_mode == "float_stats":
        return forward(frozen, x, mode="train", update_stats=False)
    return forward(frozen, x, mode="eval")


def eval_forward(model, x) -> ad.Tensor:
    if callable(model):
        return model(x)
    return forward(model.frozen(), x, mode="eval")


def eval_logits(model, images, batch_size: int = 512) -> np.ndarray:
    """Eval-mode logits as a plain array, computed in batches."""
    xs = np.asarray(images.data if isinstance(images, ad.Tensor) else images)
    outs = []
    for i in range(0, xs.shape[0], batch_size):
        outs.append(eval_forward(model, ad.tensor(xs[i:i + batch_size])).data)
    return np.concatenate(outs, axis=0)
