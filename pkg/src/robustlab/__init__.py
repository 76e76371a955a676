"""robustlab: a desk-scale adversarial training workbench.

Library layers, bottom up:

- `autodiff`   : dense tensors with reverse-mode differentiation
- `models`     : small wide residual classifiers with pluggable activations
- `attacks`    : norm-ball projections, PGD variants, robust-accuracy stacks
- `objectives` : AT / TRADES outer losses and label smoothing
- `data`       : datasets, augmentation, pseudo-labeling, batch composition
- `training`   : SGD loop with schedules, weight averaging, early stopping
- `evaluation` : stacked attack protocol and loss-landscape grids
- `cli`        : `robustlab` command with train/eval/sweep/landscape/pseudolabel
"""

from .errors import (
    AttackDiverged,
    ConfigurationError,
    ContractViolation,
    InternalError,
)

__version__ = "0.1.0"

__all__ = [
    "AttackDiverged",
    "ConfigurationError",
    "ContractViolation",
    "InternalError",
    "__version__",
]
