"""Deep-equilibrium query decoder with implicit-gradient training.

The package splits into: a small autodiff core (tensor), fixed-point
solvers (fixed_point), equilibrium gradient estimators (estimators),
box geometry (geometry), set-prediction losses and matching (losses),
the query decoder itself (decoder), synthetic scenes (synth), and the
training/evaluation loop (training) with a CLI front end (cli).
"""

from eqdec import tensor
from eqdec.tensor import Tape, Tensor

__all__ = ["Tape", "Tensor", "tensor"]
__version__ = "0.1.0"
