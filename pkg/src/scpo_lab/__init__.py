"""Curriculum preference optimization on tabular conditional policies."""

from .model import NULL_IMAGE, Context, PolicyTable, RewardTable
from .objectives import Hyperparams, LossBreakdown, PreferencePair

__all__ = [
    "NULL_IMAGE",
    "Context",
    "Hyperparams",
    "LossBreakdown",
    "PolicyTable",
    "PreferencePair",
    "RewardTable",
]
__version__ = "0.1.0"
