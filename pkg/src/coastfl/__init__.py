"""Federated-learning simulator with validation-free contribution assessment."""

from coastfl.coast import PruneConfig, ScoreBoard, ValuationConfig, assess, prune
from coastfl.evalreport import rank, spearman
from coastfl.params import LayeredParams

__version__ = "0.1.0"

__all__ = [
    "LayeredParams",
    "PruneConfig",
    "ScoreBoard",
    "ValuationConfig",
    "assess",
    "prune",
    "rank",
    "spearman",
]
