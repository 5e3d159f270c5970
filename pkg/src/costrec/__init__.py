"""Cost-sensitive factorization machine training against mainstream bias."""

from costrec.corpus import InteractionLog, SplitConfig, SplitDataset
from costrec.model import FMParams, TrainConfig
from costrec.mainstream import MainstreamScores
from costrec.weighting import CostFunction

__version__ = "0.1.0"

__all__ = [
    "InteractionLog",
    "SplitConfig",
    "SplitDataset",
    "FMParams",
    "TrainConfig",
    "MainstreamScores",
    "CostFunction",
]
