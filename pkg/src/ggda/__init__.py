"""Group data attribution: score groups of training points by their effect on a model property."""

from ggda.attributors import AttributionScores, PropertyFn, influence, loo_oracle, tracin, trak
from ggda.datahub import CorruptionRecord, Dataset, ScoreFile
from ggda.grouping import Partition, make_partition
from ggda.hessians import HessianStrategy
from ggda.models import Architecture, ModelState, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "AttributionScores",
    "CorruptionRecord",
    "Dataset",
    "HessianStrategy",
    "ModelState",
    "Partition",
    "PropertyFn",
    "ScoreFile",
    "TrainConfig",
    "influence",
    "loo_oracle",
    "make_partition",
    "tracin",
    "trak",
    "train",
]
