"""Query-by-bagging active learning for mobility-map classifiers."""

from qbag.domain import (
    ClassLabel,
    FeatureVector,
    LabeledInstance,
    Pool,
    Provenance,
    VoteTally,
    build_grid_pool,
    denormalize_features,
    normalize_features,
    tally_votes,
)
from qbag.ensemble import Committee, train_committee
from qbag.mlp import MlpModel, TrainConfig, predict, predict_proba, train

__version__ = "0.1.0"

__all__ = [
    "ClassLabel",
    "Committee",
    "FeatureVector",
    "LabeledInstance",
    "MlpModel",
    "Pool",
    "Provenance",
    "TrainConfig",
    "VoteTally",
    "build_grid_pool",
    "denormalize_features",
    "normalize_features",
    "predict",
    "predict_proba",
    "tally_votes",
    "train",
    "train_committee",
]
