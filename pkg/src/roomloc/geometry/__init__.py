"""Geometry module: layout features, relative-feature graph network, scoring and training."""

from .features import geometric_feature
from .loss import MARGIN, pair_loss, room_matching_loss
from .network import (
    GeometryConfig,
    GeometryNetParams,
    backward,
    cosine,
    forward,
    gat_forward,
    geometry_scores,
    relative_features,
    room_geom_embedding,
    scores_from_embedding,
)
from .train import Adam, TrainConfig, TrainResult, index_rooms, merge_view, train_geometry

__all__ = [
    "MARGIN",
    "Adam",
    "GeometryConfig",
    "GeometryNetParams",
    "TrainConfig",
    "TrainResult",
    "backward",
    "cosine",
    "forward",
    "gat_forward",
    "geometric_feature",
    "geometry_scores",
    "index_rooms",
    "merge_view",
    "pair_loss",
    "relative_features",
    "room_geom_embedding",
    "room_matching_loss",
    "scores_from_embedding",
    "train_geometry",
]
