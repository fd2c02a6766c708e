"""Sparse scene-flow estimation from RGB images and point clouds."""

from .errors import (
    CheckpointError,
    ContractError,
    DegenerateBatchError,
    EmptySceneError,
    NoCorrespondenceError,
    NonFiniteError,
    SceneFormatError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ContractError",
    "DegenerateBatchError",
    "EmptySceneError",
    "NoCorrespondenceError",
    "NonFiniteError",
    "SceneFormatError",
    "ShapeError",
]
