"""Desk-scale hypergraph multi-view consistency and multi-adapter distillation toolkit."""

from .errors import (
    DegenerateInput,
    DivergenceDetected,
    EmptyDataset,
    EmptyMask,
    HyperfuseError,
    IndivisibleShape,
    InvalidRange,
    ShapeMismatch,
    UnknownLayer,
    UnknownTrigger,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateInput",
    "DivergenceDetected",
    "EmptyDataset",
    "EmptyMask",
    "HyperfuseError",
    "IndivisibleShape",
    "InvalidRange",
    "ShapeMismatch",
    "UnknownLayer",
    "UnknownTrigger",
]
