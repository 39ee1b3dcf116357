"""Normalizing flows on products of SO(3) with exact log-densities."""

from ._huproso3 import (
    FlowModel,
    FormatError,
    Skeleton,
    generate_dataset,
    geodesic_distance,
    haar_sample,
    mgeo,
    read_dataset,
)

__all__ = [
    "FlowModel",
    "FormatError",
    "Skeleton",
    "generate_dataset",
    "geodesic_distance",
    "haar_sample",
    "mgeo",
    "read_dataset",
]
