"""Fused structural prior from the interlaced sinograms of one slice window."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import GeometryError, SpiralSchedule, angles_are_distinct
from .physics import ImageGrid, Sinogram, ubp_reconstruct


@dataclass
class FusedSet:
    center: int
    slices: list[int]
    sinograms: list[Sinogram]

    def angles(self) -> np.ndarray:
        return np.concatenate([s.geometry.angles() for s in self.sinograms])


def fuse_window(sinos: Sequence[Sinogram], schedule: SpiralSchedule, m: int) -> FusedSet:
    """Collect the W rotated sinograms around slice ``m``.

    ``sinos`` is indexed by slice (entry m-1 belongs to slice m). The union of
    detector angles must be free of duplicates.
    """
    slices = schedule.window(m)
    if len(sinos) < schedule.num_slices:
        raise ValueError(f"expected {schedule.num_slices} sinograms, got {len(sinos)}")
    chosen = [sinos[k - 1] for k in slices]
    fused = FusedSet(m, slices, chosen)
    if not angles_are_distinct(fused.angles()):
        raise GeometryError(f"window around slice {m} has duplicate detector angles")
    return fused


def normalize_minmax(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if hi == lo:
        return np.zeros_like(image, dtype=float)
    return (image - lo) / (hi - lo)


@dataclass
class PriorImage:
    """Normalised prior plus the intensity range it was scaled from.

    ``scale`` (max - min of the raw UBP) converts measurements into the
    prior's units: training on ``y / scale`` and multiplying the result by
    ``scale`` keeps the embedded network and the data on the same footing.
    """

    image: np.ndarray
    lo: float
    hi: float
    center: int = 0

    @property
    def scale(self) -> float:
        span = self.hi - self.lo
        return span if span > 0 else 1.0


def build_prior(fused: FusedSet, grid: ImageGrid) -> PriorImage:
    raw = ubp_reconstruct(fused.sinograms, grid)
    return PriorImage(normalize_minmax(raw), float(raw.min()), float(raw.max()), fused.center)


def make_prior(fused: FusedSet, grid: ImageGrid) -> np.ndarray:
    """UBP over every fused channel, min-max normalised to [0, 1]."""
    return build_prior(fused, grid).image
