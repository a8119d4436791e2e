"""Ring-array detector geometry and the spiral (rotate + translate) schedule.

Angles are kept in degrees everywhere outside the numeric kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ANGLE_TOL_DEG = 1e-9


class GeometryError(ValueError):
    """Invalid ring geometry or detector layout."""


class ScheduleError(ValueError):
    """Invalid schedule parameters or schedule lookup."""


def angular_pitch(arc_coverage: float, num_elements: int) -> float:
    """Angle between two adjacent elements, ``arc / Nd`` in degrees."""
    if num_elements < 1:
        raise GeometryError(f"num_elements must be >= 1, got {num_elements}")
    if not 0 < arc_coverage <= 360:
        raise GeometryError(f"arc_coverage must be in (0, 360], got {arc_coverage}")
    return float(arc_coverage) / num_elements


def rotation_step(pitch: float, num_wavelengths: int) -> float:
    """Rotation applied at every wavelength switch so W shots fill one pitch."""
    if num_wavelengths < 1:
        raise ScheduleError(f"num_wavelengths must be >= 1, got {num_wavelengths}")
    return float(pitch) / num_wavelengths


@dataclass(frozen=True)
class RingGeometry:
    """Detector ring of ``num_elements`` elements spread evenly over an arc.

    Element i sits at ``arc_center - arc/2 + (i + 1/2) * pitch`` degrees,
    plus ``rotation_offset``.
    """

    ring_radius: float = 40.5
    arc_coverage: float = 270.0
    num_elements: int = 128
    rotation_offset: float = 0.0
    arc_center: float = 270.0

    def __post_init__(self):
        if self.ring_radius <= 0:
            raise GeometryError(f"ring_radius must be > 0, got {self.ring_radius}")
        angular_pitch(self.arc_coverage, self.num_elements)

    @property
    def pitch(self) -> float:
        return angular_pitch(self.arc_coverage, self.num_elements)

    @property
    def base_angles(self) -> np.ndarray:
        start = self.arc_center - self.arc_coverage / 2.0
        return start + (np.arange(self.num_elements) + 0.5) * self.pitch

    def angles(self) -> np.ndarray:
        """Effective element angles (degrees, reduced mod 360)."""
        return effective_angles(self, self.rotation_offset)

    def rotated(self, theta: float) -> "RingGeometry":
        return RingGeometry(
            self.ring_radius, self.arc_coverage, self.num_elements, theta, self.arc_center
        )

    def positions(self) -> np.ndarray:
        """Element positions in mm, shape (Nd, 2) as (x, y)."""
        a = np.deg2rad(self.angles())
        return self.ring_radius * np.stack([np.cos(a), np.sin(a)], axis=1)


def effective_angles(geometry: RingGeometry, theta: float) -> np.ndarray:
    return np.mod(geometry.base_angles + theta, 360.0)


def distinct_angles(angles: Sequence[float], tol: float = ANGLE_TOL_DEG) -> np.ndarray:
    """Sorted angles with modular near-duplicates (within ``tol``) merged."""
    a = np.sort(np.mod(np.asarray(angles, dtype=float), 360.0))
    if a.size == 0:
        return a
    keep = np.concatenate([[True], np.diff(a) > tol])
    a = a[keep]
    if a.size > 1 and (a[0] + 360.0 - a[-1]) <= tol:
        a = a[:-1]
    return a


def angles_are_distinct(angles: Sequence[float], tol: float = ANGLE_TOL_DEG) -> bool:
    return len(distinct_angles(angles, tol)) == len(angles)


@dataclass(frozen=True)
class ScheduleRecord:
    slice_index: int  # m, 1-based
    z_mm: float
    wavelength_index: int  # omega, 1-based
    wavelength_nm: float
    theta_deg: float


@dataclass(frozen=True)
class SpiralSchedule:
    num_slices: int
    wavelengths: tuple[float, ...]
    slice_spacing: float
    rotation_step: float
    z_start: float = 0.0
    records: tuple[ScheduleRecord, ...] = field(default=())

    @property
    def num_wavelengths(self) -> int:
        return len(self.wavelengths)

    def record(self, m: int) -> ScheduleRecord:
        if not 1 <= m <= self.num_slices:
            raise ScheduleError(f"slice index {m} outside 1..{self.num_slices}")
        return self.records[m - 1]

    def window(self, m: int) -> list[int]:
        """Slice indices of the W-slice window centred on ``m``."""
        W = self.num_wavelengths
        if W % 2 == 0:
            raise ScheduleError(f"window needs an odd number of wavelengths, got W={W}")
        h = W // 2
        if m - h < 1 or m + h > self.num_slices:
            raise ScheduleError(
                f"slice {m} has an incomplete window (needs {m - h}..{m + h} in 1..{self.num_slices})"
            )
        return list(range(m - h, m + h + 1))

    def interior_slices(self) -> list[int]:
        h = self.num_wavelengths // 2
        return list(range(1 + h, self.num_slices - h + 1))

    def to_text(self) -> str:
        lines = [
            "# U3S spiral schedule",
            f"# M={self.num_slices} W={self.num_wavelengths} dz_mm={self.slice_spacing!r} "
            f"dtheta_deg={self.rotation_step!r}",
            "# columns: m z_mm wavelength_nm theta_deg",
        ]
        for r in self.records:
            lines.append(f"{r.slice_index:d} {r.z_mm:.6f} {r.wavelength_nm:.3f} {r.theta_deg:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "SpiralSchedule":
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if not rows:
            raise ScheduleError("schedule table has no records")
        m = [int(r[0]) for r in rows]
        z = [float(r[1]) for r in rows]
        lam = [float(r[2]) for r in rows]
        th = [float(r[3]) for r in rows]
        wavelengths: list[float] = []
        for v in lam:
            if v in wavelengths:
                break
            wavelengths.append(v)
        dz = z[1] - z[0] if len(z) > 1 else 0.0
        dtheta = th[0] / m[0]
        for ln in text.splitlines():
            if ln.startswith("#") and "dtheta_deg=" in ln:
                dtheta = float(ln.split("dtheta_deg=")[1].split()[0])
            if ln.startswith("#") and "dz_mm=" in ln:
                dz = float(ln.split("dz_mm=")[1].split()[0])
        return build_spiral_schedule(len(rows), z[0], dz, wavelengths, dtheta)

    @classmethod
    def load(cls, path: str | Path) -> "SpiralSchedule":
        return cls.from_text(Path(path).read_text())


def wavelength_index(m: int, W: int) -> int:
    """1-based wavelength index used at 1-based slice ``m``."""
    return (m - 1) % W + 1


def build_spiral_schedule(
    num_slices: int,
    z_start: float,
    slice_spacing: float,
    wavelengths: Sequence[float],
    dtheta: float,
) -> SpiralSchedule:
    if num_slices < 1:
        raise ScheduleError(f"num_slices must be >= 1, got {num_slices}")
    wavelengths = tuple(float(w) for w in wavelengths)
    if not wavelengths:
        raise ScheduleError("wavelength list is empty")
    W = len(wavelengths)
    records = []
    for m in range(1, num_slices + 1):
        w = wavelength_index(m, W)
        records.append(
            ScheduleRecord(
                slice_index=m,
                z_mm=z_start + (m - 1) * slice_spacing,
                wavelength_index=w,
                wavelength_nm=wavelengths[w - 1],
                theta_deg=m * dtheta,
            )
        )
    return SpiralSchedule(
        num_slices=num_slices,
        wavelengths=wavelengths,
        slice_spacing=float(slice_spacing),
        rotation_step=float(dtheta),
        z_start=float(z_start),
        records=tuple(records),
    )


@dataclass(frozen=True)
class SamplingRate:
    rate: float
    element_ratio: float  # r


def sampling_rate(nd_sparse: int, nd_dense: int, num_wavelengths: int) -> SamplingRate:
    """Fraction of dense-acquisition data kept by the spiral scheme, ``r / W``."""
    for name, v in (("nd_sparse", nd_sparse), ("nd_dense", nd_dense), ("W", num_wavelengths)):
        if v < 1:
            raise ScheduleError(f"{name} must be >= 1, got {v}")
    r = nd_sparse / nd_dense
    return SamplingRate(rate=r / num_wavelengths, element_ratio=r)
