"""Discrete circular-integral forward operator, its adjoint and UBP.

A detector sample at time t is the line integral of the image over the arc
``|p - q_d| = c t`` clipped to the field of view. The arc is sampled every
half pixel and the image is read with bilinear interpolation, so the whole
operator is a sparse matrix and the adjoint is its exact transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.signal import hilbert

from .geometry import GeometryError, RingGeometry

MM_PER_M = 1e3


class CoverageError(ValueError):
    """The time grid does not cover every pixel-detector distance."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ImageGrid:
    """Square pixel grid centred on the ring centre."""

    side: int = 220
    fov: float = 25.4  # mm

    def __post_init__(self):
        if self.side < 1:
            raise GeometryError(f"side must be >= 1, got {self.side}")
        if self.fov <= 0:
            raise GeometryError(f"fov must be > 0, got {self.fov}")

    @property
    def pixel_size(self) -> float:
        return self.fov / self.side

    @property
    def num_pixels(self) -> int:
        return self.side * self.side

    @property
    def shape(self) -> tuple[int, int]:
        return (self.side, self.side)

    def axis(self) -> np.ndarray:
        """Pixel-centre coordinates along one axis (mm)."""
        return -self.fov / 2 + (np.arange(self.side) + 0.5) * self.pixel_size

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) in mm; rows index y, columns index x."""
        a = self.axis()
        X, Y = np.meshgrid(a, a)
        return X, Y

    def normalized_coords(self) -> np.ndarray:
        """Pixel centres mapped to [0, 1)^2, shape (N, 2) as (x, y)."""
        u = (np.arange(self.side) + 0.5) / self.side
        U, V = np.meshgrid(u, u)
        return np.stack([U.ravel(), V.ravel()], axis=1)

    @property
    def half_diagonal(self) -> float:
        return self.fov * math.sqrt(2) / 2


@dataclass(frozen=True)
class TimeGrid:
    t0: float  # s
    dt: float  # s
    nt: int
    c: float = 1536.0  # m/s

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt)

    def radii_mm(self) -> np.ndarray:
        return self.times() * self.c * MM_PER_M

    def same_as(self, other: "TimeGrid") -> bool:
        return (
            self.nt == other.nt
            and math.isclose(self.t0, other.t0, rel_tol=1e-12, abs_tol=1e-18)
            and math.isclose(self.dt, other.dt, rel_tol=1e-12)
            and math.isclose(self.c, other.c, rel_tol=1e-12)
        )


def make_time_grid(
    geometry: RingGeometry, grid: ImageGrid, c: float = 1536.0, fs: float = 40e6
) -> TimeGrid:
    """Shortest time grid whose arcs reach every pixel from every element."""
    if fs <= 0:
        raise ValueError(f"fs must be > 0, got {fs}")
    if c <= 0:
        raise ValueError(f"speed of sound must be > 0, got {c}")
    if grid.fov >= 2 * geometry.ring_radius:
        raise GeometryError(
            f"fov {grid.fov} mm does not fit inside ring of radius {geometry.ring_radius} mm"
        )
    R = geometry.ring_radius
    rho = grid.half_diagonal
    dt = 1.0 / fs
    t_near = (R - rho) / (c * MM_PER_M)
    t_far = (R + rho) / (c * MM_PER_M)
    t0 = math.floor(t_near * fs) * dt
    nt = math.ceil((t_far - t0) * fs - 1e-9) + 1
    return TimeGrid(t0=t0, dt=dt, nt=nt, c=c)


def check_coverage(geometry: RingGeometry, grid: ImageGrid, time: TimeGrid) -> None:
    R = geometry.ring_radius
    rho = grid.half_diagonal
    r = time.radii_mm()
    tol = 1e-9
    if r[0] > R - rho + tol or r[-1] < R + rho - tol:
        raise CoverageError(
            f"time grid spans {r[0]:.4f}..{r[-1]:.4f} mm but pixels lie at "
            f"{R - rho:.4f}..{R + rho:.4f} mm from the detectors"
        )


@dataclass
class Sinogram:
    """Time series for every element of one (possibly rotated) ring."""

    geometry: RingGeometry
    time: TimeGrid
    samples: np.ndarray  # (Nd, Nt)
    wavelength_nm: float = 0.0
    slice_index: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        expected = (self.geometry.num_elements, self.time.nt)
        if self.samples.shape != expected:
            raise DimensionError(f"samples shape {self.samples.shape} != {expected}")

    @property
    def theta(self) -> float:
        return self.geometry.rotation_offset

    def with_samples(self, samples: np.ndarray) -> "Sinogram":
        return Sinogram(self.geometry, self.time, samples, self.wavelength_nm, self.slice_index)


def _bilinear(u: np.ndarray, v: np.ndarray, side: int):
    """Scatter weights of fractional (col, row) positions onto pixel indices."""
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = u - j0
    fv = v - i0
    idx = []
    wts = []
    sel = []
    for di, dj, w in (
        (0, 0, (1 - fv) * (1 - fu)),
        (0, 1, (1 - fv) * fu),
        (1, 0, fv * (1 - fu)),
        (1, 1, fv * fu),
    ):
        i = i0 + di
        j = j0 + dj
        ok = (i >= 0) & (i < side) & (j >= 0) & (j < side) & (w > 0)
        idx.append(i[ok] * side + j[ok])
        wts.append(w[ok])
        sel.append(ok)
    return idx, wts, sel


def _detector_block(
    q: np.ndarray, grid: ImageGrid, radii: np.ndarray, ring_radius: float, arc_step: float
) -> sp.csr_matrix:
    """Sparse (Nt, N) block for one element located at ``q``."""
    side = grid.side
    ps = grid.pixel_size
    # arcs only need to reach the bilinear support of the grid
    reach = math.sqrt(2) * (grid.fov / 2 + ps)
    dist_q = float(np.hypot(*q))
    beta_max = math.asin(min(1.0, reach / dist_q))
    lo, hi = dist_q - reach, dist_q + reach
    ks = np.nonzero((radii >= lo) & (radii <= hi))[0]
    nt = radii.size
    if ks.size == 0:
        return sp.csr_matrix((nt, grid.num_pixels))
    r = radii[ks]
    n_arc = np.maximum(1, np.ceil(2 * beta_max * r / arc_step).astype(np.int64))
    rows = np.repeat(ks, n_arc)
    rr = np.repeat(r, n_arc)
    nn = np.repeat(n_arc, n_arc)
    starts = np.cumsum(n_arc) - n_arc
    local = np.arange(rows.size) - np.repeat(starts, n_arc)
    dbeta = 2 * beta_max / nn
    beta = -beta_max + (local + 0.5) * dbeta
    gamma = math.atan2(-q[1], -q[0])
    px = q[0] + rr * np.cos(gamma + beta)
    py = q[1] + rr * np.sin(gamma + beta)
    arc_w = rr * dbeta
    u = (px + grid.fov / 2) / ps - 0.5
    v = (py + grid.fov / 2) / ps - 0.5
    inside = (u > -1) & (u < side) & (v > -1) & (v < side)
    u, v, rows, arc_w = u[inside], v[inside], rows[inside], arc_w[inside]
    idx, wts, sel = _bilinear(u, v, side)
    all_rows = np.concatenate([rows[s] for s in sel])
    all_cols = np.concatenate(idx)
    all_vals = np.concatenate([w * arc_w[s] for w, s in zip(wts, sel)])
    block = sp.coo_matrix((all_vals, (all_rows, all_cols)), shape=(nt, grid.num_pixels))
    return block.tocsr()


@dataclass
class ForwardOperator:
    """Sparse matrix A mapping a flattened image to a flattened (Nd, Nt) sinogram."""

    grid: ImageGrid
    geometry: RingGeometry
    time: TimeGrid
    arc_step_factor: float = 0.5
    matrix: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        check_coverage(self.geometry, self.grid, self.time)
        radii = self.time.radii_mm()
        step = self.arc_step_factor * self.grid.pixel_size
        blocks = [
            _detector_block(q, self.grid, radii, self.geometry.ring_radius, step)
            for q in self.geometry.positions()
        ]
        self.matrix = sp.vstack(blocks, format="csr")
        self.matrix.sort_indices()

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.geometry.num_elements, self.time.nt)

    @cached_property
    def matrix_t(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return self.apply(image)

    def apply(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.grid.shape:
            raise DimensionError(f"image shape {image.shape} != {self.grid.shape}")
        return (self.matrix @ image.ravel()).reshape(self.sino_shape)

    def adjoint(self, samples: np.ndarray) -> np.ndarray:
        samples = np.asarray(samples, dtype=np.float64)
        if samples.shape != self.sino_shape:
            raise DimensionError(f"sinogram shape {samples.shape} != {self.sino_shape}")
        return (self.matrix_t @ samples.ravel()).reshape(self.grid.shape)


def forward_project(
    image: np.ndarray,
    grid: ImageGrid,
    geometry: RingGeometry,
    time: TimeGrid,
    wavelength_nm: float = 0.0,
    slice_index: int = 0,
) -> Sinogram:
    op = ForwardOperator(grid, geometry, time)
    return Sinogram(geometry, time, op.apply(image), wavelength_nm, slice_index)


def adjoint_project(sino: Sinogram, grid: ImageGrid) -> np.ndarray:
    op = ForwardOperator(grid, sino.geometry, sino.time)
    return op.adjoint(sino.samples)


def ubp_filter(samples: np.ndarray, time: TimeGrid, p_term: bool = False) -> np.ndarray:
    """Per-channel UBP filter on arc-integral traces.

    The arc integrals g are turned into a pressure-like trace
    ``p = -H[g] / (c t)`` (H: Hilbert transform along time) and filtered as
    ``b = -t dp/dt`` with central differences. ``p_term=True`` adds the
    ``p`` term of the 3-D formula, which hurts in this 2-D geometry.
    """
    g = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    nt = g.shape[1]
    nfft = 1 << int(math.ceil(math.log2(4 * nt)))
    hg = np.imag(hilbert(g, N=nfft, axis=1))[:, :nt]
    r = time.radii_mm()
    p = -hg / r
    b = -r * np.gradient(p, r, axis=1)
    if p_term:
        b += p
    return b


def _coverage_table(angles: np.ndarray, pitches: np.ndarray, step: float = 0.01):
    """Smoothed channel density on a fine angle table, ~1 inside the covered arc."""
    table = np.arange(0.0, 360.0, step)
    dens = np.zeros_like(table)
    for a, pitch in zip(angles, pitches):
        hw = 2.0 * pitch
        d = np.abs(np.mod(table - a + 180.0, 360.0) - 180.0)
        dens += np.clip(1.0 - d / hw, 0.0, None) * (pitch / hw)
    return table, dens


def ubp_reconstruct(
    sinos: Sequence[Sinogram], grid: ImageGrid, p_term: bool = False
) -> np.ndarray:
    """Filtered backprojection over every channel of every sinogram.

    Each channel is weighted by the angle it subtends at the pixel and by a
    redundancy factor that splits each view between the element seeing it
    and the element on the far side of the same ray, when that one exists.
    Channel widths are the ring pitch divided by the number of interlaced
    sinograms. Sinograms may come from differently rotated rings but must
    share one time grid.
    """
    sinos = list(sinos)
    if not sinos:
        raise ValueError("ubp_reconstruct needs at least one sinogram")
    time = sinos[0].time
    for s in sinos[1:]:
        if not s.time.same_as(time):
            raise DimensionError("sinograms do not share a time grid")
    K = len(sinos)
    angles = np.concatenate([s.geometry.angles() for s in sinos])
    pitches = np.concatenate([np.full(s.geometry.num_elements, s.geometry.pitch / K) for s in sinos])
    table, dens = _coverage_table(angles, pitches)

    def coverage(beta):
        return np.interp(np.mod(beta, 360.0), table, dens, period=360.0)

    X, Y = grid.mesh()
    r0 = time.radii_mm()[0]
    dr = time.dt * time.c * MM_PER_M
    bins = np.arange(time.nt)
    image = np.zeros(grid.shape)
    for s in sinos:
        b = ubp_filter(s.samples, time, p_term)
        R = s.geometry.ring_radius
        dalpha = np.deg2rad(s.geometry.pitch / K)
        for a, q, trace in zip(s.geometry.angles(), s.geometry.positions(), b):
            vx, vy = X - q[0], Y - q[1]
            dist = np.hypot(vx, vy)
            subtended = R * (R - (X * q[0] + Y * q[1]) / R) / dist**2
            # far intersection of the ray q -> pixel with the ring
            s_far = -2.0 * (q[0] * vx + q[1] * vy) / dist
            far = np.degrees(np.arctan2(q[1] + s_far * vy / dist, q[0] + s_far * vx / dist))
            redundancy = 1.0 / (coverage(a) + coverage(far))
            trace_at = np.interp((dist - r0) / dr, bins, trace, left=0.0, right=0.0)
            image += (redundancy * subtended * dalpha) * trace_at
    return image / (2.0 * np.pi)
