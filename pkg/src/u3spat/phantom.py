"""Multispectral numerical phantoms and simulated spiral acquisitions."""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import RingGeometry, SpiralSchedule
from .physics import ForwardOperator, ImageGrid, Sinogram, TimeGrid


class PhantomError(ValueError):
    pass


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralLibrary:
    """Extinction coefficients of HbO2 and Hb at each wavelength."""

    wavelengths: tuple[float, ...]
    eps_hbo2: tuple[float, ...]
    eps_hb: tuple[float, ...]

    def __post_init__(self):
        n = len(self.wavelengths)
        if n == 0 or len(self.eps_hbo2) != n or len(self.eps_hb) != n:
            raise SpectralError("wavelength and extinction lists must have equal, nonzero length")
        if min(self.eps_hbo2) <= 0 or min(self.eps_hb) <= 0:
            raise SpectralError("extinction coefficients must be > 0")

    @classmethod
    def default(cls) -> "SpectralLibrary":
        # synthetic, well conditioned; not physiological values
        return cls(
            (700.0, 730.0, 760.0, 800.0, 850.0),
            (0.2, 0.4, 0.6, 0.8, 1.0),
            (1.0, 0.8, 0.6, 0.4, 0.2),
        )

    def matrix(self) -> np.ndarray:
        """W x 2 matrix with columns (HbO2, Hb)."""
        return np.column_stack([self.eps_hbo2, self.eps_hb]).astype(float)

    def index(self, wavelength_nm: float) -> int:
        for i, w in enumerate(self.wavelengths):
            if math.isclose(w, wavelength_nm, abs_tol=1e-6):
                return i
        raise SpectralError(f"wavelength {wavelength_nm} nm not in library {self.wavelengths}")

    def coefficients(self, wavelength_nm: float) -> tuple[float, float]:
        i = self.index(wavelength_nm)
        return self.eps_hbo2[i], self.eps_hb[i]

    def subset(self, wavelengths: Sequence[float]) -> "SpectralLibrary":
        idx = [self.index(w) for w in wavelengths]
        return SpectralLibrary(
            tuple(self.wavelengths[i] for i in idx),
            tuple(self.eps_hbo2[i] for i in idx),
            tuple(self.eps_hb[i] for i in idx),
        )

    def to_text(self) -> str:
        lines = ["# wavelength_nm eps_HbO2 eps_Hb"]
        for w, a, b in zip(self.wavelengths, self.eps_hbo2, self.eps_hb):
            lines.append(f"{w:g} {a:.17g} {b:.17g}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "SpectralLibrary":
        rows = [
            ln.replace(",", " ").split()
            for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")
        ]
        cols = list(zip(*[[float(v) for v in r[:3]] for r in rows]))
        if len(cols) != 3:
            raise SpectralError(f"{path}: expected three columns")
        return cls(tuple(cols[0]), tuple(cols[1]), tuple(cols[2]))


@dataclass
class Primitive:
    """Elliptical cross-section whose centre follows a polyline in z.

    ``knots`` rows are (z, x, y, scale); the semi-axes at depth z are
    ``scale(z) * (radius_a, radius_b)``. Outside [z_min, z_max] of the knots
    the primitive is absent.
    """

    kind: str
    knots: np.ndarray
    radius_a: float
    radius_b: float
    angle_deg: float = 0.0
    hbo2: float = 0.0
    hb: float = 0.0

    def __post_init__(self):
        if self.kind not in ("tube", "disc", "ellipse"):
            raise PhantomError(f"unknown primitive type {self.kind!r}")
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 2 or k.shape[1] not in (3, 4) or k.shape[0] < 1:
            raise PhantomError("knots must be rows of (z, x, y[, scale])")
        if k.shape[1] == 3:
            k = np.column_stack([k, np.ones(len(k))])
        if np.any(np.diff(k[:, 0]) <= 0):
            raise PhantomError("knot z values must be strictly increasing")
        self.knots = k
        if self.radius_a <= 0 or self.radius_b <= 0:
            raise PhantomError("radii must be > 0")
        if self.hbo2 < 0 or self.hb < 0:
            raise PhantomError("concentrations must be >= 0")

    @property
    def z_range(self) -> tuple[float, float]:
        return float(self.knots[0, 0]), float(self.knots[-1, 0])

    def state(self, z: float):
        """(x, y, scale) at depth z, or None outside the axial extent."""
        z0, z1 = self.z_range
        if z < z0 - 1e-12 or z > z1 + 1e-12:
            return None
        k = self.knots
        if len(k) == 1:
            return k[0, 1], k[0, 2], k[0, 3]
        return tuple(float(np.interp(z, k[:, 0], k[:, c])) for c in (1, 2, 3))

    def membership(self, X: np.ndarray, Y: np.ndarray, z: float) -> np.ndarray:
        st = self.state(z)
        if st is None:
            return np.zeros(X.shape, dtype=bool)
        x0, y0, s = st
        a = np.deg2rad(self.angle_deg)
        dx, dy = X - x0, Y - y0
        u = dx * np.cos(a) + dy * np.sin(a)
        v = -dx * np.sin(a) + dy * np.cos(a)
        return (u / (s * self.radius_a)) ** 2 + (v / (s * self.radius_b)) ** 2 <= 1.0


@dataclass
class ChromophorePhantom:
    primitives: list[Primitive]
    background_hbo2: float = 0.0
    background_hb: float = 0.0
    z_extent: tuple[float, float] = (-50.0, 50.0)

    def __post_init__(self):
        if self.background_hbo2 < 0 or self.background_hb < 0:
            raise PhantomError("background concentrations must be >= 0")
        if self.z_extent[0] > self.z_extent[1]:
            raise PhantomError("z_extent must be (low, high)")

    def concentrations(self, z: float, grid: ImageGrid, supersample: int = 2):
        """Anti-aliased (C_HbO2, C_Hb) maps at depth z."""
        lo, hi = self.z_extent
        if not lo - 1e-9 <= z <= hi + 1e-9:
            raise PhantomError(f"z={z} outside phantom extent {self.z_extent}")
        ps = grid.pixel_size
        offs = (np.arange(supersample) + 0.5) / supersample - 0.5
        X, Y = grid.mesh()
        c_o = np.full(grid.shape, float(self.background_hbo2))
        c_d = np.full(grid.shape, float(self.background_hb))
        for p in self.primitives:
            if p.state(z) is None:
                continue
            cover = np.zeros(grid.shape)
            for ox in offs:
                for oy in offs:
                    cover += p.membership(X + ox * ps, Y + oy * ps, z)
            cover /= supersample * supersample
            c_o += p.hbo2 * cover
            c_d += p.hb * cover
        return c_o, c_d

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["phantom"] = {
            "background_hbo2": repr(self.background_hbo2),
            "background_hb": repr(self.background_hb),
            "z_min": repr(self.z_extent[0]),
            "z_max": repr(self.z_extent[1]),
        }
        for i, p in enumerate(self.primitives, 1):
            cp[f"primitive.{i}"] = {
                "type": p.kind,
                "radius_a": repr(p.radius_a),
                "radius_b": repr(p.radius_b),
                "angle_deg": repr(p.angle_deg),
                "hbo2": repr(p.hbo2),
                "hb": repr(p.hb),
                "knots": "; ".join(",".join(repr(float(v)) for v in row) for row in p.knots),
            }
        buf = io.StringIO()
        buf.write("# primitive knots: z_mm,x_mm,y_mm,scale; ...\n")
        cp.write(buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "ChromophorePhantom":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise PhantomError(f"cannot read phantom file {path}")
        head = cp["phantom"]
        prims = []
        for name in cp.sections():
            if not name.startswith("primitive."):
                continue
            s = cp[name]
            knots = [[float(v) for v in row.split(",")] for row in s["knots"].split(";") if row.strip()]
            ra = float(s.get("radius_a", s.get("radius", "0")))
            prims.append(
                Primitive(
                    kind=s.get("type", "tube"),
                    knots=np.array(knots),
                    radius_a=ra,
                    radius_b=float(s.get("radius_b", repr(ra))),
                    angle_deg=float(s.get("angle_deg", "0")),
                    hbo2=float(s.get("hbo2", "0")),
                    hb=float(s.get("hb", "0")),
                )
            )
        return cls(
            prims,
            float(head.get("background_hbo2", "0")),
            float(head.get("background_hb", "0")),
            (float(head.get("z_min", "-50")), float(head.get("z_max", "50"))),
        )


def render_concentrations(phantom: ChromophorePhantom, z: float, grid: ImageGrid):
    return phantom.concentrations(z, grid)


def render_slice(
    phantom: ChromophorePhantom, z: float, wavelength_nm: float, lib: SpectralLibrary, grid: ImageGrid
) -> np.ndarray:
    """Initial pressure ``eps_HbO2 C_HbO2 + eps_Hb C_Hb`` under uniform fluence."""
    e_o, e_d = lib.coefficients(wavelength_nm)
    c_o, c_d = phantom.concentrations(z, grid)
    return e_o * c_o + e_d * c_d


def _random_walk(rng, n, start, step_sd, max_step, bound):
    pts = [np.asarray(start, dtype=float)]
    for _ in range(n - 1):
        step = rng.normal(0, step_sd, size=2)
        norm = np.hypot(*step)
        if norm > max_step:
            step *= max_step / norm
        nxt = pts[-1] + step
        r = np.hypot(*nxt)
        if r > bound:
            # reflect off the bound, then re-limit the step (the disc is convex)
            nxt = nxt * (2 * bound - r) / r
            d = nxt - pts[-1]
            dn = np.hypot(*d)
            if dn > max_step:
                nxt = pts[-1] + d * max_step / dn
        pts.append(nxt)
    return np.array(pts)


def default_phantom(
    seed: int = 0,
    fov: float = 25.4,
    z_extent: tuple[float, float] = (-20.0, 100.0),
    knot_spacing: float = 2.0,
    max_drift: float = 0.3,
    drift_per: float = 0.5,
) -> ChromophorePhantom:
    """Body outline plus organs and vessels drifting slowly with depth.

    Lateral drift never exceeds ``max_drift`` mm per ``drift_per`` mm of
    depth, so neighbouring slices share most of their structure.
    """
    rng = np.random.default_rng(seed)
    zs = np.arange(z_extent[0], z_extent[1] + 1e-9, knot_spacing)
    n = zs.size
    max_step = max_drift * knot_spacing / drift_per
    half = fov / 2
    prims: list[Primitive] = []

    def path(start, sd, bound, scale_sd=0.0):
        xy = _random_walk(rng, n, start, sd, max_step, bound)
        if scale_sd:
            sc = np.clip(1 + np.cumsum(rng.normal(0, scale_sd, n)), 0.6, 1.4)
        else:
            sc = np.ones(n)
        return np.column_stack([zs, xy, sc])

    # body
    prims.append(
        Primitive("ellipse", path((0.0, 0.0), 0.05, 0.5, 0.01), 0.78 * half, 0.66 * half,
                  angle_deg=float(rng.uniform(0, 180)), hbo2=0.14, hb=0.10)
    )
    # organs
    for _ in range(2):
        c = rng.uniform(-0.35, 0.35, 2) * half
        prims.append(
            Primitive("ellipse", path(c, 0.4, 0.4 * half, 0.03),
                      float(rng.uniform(1.5, 2.8)), float(rng.uniform(1.0, 2.0)),
                      angle_deg=float(rng.uniform(0, 180)),
                      hbo2=float(rng.uniform(0.15, 0.35)), hb=float(rng.uniform(0.1, 0.3)))
        )
    # vessels: arteries are oxygenated, veins less so
    for i in range(int(rng.integers(5, 8))):
        c = rng.uniform(-0.5, 0.5, 2) * half
        tot = float(rng.uniform(0.6, 1.0))
        so2 = float(rng.uniform(0.85, 0.98)) if i % 2 == 0 else float(rng.uniform(0.5, 0.7))
        r = float(rng.uniform(0.35, 1.1))
        prims.append(
            Primitive("tube", path(c, 0.7, 0.55 * half, 0.04), r, r, hbo2=tot * so2, hb=tot * (1 - so2))
        )
    return ChromophorePhantom(prims, 0.0, 0.0, z_extent)


@dataclass
class Acquisition:
    schedule: SpiralSchedule
    sparse: list[Sinogram]
    dense: dict[int, list[Sinogram]] = field(default_factory=dict)  # slice -> per-wavelength

    @property
    def data_volume_ratio(self) -> float:
        if not self.dense:
            raise ValueError("no dense reference acquired")
        n_sparse = sum(s.samples.size for s in self.sparse)
        n_dense = sum(s.samples.size for ss in self.dense.values() for s in ss)
        return n_sparse / n_dense


def acquire_u3s(
    phantom: ChromophorePhantom,
    schedule: SpiralSchedule,
    sparse_geometry: RingGeometry,
    grid: ImageGrid,
    time: TimeGrid,
    lib: SpectralLibrary,
    dense_geometry: RingGeometry | None = None,
    dense_slices: Sequence[int] | None = None,
) -> Acquisition:
    """One sparse sinogram per schedule record; optional dense references.

    Record m is rendered at (z_m, lambda_omega) and projected with the sparse
    ring rotated by theta_m. Dense references hold every wavelength at each
    requested slice with the unrotated dense ring.
    """
    sparse = []
    for rec in schedule.records:
        img = render_slice(phantom, rec.z_mm, rec.wavelength_nm, lib, grid)
        op = ForwardOperator(grid, sparse_geometry.rotated(rec.theta_deg), time)
        sparse.append(Sinogram(op.geometry, time, op.apply(img), rec.wavelength_nm, rec.slice_index))
    dense: dict[int, list[Sinogram]] = {}
    if dense_geometry is not None:
        slices = range(1, schedule.num_slices + 1) if dense_slices is None else dense_slices
        dense = acquire_fixed(phantom, schedule, dense_geometry, grid, time, lib, slices)
    return Acquisition(schedule, sparse, dense)


def acquire_fixed(
    phantom: ChromophorePhantom,
    schedule: SpiralSchedule,
    geometry: RingGeometry,
    grid: ImageGrid,
    time: TimeGrid,
    lib: SpectralLibrary,
    slices: Sequence[int],
) -> dict[int, list[Sinogram]]:
    """Every wavelength at each listed slice with one fixed (unrotated) ring.

    With the dense ring this is the DS reference; with the sparse ring it is
    the SS baseline.
    """
    op = ForwardOperator(grid, geometry, time)
    out: dict[int, list[Sinogram]] = {}
    for m in slices:
        z = schedule.record(m).z_mm
        out[m] = [
            Sinogram(geometry, time, op.apply(render_slice(phantom, z, w, lib, grid)), w, m)
            for w in schedule.wavelengths
        ]
    return out
