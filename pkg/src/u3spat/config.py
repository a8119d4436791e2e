"""Experiment configuration: flat ``key = value`` sections with named presets.

``desk`` is the default: 96x96 images, 64/11 elements, 800-iteration trainings.
``paper`` carries the full-scale acquisition and training constants.
``ci`` shrinks ``desk`` further (64x64, width 256) so the whole comparison
fits a single-core test run.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .geometry import RingGeometry, build_spiral_schedule, rotation_step
from .inr import TrainingConfig
from .physics import ImageGrid, make_time_grid


class ConfigError(ValueError):
    pass


SECTIONS: dict[str, list[str]] = {
    "geometry": ["ring_radius", "arc_coverage", "num_elements_dense", "num_elements_sparse"],
    "acquisition": [
        "wavelengths",
        "num_slices",
        "slice_spacing",
        "z_start",
        "speed_of_sound",
        "sampling_rate_hz",
    ],
    "image": ["side", "fov"],
    "phantom": ["phantom_seed"],
    "network": ["depth", "width", "omega0"],
    "training": [
        "iterations",
        "embed_iterations",
        "lr_embed",
        "lr_reconstruct",
        "delta",
        "seed",
    ],
    "evaluation": ["center_slice", "mask_threshold"],
}


@dataclass
class ExperimentConfig:
    ring_radius: float = 40.5
    arc_coverage: float = 270.0
    num_elements_dense: int = 64
    num_elements_sparse: int = 11
    wavelengths: tuple[float, ...] = (700.0, 730.0, 760.0, 800.0, 850.0)
    num_slices: int = 15
    slice_spacing: float = 0.5
    z_start: float = 36.5  # centre slice 8 lands mid-phantom at 40 mm
    speed_of_sound: float = 1536.0
    sampling_rate_hz: float = 40e6
    side: int = 96
    fov: float = 25.4
    phantom_seed: int = 0
    depth: int = 4
    width: int = 512
    omega0: float = 30.0
    iterations: int = 800
    embed_iterations: int = 1000
    lr_embed: float = 1e-4
    lr_reconstruct: float = 1e-5
    delta: float = 0.8
    seed: int = 0
    center_slice: int = 8
    mask_threshold: float = 0.1
    preset: str = field(default="desk", compare=False)

    def __post_init__(self):
        self.wavelengths = tuple(float(w) for w in self.wavelengths)
        if len(self.wavelengths) % 2 == 0:
            raise ConfigError("the number of wavelengths W must be odd")
        if self.num_slices < len(self.wavelengths):
            raise ConfigError("num_slices must be at least W")
        if self.slice_spacing < 0:
            raise ConfigError("slice_spacing must be >= 0")

    # derived objects

    @property
    def num_wavelengths(self) -> int:
        return len(self.wavelengths)

    def dense_geometry(self) -> RingGeometry:
        return RingGeometry(self.ring_radius, self.arc_coverage, self.num_elements_dense)

    def sparse_geometry(self) -> RingGeometry:
        return RingGeometry(self.ring_radius, self.arc_coverage, self.num_elements_sparse)

    def grid(self) -> ImageGrid:
        return ImageGrid(self.side, self.fov)

    def time_grid(self):
        return make_time_grid(
            self.dense_geometry(), self.grid(), self.speed_of_sound, self.sampling_rate_hz
        )

    def schedule(self):
        step = rotation_step(self.sparse_geometry().pitch, self.num_wavelengths)
        return build_spiral_schedule(
            self.num_slices, self.z_start, self.slice_spacing, self.wavelengths, step
        )

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            iterations=self.iterations,
            lr_embed=self.lr_embed,
            lr_reconstruct=self.lr_reconstruct,
            delta=self.delta,
            seed=self.seed,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # text form

    def dump(self) -> str:
        cp = configparser.ConfigParser()
        cp["meta"] = {"preset": self.preset}
        for section, keys in SECTIONS.items():
            cp[section] = {k: _format(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse(key: str, text: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple"):
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


PRESETS: dict[str, dict] = {
    "desk": {},
    "paper": dict(
        num_elements_dense=128,
        num_elements_sparse=21,
        side=220,
        width=512,
        iterations=2000,
        embed_iterations=2000,
    ),
    "ci": dict(side=64, width=256, sampling_rate_hz=20e6),
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig(preset=name, **PRESETS[name])


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    name = cp.get("meta", "preset", fallback=None)
    if name:
        cfg = preset(name)
    else:
        cfg = base if base is not None else preset("desk")
    changes = {}
    for section in cp.sections():
        if section == "meta":
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in cp[section].items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            changes[key] = _parse(key, value)
    return cfg.replace(**changes)


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), base)
