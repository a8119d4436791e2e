"""Binary and text file formats: sinograms, images, network checkpoints, CSVs.

All binary formats are little-endian and start with an 8-byte magic.
Every writer goes through ``atomic_write`` (temp file + rename).
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import RingGeometry
from .inr import CoordinateNetwork
from .physics import Sinogram, TimeGrid

SINO_MAGIC = b"U3SSINO1"
IMG_MAGIC = b"U3SIMG1\0"
NET_MAGIC = b"U3SNET1\0"

_SINO_HEADER = struct.Struct("<II7dI")

METRIC_FIELDS = ["method", "slice", "wavelength", "psnr_db", "ssim", "dice_hb", "dice_hbo2"]


class FormatError(ValueError):
    pass


def atomic_write(path: str | Path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _check_magic(buf: bytes, magic: bytes, path) -> None:
    if buf[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {buf[:len(magic)]!r}, expected {magic!r}")


# sinograms


def sinogram_bytes(sino: Sinogram) -> bytes:
    g, t = sino.geometry, sino.time
    header = _SINO_HEADER.pack(
        g.num_elements,
        t.nt,
        t.t0,
        t.dt,
        t.c,
        g.ring_radius,
        g.arc_coverage,
        g.rotation_offset,
        float(sino.wavelength_nm),
        int(sino.slice_index),
    )
    return SINO_MAGIC + header + np.ascontiguousarray(sino.samples, dtype="<f8").tobytes()


def save_sinogram(path: str | Path, sino: Sinogram) -> Path:
    return atomic_write(path, sinogram_bytes(sino))


def sinogram_from_bytes(buf: bytes, name: str = "<bytes>") -> Sinogram:
    _check_magic(buf, SINO_MAGIC, name)
    off = len(SINO_MAGIC)
    if len(buf) < off + _SINO_HEADER.size:
        raise FormatError(f"{name}: truncated header")
    nd, nt, t0, dt, c, radius, arc, theta, wl, m = _SINO_HEADER.unpack_from(buf, off)
    off += _SINO_HEADER.size
    expected = nd * nt * 8
    if len(buf) - off != expected:
        raise FormatError(f"{name}: payload is {len(buf) - off} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f8", offset=off).reshape(nd, nt).astype(np.float64)
    geometry = RingGeometry(radius, arc, nd, theta)
    return Sinogram(geometry, TimeGrid(t0, dt, nt, c), data, wl, m)


def load_sinogram(path: str | Path) -> Sinogram:
    return sinogram_from_bytes(Path(path).read_bytes(), str(path))


# images


def image_bytes(image: np.ndarray, provenance: Mapping[str, object] | None = None) -> bytes:
    image = np.asarray(image, dtype="<f8")
    if image.ndim != 2:
        raise FormatError(f"images must be 2-D, got shape {image.shape}")
    prov = "".join(f"{k}={v}\n" for k, v in (provenance or {}).items()).encode("utf-8")
    head = struct.pack("<III", image.shape[0], image.shape[1], len(prov))
    return IMG_MAGIC + head + prov + np.ascontiguousarray(image).tobytes()


def save_image(path: str | Path, image: np.ndarray, provenance: Mapping[str, object] | None = None) -> Path:
    return atomic_write(path, image_bytes(image, provenance))


def image_from_bytes(buf: bytes, name: str = "<bytes>") -> tuple[np.ndarray, dict[str, str]]:
    _check_magic(buf, IMG_MAGIC, name)
    off = len(IMG_MAGIC)
    if len(buf) < off + 12:
        raise FormatError(f"{name}: truncated header")
    rows, cols, plen = struct.unpack_from("<III", buf, off)
    off += 12
    prov = {}
    for line in buf[off : off + plen].decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        prov[k] = v
    off += plen
    if len(buf) - off != rows * cols * 8:
        raise FormatError(f"{name}: payload size does not match {rows}x{cols}")
    img = np.frombuffer(buf, dtype="<f8", offset=off).reshape(rows, cols).astype(np.float64)
    return img, prov


def load_image(path: str | Path) -> tuple[np.ndarray, dict[str, str]]:
    return image_from_bytes(Path(path).read_bytes(), str(path))


# network checkpoints


def network_bytes(net: CoordinateNetwork) -> bytes:
    dims = net.dims
    parts = [NET_MAGIC, struct.pack("<I", net.depth), struct.pack(f"<{len(dims)}I", *dims)]
    for p in net.params():
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    parts.append(struct.pack("<dQ", net.omega0, net.seed))
    return b"".join(parts)


def save_network(path: str | Path, net: CoordinateNetwork) -> Path:
    return atomic_write(path, network_bytes(net))


def network_from_bytes(buf: bytes, name: str = "<bytes>") -> CoordinateNetwork:
    _check_magic(buf, NET_MAGIC, name)
    off = len(NET_MAGIC)
    try:
        (depth,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{depth + 1}I", buf, off)
    except struct.error as exc:
        raise FormatError(f"{name}: truncated header") from exc
    off += 4 * (depth + 1)
    need = sum(4 * (a * b + b) for a, b in zip(dims[:-1], dims[1:])) + 16
    if len(buf) - off != need:
        raise FormatError(f"{name}: payload is {len(buf) - off} bytes, expected {need}")
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(buf, dtype="<f4", count=n_in * n_out, offset=off).reshape(n_in, n_out)
        off += 4 * n_in * n_out
        b = np.frombuffer(buf, dtype="<f4", count=n_out, offset=off)
        off += 4 * n_out
        weights.append(w.astype(np.float32))
        biases.append(b.astype(np.float32))
    omega0, seed = struct.unpack_from("<dQ", buf, off)
    return CoordinateNetwork(weights, biases, omega0, int(seed))


def load_network(path: str | Path) -> CoordinateNetwork:
    return network_from_bytes(Path(path).read_bytes(), str(path))


# CSV


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def save_losses(path: str | Path, losses: Sequence[float]) -> Path:
    return atomic_write(path, _csv_text(["iteration", "loss"], ((i, repr(float(v))) for i, v in enumerate(losses))))


def load_losses(path: str | Path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def save_metrics(path: str | Path, rows: Iterable[Mapping[str, object]]) -> Path:
    return atomic_write(path, _csv_text(METRIC_FIELDS, ([r.get(k, "") for k in METRIC_FIELDS] for r in rows)))


def load_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    return atomic_write(path, _csv_text(header, rows))


# previews


def to_uint8(image: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    lo = float(image.min()) if lo is None else lo
    hi = float(image.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round(255 * np.clip((image - lo) / (hi - lo), 0, 1)).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> Path:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return atomic_write(path, buf.getvalue())


def save_pgm(path: str | Path, image: np.ndarray) -> Path:
    u8 = to_uint8(image)
    head = f"P5\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode("ascii")
    return atomic_write(path, head + u8.tobytes())
