"""Per-pixel linear unmixing of multi-wavelength stacks into HbO2 / Hb maps."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .phantom import SpectralLibrary

MAX_CONDITION = 1e10


class ConditioningError(np.linalg.LinAlgError):
    def __init__(self, cond: float):
        super().__init__(f"extinction matrix is rank deficient (condition number {cond:.3g})")
        self.cond = cond


def unmix_unconstrained(stack: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Least-squares concentrations, shape (2, H, W); no clamping."""
    stack = np.asarray(stack, dtype=np.float64)
    W = stack.shape[0]
    if E.shape != (W, 2):
        raise ValueError(f"extinction matrix shape {E.shape} does not match {W} images")
    cond = np.linalg.cond(E)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise ConditioningError(float(cond))
    s = stack.reshape(W, -1)
    C, *_ = np.linalg.lstsq(E, s, rcond=None)
    return C.reshape((2,) + stack.shape[1:])


def unmix(stack: Sequence[np.ndarray] | np.ndarray, lib: SpectralLibrary | np.ndarray):
    """Nonnegative least squares per pixel, returns (C_HbO2, C_Hb).

    ``lib`` is a spectral library or directly the W x 2 extinction matrix.

    Where the unconstrained solution has a negative component, that
    component is fixed at zero and the other one is refit alone; the
    better of the two boundary fits wins.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3:
        raise ValueError(f"stack must be (W, H, W), got shape {stack.shape}")
    E = lib.matrix() if isinstance(lib, SpectralLibrary) else np.asarray(lib, dtype=np.float64)
    C = unmix_unconstrained(stack, E)
    W = stack.shape[0]
    s = stack.reshape(W, -1)
    c = C.reshape(2, -1).copy()
    bad = (c < 0).any(axis=0)
    if bad.any():
        sb = s[:, bad]
        e1, e2 = E[:, 0], E[:, 1]
        a1 = np.maximum(e1 @ sb / (e1 @ e1), 0.0)
        a2 = np.maximum(e2 @ sb / (e2 @ e2), 0.0)
        r1 = np.sum((np.outer(e1, a1) - sb) ** 2, axis=0)
        r2 = np.sum((np.outer(e2, a2) - sb) ** 2, axis=0)
        first = r1 <= r2
        c[:, bad] = np.where(first, np.stack([a1, np.zeros_like(a1)]), np.stack([np.zeros_like(a2), a2]))
    c = c.reshape((2,) + stack.shape[1:])
    return c[0], c[1]


def concentration_mask(cmap: np.ndarray, rel_threshold: float = 0.1) -> np.ndarray:
    peak = float(np.max(cmap))
    if peak <= 0:
        return np.zeros(cmap.shape, dtype=bool)
    return cmap >= rel_threshold * peak
