"""Simulation pipelines: DS reference, SS baseline, U3S with and without prior.

Everything here is driven by an ``ExperimentConfig`` and is deterministic for
a fixed config (phantom seed, network seed).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .config import ExperimentConfig
from .geometry import SpiralSchedule
from .inr import CoordinateNetwork, SliceReconstruction, embed_prior, reconstruct_slice, train_center
from .metrics import dice, psnr, ssim
from .phantom import (
    Acquisition,
    ChromophorePhantom,
    SpectralLibrary,
    acquire_fixed,
    acquire_u3s,
    default_phantom,
    render_slice,
)
from .physics import ForwardOperator, ubp_reconstruct
from .prior import PriorImage, build_prior, fuse_window
from .unmix import concentration_mask, unmix

log = logging.getLogger(__name__)

METHODS = ("ds", "ss", "u3s", "u3s-noprior")


class MissingReferenceError(RuntimeError):
    pass


@dataclass
class Scenario:
    """Phantom, schedule and every simulated measurement for one config."""

    cfg: ExperimentConfig
    lib: SpectralLibrary
    phantom: ChromophorePhantom
    schedule: SpiralSchedule
    acquisition: Acquisition
    ss: dict[int, list] = field(default_factory=dict)

    @property
    def grid(self):
        return self.cfg.grid()

    def truth(self, m: int) -> dict[float, np.ndarray]:
        z = self.schedule.record(m).z_mm
        return {w: render_slice(self.phantom, z, w, self.lib, self.grid) for w in self.schedule.wavelengths}

    def mean_spectral(self, m: int) -> np.ndarray:
        return np.mean(list(self.truth(m).values()), axis=0)


def simulate(cfg: ExperimentConfig, slices: list[int] | None = None, with_ss: bool = True) -> Scenario:
    """Sparse spiral acquisition of every slice plus DS/SS data at ``slices``."""
    lib = SpectralLibrary.default().subset(cfg.wavelengths)
    phantom = default_phantom(cfg.phantom_seed, fov=cfg.fov)
    schedule = cfg.schedule()
    grid, tg = cfg.grid(), cfg.time_grid()
    slices = [cfg.center_slice] if slices is None else slices
    acq = acquire_u3s(
        phantom, schedule, cfg.sparse_geometry(), grid, tg, lib, cfg.dense_geometry(), slices
    )
    ss = acquire_fixed(phantom, schedule, cfg.sparse_geometry(), grid, tg, lib, slices) if with_ss else {}
    return Scenario(cfg, lib, phantom, schedule, acq, ss)


def ds_images(scn: Scenario, m: int) -> list[np.ndarray]:
    if m not in scn.acquisition.dense:
        raise MissingReferenceError(f"no dense reference acquired at slice {m}")
    return [ubp_reconstruct([s], scn.grid) for s in scn.acquisition.dense[m]]


def ss_images(scn: Scenario, m: int) -> list[np.ndarray]:
    if m not in scn.ss:
        raise MissingReferenceError(f"no sparse baseline acquired at slice {m}")
    return [ubp_reconstruct([s], scn.grid) for s in scn.ss[m]]


def window_prior(scn: Scenario, m: int) -> PriorImage:
    return build_prior(fuse_window(scn.acquisition.sparse, scn.schedule, m), scn.grid)


def fresh_network(cfg: ExperimentConfig) -> CoordinateNetwork:
    return CoordinateNetwork.create(cfg.depth, cfg.width, cfg.omega0, seed=cfg.seed)


@dataclass
class U3SRun:
    prior: PriorImage
    embedded: CoordinateNetwork | None
    embed_losses: list[float]
    slice: SliceReconstruction


def run_u3s(scn: Scenario, m: int, use_prior: bool = True, jobs: int = 1, iterations: int | None = None) -> U3SRun:
    """Embed the window prior (unless ``use_prior`` is off) and train every wavelength."""
    cfg = scn.cfg
    tcfg = cfg.training()
    prior = window_prior(scn, m)
    net0 = fresh_network(cfg)
    embed_losses: list[float] = []
    if use_prior:
        res = embed_prior(net0, prior.image, tcfg, cfg.embed_iterations)
        init, embedded, embed_losses = res.net, res.net, res.losses
    else:
        init, embedded = net0, None
    sl = reconstruct_slice(
        init,
        scn.schedule,
        scn.acquisition.sparse,
        m,
        tcfg,
        scn.grid,
        data_scale=prior.scale,
        iterations=iterations,
        jobs=jobs,
    )
    return U3SRun(prior, embedded, embed_losses, sl)


def score(images: list[np.ndarray], refs: list[np.ndarray]) -> list[tuple[float, float]]:
    return [(psnr(x, r), ssim(x, r)) for x, r in zip(images, refs)]


def unmix_dice(images, refs, lib: SpectralLibrary, threshold: float) -> tuple[float, float]:
    """Dice of thresholded Hb and HbO2 maps against the reference's maps."""
    o, d = unmix(np.maximum(np.asarray(images), 0), lib)
    ro, rd = unmix(np.maximum(np.asarray(refs), 0), lib)
    return (
        dice(concentration_mask(d, threshold), concentration_mask(rd, threshold)),
        dice(concentration_mask(o, threshold), concentration_mask(ro, threshold)),
    )


@dataclass
class ComparisonReport:
    rows: list[dict]
    means: dict[str, tuple[float, float]]
    images: dict[str, list[np.ndarray]]
    wavelengths: list[float]
    runs: dict[str, U3SRun]
    margins: tuple[float, float] = (2.0, 0.03)

    def verdict(self) -> bool:
        dp, ds = self.margins
        u, n, s = self.means["u3s"], self.means["u3s-noprior"], self.means["ss"]
        return u[0] - n[0] >= dp and n[0] - s[0] >= dp and u[1] - n[1] >= ds and n[1] - s[1] >= ds

    def summary(self) -> str:
        lines = [f"{'method':<12} {'psnr_db':>8} {'ssim':>7}"]
        for name in ("ss", "u3s-noprior", "u3s"):
            p, s = self.means[name]
            lines.append(f"{name:<12} {p:8.2f} {s:7.4f}")
        lines.append("ordering U3S > U3S-noprior > SS: " + ("pass" if self.verdict() else "fail"))
        return "\n".join(lines)


def run_method_comparison(
    cfg: ExperimentConfig, jobs: int = 1, scenario: Scenario | None = None
) -> ComparisonReport:
    """Per-wavelength PSNR/SSIM of SS, U3S-noprior and U3S against DS at the centre slice."""
    m = cfg.center_slice
    scn = scenario or simulate(cfg, [m])
    ref = ds_images(scn, m)
    wl = list(scn.schedule.wavelengths)
    images: dict[str, list[np.ndarray]] = {"ds": ref, "ss": ss_images(scn, m)}
    runs = {}
    for name, use_prior in (("u3s", True), ("u3s-noprior", False)):
        t0 = time.perf_counter()
        run = run_u3s(scn, m, use_prior, jobs)
        log.info("%s trained in %.1f s", name, time.perf_counter() - t0)
        runs[name] = run
        images[name] = run.slice.images
    rows, means = [], {}
    for name in ("ss", "u3s-noprior", "u3s"):
        scores = score(images[name], ref)
        d_hb, d_o = unmix_dice(images[name], ref, scn.lib, cfg.mask_threshold)
        for w, (p, s) in zip(wl, scores):
            rows.append(dict(method=name, slice=m, wavelength=w, psnr_db=p, ssim=s, dice_hb=d_hb, dice_hbo2=d_o))
        means[name] = (float(np.mean([p for p, _ in scores])), float(np.mean([s for _, s in scores])))
    return ComparisonReport(rows, means, images, wl, runs)


def degenerate_check(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Zero slice spacing: neighbour-wavelength quality versus the centre wavelength."""
    cfg = cfg.replace(slice_spacing=0.0)
    m = cfg.center_slice
    scn = simulate(cfg, [m], with_ss=False)
    ref = ds_images(scn, m)
    run = run_u3s(scn, m, True, jobs)
    center_nm = scn.schedule.record(m).wavelength_nm
    per = {w: psnr(x, r) for w, x, r in zip(run.slice.wavelengths, run.slice.images, ref)}
    center = per[center_nm]
    gaps = {w: center - p for w, p in per.items() if w != center_nm}
    return dict(center_nm=center_nm, psnr=per, gaps=gaps, max_gap=max(abs(g) for g in gaps.values()))


SWEEP_AXES = ("slice_spacing", "num_elements", "depth", "width")


def _axis_change(cfg: ExperimentConfig, axis: str, value: float) -> dict:
    if axis == "slice_spacing":
        # keep the centre slice at the same depth so only the spacing changes
        zc = cfg.z_start + (cfg.center_slice - 1) * cfg.slice_spacing
        return {"slice_spacing": float(value), "z_start": zc - (cfg.center_slice - 1) * float(value)}
    if axis == "num_elements":
        return {"num_elements_sparse": int(value)}
    if axis in ("depth", "width"):
        return {axis: int(value)}
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def run_sweep(
    cfg: ExperimentConfig,
    axis: str,
    values: list[float],
    iterations: int | None = None,
    train: bool = True,
) -> list[dict]:
    """One row per value (sorted): prior PSNR plus centre-wavelength U3S PSNR/SSIM vs DS.

    Prior PSNR compares the un-normalised fused UBP with the centre slice's
    mean-spectral image. A slice-spacing sweep keeps the centre slice at the
    base config's depth. Only the centre wavelength is trained, which keeps
    a sweep point to a single training run.
    """
    for v in values:
        _axis_change(cfg, axis, v)
    rows = []
    for v in sorted(values):
        c = cfg.replace(**_axis_change(cfg, axis, v))
        m = c.center_slice
        scn = simulate(c, [m], with_ss=False)
        prior = window_prior(scn, m)
        raw = prior.image * prior.scale + prior.lo
        row = dict(axis=axis, value=v, prior_psnr_db=psnr(raw, scn.mean_spectral(m)))
        if train:
            tcfg = c.training()
            rec = scn.schedule.record(m)
            k = scn.schedule.wavelengths.index(rec.wavelength_nm)
            ref = ds_images(scn, m)[k]
            net = embed_prior(fresh_network(c), prior.image, tcfg, c.embed_iterations).net
            sino = scn.acquisition.sparse[m - 1]
            op = ForwardOperator(scn.grid, sino.geometry, sino.time)
            _, img = train_center(net, op, sino.samples / prior.scale, tcfg, iterations)
            img = img * prior.scale
            row.update(psnr_db=psnr(img, ref), ssim=ssim(img, ref))
        log.info("sweep %s=%s: %s", axis, v, row)
        rows.append(row)
    return rows


def spearman(values, scores) -> float:
    rho = spearmanr(values, scores).statistic
    return float(rho) if not math.isnan(rho) else 0.0
