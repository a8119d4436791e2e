"""Command-line driver.

Subcommands share one output directory (``--out``, else ``$U3S_OUT_DIR``,
else ``./u3s_out``). ``acquire`` stores the config, schedule and sinograms
there; later steps read them back, so a pipeline is

    u3s acquire --preset desk
    u3s prior --slice 8
    u3s reconstruct --method u3s --slice 8
    u3s evaluate --slice 8

Every invocation writes ``manifest_<subcommand>.json`` next to its outputs.
Exit codes: 0 success, 1 numeric or data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import io as fio
from .config import ConfigError, ExperimentConfig, load_config, preset
from .experiments import (
    SWEEP_AXES,
    MissingReferenceError,
    fresh_network,
    run_method_comparison,
    run_sweep,
    score,
    unmix_dice,
)
from .geometry import GeometryError, ScheduleError, SpiralSchedule
from .inr import DivergenceError, NumericError, embed_prior, reconstruct_slice
from .phantom import SpectralLibrary, acquire_fixed, acquire_u3s, default_phantom, render_slice
from .physics import ubp_reconstruct
from .prior import PriorImage, build_prior, fuse_window
from .unmix import ConditioningError, unmix

log = logging.getLogger("u3spat")

OUT_ENV = "U3S_OUT_DIR"
DEFAULT_OUT = "u3s_out"


class UsageError(Exception):
    pass


# layout inside the output directory


def _sparse_path(out: Path, m: int) -> Path:
    return out / "sinograms" / "sparse" / f"m{m:03d}.u3ssino"


def _fixed_path(out: Path, kind: str, m: int, w: float) -> Path:
    return out / "sinograms" / kind / f"m{m:03d}_{w:g}nm.u3ssino"


def _prior_path(out: Path, m: int) -> Path:
    return out / "priors" / f"prior_m{m:03d}.u3simg"


def _net_path(out: Path, tag: str) -> Path:
    return out / "networks" / f"{tag}.u3snet"


def _image_path(out: Path, method: str, m: int, w: float) -> Path:
    return out / "images" / method / f"m{m:03d}_{w:g}nm.u3simg"


# helpers


class Run:
    """Resolved config, output directory and the list of files written."""

    def __init__(self, args, cfg: ExperimentConfig, out: Path):
        self.args = args
        self.cfg = cfg
        self.out = out
        self.written: list[Path] = []

    def write(self, path: Path) -> Path:
        self.written.append(path)
        return path

    def manifest(self) -> Path:
        files = {}
        for p in self.written:
            files[str(p.relative_to(self.out))] = hashlib.sha256(p.read_bytes()).hexdigest()
        doc = {
            "subcommand": self.args.command,
            "argv": sys.argv[1:],
            "config_sha256": self.cfg.digest(),
            "preset": self.cfg.preset,
            "seed": self.cfg.seed,
            "versions": {
                "u3spat": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "outputs": files,
        }
        path = self.out / f"manifest_{self.args.command}.json"
        return fio.atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def resolve_out(flag: str | None) -> Path:
    return Path(flag or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def resolve_config(args, out: Path) -> ExperimentConfig:
    base = preset(args.preset) if args.preset else None
    if args.config:
        cfg = load_config(args.config, base)
    elif base is not None:
        cfg = base
    elif (out / "config.ini").exists():
        cfg = load_config(out / "config.ini")
    else:
        cfg = preset("desk")
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _load_sparse(run: Run) -> list:
    cfg = run.cfg
    sinos = []
    for m in range(1, cfg.num_slices + 1):
        p = _sparse_path(run.out, m)
        if not p.exists():
            raise FileNotFoundError(f"{p} missing; run `acquire` first")
        sinos.append(fio.load_sinogram(p))
    return sinos


def _load_fixed(run: Run, kind: str, m: int) -> list:
    out = []
    for w in run.cfg.wavelengths:
        p = _fixed_path(run.out, kind, m, w)
        if not p.exists():
            if kind == "dense":
                raise MissingReferenceError(f"no dense reference at slice {m} ({p}); acquire with --slices {m}")
            raise FileNotFoundError(f"{p} missing; run `acquire` first")
        out.append(fio.load_sinogram(p))
    return out


def _schedule(run: Run) -> SpiralSchedule:
    p = run.out / "schedule.txt"
    return SpiralSchedule.load(p) if p.exists() else run.cfg.schedule()


def _slice_arg(run: Run) -> int:
    return run.cfg.center_slice if run.args.slice is None else run.args.slice


def _prior(run: Run, m: int, sinos=None) -> PriorImage:
    p = _prior_path(run.out, m)
    if p.exists():
        img, prov = fio.load_image(p)
        return PriorImage(img, float(prov["lo"]), float(prov["hi"]), int(prov["center"]))
    sinos = sinos if sinos is not None else _load_sparse(run)
    return build_prior(fuse_window(sinos, _schedule(run), m), run.cfg.grid())


def _load_images(run: Run, method: str, m: int) -> list[np.ndarray]:
    imgs = []
    for w in run.cfg.wavelengths:
        p = _image_path(run.out, method, m, w)
        if not p.exists():
            raise FileNotFoundError(f"{p} missing; run `reconstruct --method {method} --slice {m}` first")
        imgs.append(fio.load_image(p)[0])
    return imgs


# subcommands


def cmd_config(run: Run) -> None:
    text = run.cfg.dump()
    if run.args.dump:
        sys.stdout.write(text)
    if run.args.write:
        run.write(fio.atomic_write(run.args.write, text))


def cmd_phantom(run: Run) -> None:
    cfg = run.cfg
    ph = default_phantom(cfg.phantom_seed, fov=cfg.fov)
    path = run.write(fio.atomic_write(run.out / "phantom.ini", ph.to_text()))
    lib = SpectralLibrary.default().subset(cfg.wavelengths)
    run.write(fio.atomic_write(run.out / "spectra.txt", lib.to_text()))
    print(f"phantom: {len(ph.primitives)} primitives -> {path}")


def cmd_schedule(run: Run) -> None:
    sched = run.cfg.schedule()
    path = run.write(fio.atomic_write(run.out / "schedule.txt", sched.to_text()))
    print(f"rotation step {sched.rotation_step:.3f} deg, pitch {run.cfg.sparse_geometry().pitch:.3f} deg")
    print(f"{'m':>3} {'z_mm':>8} {'lambda_nm':>9} {'theta_deg':>10}")
    for r in sched.records:
        print(f"{r.slice_index:3d} {r.z_mm:8.3f} {r.wavelength_nm:9.1f} {r.theta_deg:10.3f}")
    log.info("schedule written to %s", path)


def cmd_acquire(run: Run) -> None:
    cfg = run.cfg
    out = run.out
    run.write(fio.atomic_write(out / "config.ini", cfg.dump()))
    sched = cfg.schedule()
    run.write(fio.atomic_write(out / "schedule.txt", sched.to_text()))
    lib = SpectralLibrary.default().subset(cfg.wavelengths)
    ph = default_phantom(cfg.phantom_seed, fov=cfg.fov)
    grid, tg = cfg.grid(), cfg.time_grid()
    slices = run.args.slices or [cfg.center_slice]
    dense_geom = None if run.args.no_dense else cfg.dense_geometry()
    acq = acquire_u3s(ph, sched, cfg.sparse_geometry(), grid, tg, lib, dense_geom, slices)
    for m, s in enumerate(acq.sparse, start=1):
        run.write(fio.save_sinogram(_sparse_path(out, m), s))
    for m, sinos in acq.dense.items():
        for s in sinos:
            run.write(fio.save_sinogram(_fixed_path(out, "dense", m, s.wavelength_nm), s))
    ss = acquire_fixed(ph, sched, cfg.sparse_geometry(), grid, tg, lib, slices)
    for m, sinos in ss.items():
        for s in sinos:
            run.write(fio.save_sinogram(_fixed_path(out, "ss", m, s.wavelength_nm), s))
    for m in slices:
        z = sched.record(m).z_mm
        for w in cfg.wavelengths:
            run.write(fio.save_image(_image_path(out, "truth", m, w), render_slice(ph, z, w, lib, grid)))
    print(f"acquired {len(acq.sparse)} sparse sinograms, references at slices {list(slices)}")


def cmd_prior(run: Run) -> None:
    cfg = run.cfg
    sinos = _load_sparse(run)
    sched = _schedule(run)
    slices = [run.args.slice] if run.args.slice is not None else sched.interior_slices()
    for m in slices:
        pr = build_prior(fuse_window(sinos, sched, m), cfg.grid())
        prov = dict(
            center=m,
            slice_spacing=cfg.slice_spacing,
            num_elements=cfg.num_elements_sparse,
            num_wavelengths=cfg.num_wavelengths,
            lo=repr(pr.lo),
            hi=repr(pr.hi),
        )
        run.write(fio.save_image(_prior_path(run.out, m), pr.image, prov))
    print(f"priors for slices {slices}")


def _embed(run: Run, m: int, prior: PriorImage):
    cfg = run.cfg
    res = embed_prior(fresh_network(cfg), prior.image, cfg.training(), cfg.embed_iterations)
    run.write(fio.save_network(_net_path(run.out, f"embedded_m{m:03d}"), res.net))
    run.write(fio.save_losses(run.out / "losses" / f"embed_m{m:03d}.csv", res.losses))
    return res


def cmd_embed(run: Run) -> None:
    m = _slice_arg(run)
    res = _embed(run, m, _prior(run, m))
    print(f"embedded prior of slice {m}: loss {res.losses[0]:.4g} -> {res.final_loss:.4g}")


def cmd_reconstruct(run: Run) -> None:
    cfg = run.cfg
    m = _slice_arg(run)
    method = run.args.method
    if method in ("ds", "ss"):
        kind = "dense" if method == "ds" else "ss"
        for s in _load_fixed(run, kind, m):
            img = ubp_reconstruct([s], cfg.grid())
            run.write(fio.save_image(_image_path(run.out, method, m, s.wavelength_nm), img))
        print(f"{method}: UBP images at slice {m}")
        return
    sinos = _load_sparse(run)
    prior = _prior(run, m, sinos)
    if method == "u3s":
        init = _embed(run, m, prior).net
    else:
        init = fresh_network(cfg)
    sl = reconstruct_slice(
        init, _schedule(run), sinos, m, cfg.training(), cfg.grid(), prior.scale, jobs=run.args.jobs
    )
    for w, img, res in zip(sl.wavelengths, sl.images, sl.results):
        run.write(fio.save_image(_image_path(run.out, method, m, w), img))
        tag = f"{method}_m{m:03d}_{w:g}nm"
        run.write(fio.save_network(_net_path(run.out, tag), res.net))
        run.write(fio.save_losses(run.out / "losses" / f"{tag}.csv", res.losses))
    print(f"{method}: {len(sl.images)} images at slice {m}")


def cmd_unmix(run: Run) -> None:
    cfg = run.cfg
    m = _slice_arg(run)
    lib = SpectralLibrary.default().subset(cfg.wavelengths)
    stack = np.maximum(np.asarray(_load_images(run, run.args.method, m)), 0)
    o, d = unmix(stack, lib)
    base = run.out / "unmix" / run.args.method
    run.write(fio.save_image(base / f"m{m:03d}_hbo2.u3simg", o))
    run.write(fio.save_image(base / f"m{m:03d}_hb.u3simg", d))
    print(f"unmixed {run.args.method} at slice {m}")


def cmd_evaluate(run: Run) -> None:
    cfg = run.cfg
    m = _slice_arg(run)
    lib = SpectralLibrary.default().subset(cfg.wavelengths)
    ref = _load_images(run, "ds", m)
    rows = []
    for method in run.args.methods:
        try:
            imgs = _load_images(run, method, m)
        except FileNotFoundError:
            log.warning("no %s images at slice %d, skipped", method, m)
            continue
        d_hb, d_o = unmix_dice(imgs, ref, lib, cfg.mask_threshold)
        for w, (p, s) in zip(cfg.wavelengths, score(imgs, ref)):
            rows.append(dict(method=method, slice=m, wavelength=w, psnr_db=p, ssim=s, dice_hb=d_hb, dice_hbo2=d_o))
            print(f"{method:<12} {w:6.0f} nm  psnr {p:7.2f} dB  ssim {s:.4f}")
    run.write(fio.save_metrics(run.out / f"metrics_m{m:03d}.csv", rows))


def cmd_compare(run: Run) -> None:
    rep = run_method_comparison(run.cfg, jobs=run.args.jobs)
    run.write(fio.save_metrics(run.out / "comparison.csv", rep.rows))
    print(rep.summary())
    if not rep.verdict():
        log.warning("method ordering verdict: fail")


def cmd_sweep(run: Run) -> None:
    try:
        values = [float(v) for v in run.args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated numbers: {exc}") from exc
    if not values:
        raise UsageError("--values is empty")
    rows = run_sweep(run.cfg, run.args.axis, values, run.args.iterations, train=not run.args.prior_only)
    header = ["axis", "value", "prior_psnr_db", "psnr_db", "ssim"]
    run.write(
        fio.save_table(
            run.out / f"sweep_{run.args.axis}.csv", header, ([r.get(k, "") for k in header] for r in rows)
        )
    )
    for r in rows:
        print(", ".join(f"{k}={r[k]}" for k in header if k in r))


def cmd_export_png(run: Run) -> None:
    src = Path(run.args.input)
    files = sorted(src.rglob("*.u3simg")) if src.is_dir() else [src]
    if not files:
        raise FileNotFoundError(f"no .u3simg files under {src}")
    for f in files:
        img, _ = fio.load_image(f)
        run.write(fio.save_png(f.with_suffix(".png"), img))
    print(f"exported {len(files)} png files")


COMMANDS = {
    "config": cmd_config,
    "phantom": cmd_phantom,
    "schedule": cmd_schedule,
    "acquire": cmd_acquire,
    "prior": cmd_prior,
    "embed": cmd_embed,
    "reconstruct": cmd_reconstruct,
    "unmix": cmd_unmix,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "export-png": cmd_export_png,
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="config file (sections of key = value)")
    common.add_argument("--preset", choices=["desk", "paper", "ci"], help="start from a named preset")
    common.add_argument("--seed", type=int, help="network seed (overrides config)")
    common.add_argument("--jobs", type=int, default=1, help="parallel training jobs")
    common.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="u3s", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("config", parents=[common], help="print or write the resolved config")
    s.add_argument("--dump", action="store_true", help="print every key with its value")
    s.add_argument("--write", metavar="PATH", help="write the resolved config to PATH")

    sub.add_parser("phantom", parents=[common], help="write the phantom description and spectra")
    sub.add_parser("schedule", parents=[common], help="emit the spiral schedule")

    s = sub.add_parser("acquire", parents=[common], help="simulate sparse sinograms and references")
    s.add_argument("--slices", type=_int_list, help="slices with DS/SS references (default centre slice)")
    s.add_argument("--no-dense", action="store_true", help="skip the dense reference")

    s = sub.add_parser("prior", parents=[common], help="fused prior image per window")
    s.add_argument("--slice", type=int, help="window centre (default every interior slice)")

    s = sub.add_parser("embed", parents=[common], help="fit a network to a window prior")
    s.add_argument("--slice", type=int)

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct every wavelength at one slice")
    s.add_argument("--method", choices=["ds", "ss", "u3s", "u3s-noprior"], required=True)
    s.add_argument("--slice", type=int)

    s = sub.add_parser("unmix", parents=[common], help="HbO2/Hb maps from reconstructed images")
    s.add_argument("--method", choices=["ds", "ss", "u3s", "u3s-noprior", "truth"], default="u3s")
    s.add_argument("--slice", type=int)

    s = sub.add_parser("evaluate", parents=[common], help="metrics CSV against the DS reference")
    s.add_argument("--slice", type=int)
    s.add_argument("--methods", type=lambda t: t.split(","), default=["ss", "u3s-noprior", "u3s"])

    sub.add_parser("compare", parents=[common], help="full SS / U3S-noprior / U3S comparison")

    s = sub.add_parser("sweep", parents=[common], help="vary one axis and record metrics")
    s.add_argument("--axis", choices=SWEEP_AXES, required=True)
    s.add_argument("--values", required=True, help="comma-separated axis values")
    s.add_argument("--iterations", type=int, help="training iterations per point")
    s.add_argument("--prior-only", action="store_true", help="only score the fused prior")

    s = sub.add_parser("export-png", parents=[common], help="convert .u3simg files to PNG")
    s.add_argument("input", help="image file or directory")
    return p


NUMERIC_ERRORS = (
    DivergenceError,
    NumericError,
    ConditioningError,
    FloatingPointError,
    MissingReferenceError,
    GeometryError,
    ScheduleError,
    fio.FormatError,
    FileNotFoundError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    out = resolve_out(args.out)
    try:
        cfg = resolve_config(args, out)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        run = Run(args, cfg, out)
        COMMANDS[args.command](run)
        if args.command != "config" or run.written:
            run.manifest()
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"u3s: error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"u3s: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
