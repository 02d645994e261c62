"""Command-line pipelines: phantom -> scan -> reconstruct -> evaluate/unmix/report.

Every subcommand reads an optional JSON config (``--config``) whose keys are
the long flag names with dashes replaced by underscores; flags given on the
command line win. Unknown config keys are rejected.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .analyze import backprojection_display, evaluate, mrsd, unmix_cube
from .forward import (DARK_NOISE_SIGMA_V, DEFAULT_PSF_SIGMA_UM, ForwardOperator,
                      ScanPattern, SparseScan, sparsity_fraction)
from .grid import GridSpec, HyperCube, Image, resample_bilinear
from .inference import (MGVIConfig, NumericalFailure, PRESETS, PosteriorEnsemble,
                        posterior_statistics, run_mgvi)
from .prior import PriorConfig, choose_scale_r
from .simulate import PHANTOM_KINDS, TimingModel, acquire, acquisition_time, make_phantom

log = logging.getLogger("sparse_oam")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--config", type=Path, help="JSON file with defaults for these flags")
    p.add_argument("--out", type=Path, help=out_help)
    p.add_argument("--seed", type=int, help="random seed (default 0)")


def _add_mgvi(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="MGVI schedule: full = 5 iterations x 16 samples, approx = 3 x 8")
    p.add_argument("--jobs", type=int, help="channels reconstructed in parallel (default 1)")
    p.add_argument("--psf-sigma-um", type=float, help="PSF standard deviation in um")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-oam", description="Sparse raster-scan optoacoustic reconstruction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="synthesize a ground-truth grid")
    _common(p, "output stem (writes <stem>.f32 and <stem>.json)")
    p.add_argument("--kind", choices=PHANTOM_KINDS)
    p.add_argument("--n", type=int, help="number of scan lines")
    p.add_argument("--m", type=int, help="pixels per line")
    p.add_argument("--pixel-um", type=float, help="pixel pitch in um")
    p.add_argument("--peak-v", type=float, help="maximum signal in V")
    p.add_argument("--latent", choices=("random", "zero"),
                   help="prior-draw only: random or all-zero latent")
    p.add_argument("--endmembers", nargs="+", type=Path,
                   help="two-column spectrum files; makes a hyperspectral cube")

    p = sub.add_parser("scan", help="simulate a (sparse) raster scan of a truth grid")
    _common(p, "output directory for the scan bundle")
    p.add_argument("--truth", type=Path, help="truth grid (.json or .f32)")
    p.add_argument("--stride", type=int, help="measure every stride-th line")
    p.add_argument("--pulses", type=int, help="pulses averaged per pixel")
    p.add_argument("--pulses-full", type=int, help="pulses per pixel of the full scan")
    p.add_argument("--noise-sigma-v", type=float,
                   help="noise of a fully averaged datum in V (0 = noiseless)")
    p.add_argument("--psf-sigma-um", type=float, help="PSF standard deviation in um")

    p = sub.add_parser("reconstruct", help="run MGVI on a scan bundle")
    _common(p, "output directory")
    _add_mgvi(p)
    p.add_argument("--scan", type=Path, help="scan bundle directory")

    p = sub.add_parser("evaluate", help="compare a reconstruction with ground truth")
    _common(p, "report JSON path")
    p.add_argument("--mean", type=Path, help="posterior mean grid")
    p.add_argument("--std", type=Path, help="posterior std grid")
    p.add_argument("--truth", type=Path, help="ground-truth grid")
    p.add_argument("--bins", type=int, help="RSD histogram bins (default 50)")

    p = sub.add_parser("unmix", help="non-negative linear unmixing of a cube")
    _common(p, "output directory")
    p.add_argument("--cube", type=Path, help="hyperspectral grid")
    p.add_argument("--endmembers", nargs="+", type=Path, help="two-column spectrum files")

    p = sub.add_parser("report", help="sparsity sweep on one phantom")
    _common(p, "output directory")
    _add_mgvi(p)
    p.add_argument("--kind", choices=PHANTOM_KINDS)
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--pixel-um", type=float)
    p.add_argument("--strides", type=int, nargs="+", help="line strides to compare")
    p.add_argument("--pulses", type=int)
    p.add_argument("--pulses-full", type=int)
    p.add_argument("--noise-sigma-v", type=float)
    return parser


# Defaults for every key a subcommand accepts; keys that have no flag are
# config-only (nested dictionaries).
DEFAULTS = {
    "phantom": {"out": None, "seed": 0, "kind": "cells", "n": 256, "m": 256, "pixel_um": 5.0,
                "peak_v": 0.1, "latent": "random", "endmembers": None, "params": {}},
    "scan": {"out": None, "seed": 0, "truth": None, "stride": 4, "pulses": 15,
             "pulses_full": 50, "noise_sigma_v": DARK_NOISE_SIGMA_V,
             "psf_sigma_um": DEFAULT_PSF_SIGMA_UM, "timing": {}},
    "reconstruct": {"out": None, "seed": 0, "scan": None, "preset": "full", "jobs": 1,
                    "psf_sigma_um": DEFAULT_PSF_SIGMA_UM, "mgvi": {}, "prior": {}},
    "evaluate": {"out": None, "seed": 0, "mean": None, "std": None, "truth": None,
                 "bins": 50},
    "unmix": {"out": None, "seed": 0, "cube": None, "endmembers": None},
    "report": {"out": None, "seed": 0, "kind": "cells", "n": 256, "m": 256, "pixel_um": 5.0,
               "strides": [2, 4, 8], "pulses": 15, "pulses_full": 50,
               "noise_sigma_v": DARK_NOISE_SIGMA_V, "preset": "full", "jobs": 1,
               "psf_sigma_um": DEFAULT_PSF_SIGMA_UM, "mgvi": {}, "prior": {}, "params": {},
               "timing": {}},
}

PATH_KEYS = {"out", "truth", "scan", "mean", "std", "cube"}


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the JSON config file and command-line flags (in that order)."""
    cfg = dict(DEFAULTS[args.command])
    if args.config is not None:
        raw = io.read_json(args.config)
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(raw) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        base = Path(args.config).parent
        for key, value in raw.items():
            if key in PATH_KEYS and value is not None:
                value = base / value
            elif key == "endmembers" and value is not None:
                value = [base / v for v in value]
            cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key in ("out",) + tuple(k for k in PATH_KEYS if k in cfg):
        if cfg.get(key) is None:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
        cfg[key] = Path(cfg[key])
    for key in ("mgvi", "prior", "params", "timing"):
        if key in cfg and not isinstance(cfg[key], dict):
            raise ConfigError(f"{key} must be a JSON object")
    if cfg.get("jobs", 1) < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


def mgvi_config(cfg: dict, seed: int) -> MGVIConfig:
    allowed = {f.name for f in fields(MGVIConfig)} - {"rng_seed"}
    unknown = set(cfg["mgvi"]) - allowed
    if unknown:
        raise ConfigError(f"unknown mgvi keys: {sorted(unknown)}")
    return MGVIConfig.preset(cfg["preset"], rng_seed=seed, **cfg["mgvi"])


def prior_config(spec: GridSpec, scan: SparseScan, overrides: dict) -> PriorConfig:
    allowed = {f.name for f in fields(PriorConfig)} - {"grid"}
    unknown = set(overrides) - allowed
    if unknown:
        raise ConfigError(f"unknown prior keys: {sorted(unknown)}")
    overrides = dict(overrides)
    r = overrides.pop("r", None) or choose_scale_r(scan)
    return PriorConfig(spec, r=r, **overrides)


def timing_model(overrides: dict) -> TimingModel:
    allowed = {f.name for f in fields(TimingModel)}
    unknown = set(overrides) - allowed
    if unknown:
        raise ConfigError(f"unknown timing keys: {sorted(unknown)}")
    return TimingModel(**overrides)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _phantom_params(cfg: dict, spec: GridSpec) -> dict:
    params = dict(cfg["params"])
    params["peak_v"] = cfg["peak_v"]
    if cfg["kind"] == "prior-draw" and cfg["latent"] == "zero":
        params["latent"] = np.zeros(PriorConfig(spec, r=cfg["peak_v"],
                                                margin=params.get("margin", 3)).latent_size)
    if cfg["endmembers"]:
        endmembers = io.read_endmembers(cfg["endmembers"])
        params["endmembers"] = endmembers
        params.setdefault("wavenumbers", endmembers.wavenumbers)
    return params


def cmd_phantom(cfg: dict) -> dict:
    spec = GridSpec(cfg["n"], cfg["m"], cfg["pixel_um"])
    rng = np.random.default_rng(cfg["seed"])
    phantom = make_phantom(cfg["kind"], spec, rng, _phantom_params(cfg, spec))
    extra = {"kind": cfg["kind"], "seed": cfg["seed"], "peak_v": cfg["peak_v"]}
    if phantom.endmembers is not None:
        extra["endmembers"] = list(phantom.endmembers.names)
    path = io.write_grid(cfg["out"], phantom.truth, extra)
    return {"manifest": str(path)}


def _scan_summary(pattern: ScanPattern, tm: TimingModel) -> dict:
    full = ScanPattern.full(pattern.full_spec, pattern.pulses_full)
    t_sparse = acquisition_time(pattern, tm=tm)
    t_full = acquisition_time(full, tm=tm)
    return {"sparsity_fraction": sparsity_fraction(pattern),
            "acquisition_time_s": t_sparse, "full_acquisition_time_s": t_full,
            "speedup": t_full / t_sparse, "timing": io.json_safe(vars(tm))}


def cmd_scan(cfg: dict) -> dict:
    from .simulate import Phantom

    truth, manifest = io.read_grid(cfg["truth"])
    pattern = ScanPattern(truth.spec, cfg["stride"], cfg["pulses"], cfg["pulses_full"])
    kind = manifest.get("kind", "grain")
    if isinstance(truth, HyperCube):
        from .analyze import EndmemberSet

        # Acquisition only needs the channels; the placeholder spectra keep
        # the phantom type's invariants.
        names = tuple(f"c{i}" for i in range(len(truth)))
        phantom = Phantom(kind, truth, EndmemberSet(names, np.eye(len(truth))))
    else:
        phantom = Phantom(kind, truth)
    scans = acquire(phantom, pattern, cfg["noise_sigma_v"], cfg["psf_sigma_um"],
                    np.random.default_rng(cfg["seed"]))
    summary = _scan_summary(pattern, timing_model(cfg["timing"]))
    summary.update(psf_sigma_um=cfg["psf_sigma_um"], noise_sigma_ref_v=cfg["noise_sigma_v"],
                   seed=cfg["seed"], truth=str(cfg["truth"]))
    path = io.write_scan_bundle(cfg["out"], scans, summary)
    return {"manifest": str(path), **summary}


def _reconstruct_channel(job):
    scan, prior_cfg, mgvi_cfg, psf_sigma = job
    return run_mgvi(scan, prior_cfg, mgvi_cfg, psf_sigma)


def reconstruct_scans(scans: list[SparseScan], cfg: dict) -> list[PosteriorEnsemble]:
    """One MGVI run per channel; channel ``i`` uses seed ``seed + i``."""
    jobs = [(scan, prior_config(scan.spec, scan, cfg["prior"]),
             mgvi_config(cfg, cfg["seed"] + i), cfg["psf_sigma_um"])
            for i, scan in enumerate(scans)]
    n_workers = min(cfg["jobs"], len(jobs))
    if n_workers == 1:
        return [_reconstruct_channel(j) for j in jobs]
    with ProcessPoolExecutor(n_workers) as pool:
        return list(pool.map(_reconstruct_channel, jobs))


def _stack(images: list[Image], wavenumbers) -> Image | HyperCube:
    if len(images) == 1:
        return images[0]
    return HyperCube(images[0].spec, tuple(wavenumbers), tuple(images))


def cmd_reconstruct(cfg: dict) -> dict:
    scans, index = io.read_scan_bundle(cfg["scan"])
    t0 = time.perf_counter()
    ensembles = reconstruct_scans(scans, cfg)
    wall = time.perf_counter() - t0
    out = cfg["out"]
    means, stds, channels = [], [], []
    for i, (scan, ens) in enumerate(zip(scans, ensembles)):
        mean, std = posterior_statistics(ens)
        means.append(mean)
        stds.append(std)
        io.write_ensemble(out / f"ensemble_{i}", ens)
        channels.append({"wavenumber_cm1": scan.wavenumber, "mrsd": mrsd(mean, std),
                         "wall_time_s": ens.diagnostics["wall_time_s"],
                         "kl_history": ens.diagnostics["kl_history"],
                         "cg_failures": ens.diagnostics["cg_failures"],
                         "r": ens.prior_config.r})
    wavenumbers = [s.wavenumber for s in scans]
    io.write_grid(out / "mean", _stack(means, wavenumbers))
    io.write_grid(out / "std", _stack(stds, wavenumbers))
    summary = {"scan": str(cfg["scan"]), "preset": cfg["preset"], "seed": cfg["seed"],
               "jobs": cfg["jobs"], "wall_time_s": wall, "channels": channels,
               "sparsity_fraction": index.get("sparsity_fraction")}
    io.write_json(out / "reconstruction.json", summary)
    return summary


def _aligned(field: Image | HyperCube, spec: GridSpec) -> Image | HyperCube:
    if field.spec == spec:
        return field
    if isinstance(field, HyperCube):
        return HyperCube(spec, field.wavenumbers,
                         tuple(resample_bilinear(c, spec) for c in field.channels))
    return resample_bilinear(field, spec)


def cmd_evaluate(cfg: dict) -> dict:
    mean, _ = io.read_grid(cfg["mean"])
    std, _ = io.read_grid(cfg["std"])
    truth, _ = io.read_grid(cfg["truth"])
    if std.spec != mean.spec:
        raise ConfigError("mean and std grids differ")
    truth = _aligned(truth, mean.spec)
    if isinstance(mean, HyperCube) and isinstance(truth, HyperCube) and len(mean) != len(truth):
        raise ConfigError("mean and truth have different channel counts")
    report = evaluate(mean, std, truth, cfg["bins"])
    io.write_report(cfg["out"], report)
    if report.error is not None:
        io.write_grid(Path(cfg["out"]).with_suffix("").with_name(
            Path(cfg["out"]).stem + "_error"), report.error)
    return report.to_dict()


def cmd_unmix(cfg: dict) -> dict:
    cube, _ = io.read_grid(cfg["cube"])
    if not isinstance(cube, HyperCube):
        raise ConfigError("unmixing needs a hyperspectral grid")
    endmembers = io.read_endmembers(cfg["endmembers"])
    if len(cube) != endmembers.n_channels:
        raise ConfigError(f"cube has {len(cube)} channels but spectra have "
                          f"{endmembers.n_channels} entries")
    if not np.allclose(cube.wavenumbers, endmembers.wavenumbers):
        raise ConfigError("cube and spectra wavenumbers differ")
    result = unmix_cube(cube, endmembers)
    for name, coeff in zip(result.names, result.maps):
        io.write_grid(cfg["out"] / f"map_{name}", Image(cube.spec, coeff))
    summary = {"composition": result.as_dict(), "cube": str(cfg["cube"])}
    io.write_json(cfg["out"] / "unmix.json", summary)
    return summary


def _report_row(w: int, pattern: ScanPattern, scan: SparseScan, ens: PosteriorEnsemble,
                reference: Image, tm: TimingModel, out: Path) -> dict:
    mean, std = posterior_statistics(ens)
    report = evaluate(mean, std, reference)
    folder = out / f"stride_{w}"
    io.write_grid(folder / "mean", mean)
    io.write_grid(folder / "std", std)
    io.write_report(folder / "metrics.json", report)
    io.render(folder / "backprojection.png", backprojection_display(scan), "clahe")
    io.render(folder / "mean.png", mean)
    io.render(folder / "std.png", std)
    signed = Image(mean.spec, mean.values - reference.values)
    io.render(folder / "error.png", signed, "symmetric", "diverging")
    io.render_overlay(folder / "overlay.png", mean, signed)
    summary = _scan_summary(pattern, tm)
    return {"stride_w": w, "sparsity": summary["sparsity_fraction"],
            "speedup": summary["speedup"], "ssim": report.ssim, "mrsd": report.mrsd,
            "mae": report.mae, "max_error": report.max_error,
            "wall_time_s": ens.diagnostics["wall_time_s"]}


TABLE_COLUMNS = ("stride_w", "sparsity", "speedup", "ssim", "mrsd", "mae", "max_error")


def format_table(rows: list[dict]) -> str:
    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |",
             "|" + "---|" * len(TABLE_COLUMNS)]
    for row in rows:
        cells = [str(row["stride_w"])] + [f"{row[c]:.6g}" for c in TABLE_COLUMNS[1:]]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: dict) -> dict:
    spec = GridSpec(cfg["n"], cfg["m"], cfg["pixel_um"])
    if not cfg["strides"]:
        raise ConfigError("strides must not be empty")
    params = dict(cfg["params"])
    phantom = make_phantom(cfg["kind"], spec, np.random.default_rng(cfg["seed"]), params)
    if isinstance(phantom.truth, HyperCube):
        raise ConfigError("report works on single-channel phantoms")
    full = ScanPattern.full(spec, cfg["pulses_full"])
    reference = Image(spec, ForwardOperator(full, cfg["psf_sigma_um"])(phantom.truth.values))
    tm = timing_model(cfg["timing"])
    out = cfg["out"]
    io.write_grid(out / "truth", phantom.truth, {"kind": cfg["kind"], "seed": cfg["seed"]})
    io.write_grid(out / "full_scan", reference)
    io.render(out / "truth.png", phantom.truth)

    patterns, scans = [], []
    for w in sorted(set(cfg["strides"])):
        pattern = ScanPattern(spec, w, cfg["pulses"], cfg["pulses_full"])
        # Every stride sees the same noise realisation seed.
        scan = acquire(phantom, pattern, cfg["noise_sigma_v"], cfg["psf_sigma_um"],
                       np.random.default_rng(cfg["seed"] + 1))[0]
        patterns.append(pattern)
        scans.append(scan)
    ensembles = _reconstruct_all(scans, cfg)
    rows = [_report_row(p.stride_w, p, s, e, reference, tm, out)
            for p, s, e in zip(patterns, scans, ensembles)]
    rows.sort(key=lambda r: r["sparsity"])
    io.write_json(out / "report.json", {"rows": rows, "reference": "noiseless full scan",
                                         "preset": cfg["preset"], "seed": cfg["seed"]})
    (out / "report.md").write_text(format_table(rows))
    return {"rows": rows}


def _reconstruct_all(scans: list[SparseScan], cfg: dict) -> list[PosteriorEnsemble]:
    """Independent runs with the same MGVI seed, parallel over scans."""
    jobs = [(scan, prior_config(scan.spec, scan, cfg["prior"]),
             mgvi_config(cfg, cfg["seed"]), cfg["psf_sigma_um"]) for scan in scans]
    n_workers = min(cfg["jobs"], len(jobs))
    if n_workers == 1:
        return [_reconstruct_channel(j) for j in jobs]
    with ProcessPoolExecutor(n_workers) as pool:
        return list(pool.map(_reconstruct_channel, jobs))


COMMANDS = {"phantom": cmd_phantom, "scan": cmd_scan, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate, "unmix": cmd_unmix, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except NumericalFailure as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
