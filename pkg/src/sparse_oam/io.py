"""File formats: float32 grids with JSON sidecars, scan bundles, ensemble
checkpoints, metric reports, endmember spectra and image renders.

Every binary file ``<stem>.f32`` holds little-endian 32-bit floats in
row-major order and is described by ``<stem>.json``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .analyze import EndmemberSet, MetricsReport, clahe
from .forward import NoiseModel, ScanPattern, SparseScan
from .grid import GridSpec, HyperCube, Image
from .inference import MGVIConfig, PosteriorEnsemble
from .prior import PriorConfig

F32 = np.dtype("<f4")


class FormatError(ValueError):
    """A file or manifest does not follow the expected layout."""


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".f32", ".json") else path


def write_json(path, obj: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def write_f32(path, values: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(values, dtype=F32).tobytes())
    return path


def read_f32(path, count: int) -> np.ndarray:
    raw = np.fromfile(Path(path), dtype=F32)
    if raw.size != count:
        raise FormatError(f"{path}: expected {count} float32 values, found {raw.size}")
    return raw.astype(float)


def _spec_fields(spec: GridSpec) -> dict:
    return {"n_rows": spec.n_rows, "m_cols": spec.m_cols, "pixel_size_um": spec.pixel_size}


def _spec_from(manifest: dict) -> GridSpec:
    try:
        return GridSpec(manifest["n_rows"], manifest["m_cols"], manifest["pixel_size_um"])
    except KeyError as exc:
        raise FormatError(f"manifest lacks {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# Dense grids
# ---------------------------------------------------------------------------


def write_grid(path, field: Image | HyperCube, extra: dict | None = None) -> Path:
    """Write ``<stem>.f32`` and its manifest ``<stem>.json``; returns the manifest path."""
    stem = _stem(path)
    manifest = _spec_fields(field.spec)
    if isinstance(field, HyperCube):
        manifest["wavenumbers_cm1"] = list(field.wavenumbers)
        values = field.stack()
    else:
        values = field.values
    manifest["data_file"] = stem.name + ".f32"
    manifest.update(extra or {})
    write_f32(stem.with_suffix(".f32"), values)
    return write_json(stem.with_suffix(".json"), manifest)


def read_grid(path) -> tuple[Image | HyperCube, dict]:
    """Read a grid written by :func:`write_grid`; returns ``(field, manifest)``."""
    stem = _stem(path)
    manifest = read_json(stem.with_suffix(".json"))
    spec = _spec_from(manifest)
    data_file = stem.parent / manifest.get("data_file", stem.name + ".f32")
    wn = manifest.get("wavenumbers_cm1")
    if wn is None:
        return Image(spec, read_f32(data_file, spec.size)), manifest
    values = read_f32(data_file, spec.size * len(wn))
    return HyperCube.from_array(spec, wn, values), manifest


# ---------------------------------------------------------------------------
# Scans
# ---------------------------------------------------------------------------


def scan_manifest(scan: SparseScan) -> dict:
    p = scan.pattern
    out = _spec_fields(scan.spec)
    out.update(stride_w=p.stride_w, pulses_per_pixel=p.pulses_per_pixel,
               pulses_full=p.pulses_full, sigma_v=scan.noise.sigma,
               wavenumber_cm1=scan.wavenumber)
    return out


def write_scan(path, scan: SparseScan, extra: dict | None = None) -> Path:
    stem = _stem(path)
    manifest = scan_manifest(scan)
    manifest["data_file"] = stem.name + ".f32"
    manifest.update(extra or {})
    write_f32(stem.with_suffix(".f32"), scan.data)
    return write_json(stem.with_suffix(".json"), manifest)


def _pattern_from(manifest: dict) -> ScanPattern:
    try:
        return ScanPattern(_spec_from(manifest), manifest["stride_w"],
                           manifest["pulses_per_pixel"], manifest["pulses_full"])
    except KeyError as exc:
        raise FormatError(f"scan manifest lacks {exc.args[0]!r}") from None


def read_scan(path) -> SparseScan:
    stem = _stem(path)
    manifest = read_json(stem.with_suffix(".json"))
    pattern = _pattern_from(manifest)
    data = read_f32(stem.parent / manifest.get("data_file", stem.name + ".f32"),
                    pattern.data_size)
    if "sigma_v" not in manifest:
        raise FormatError("scan manifest lacks 'sigma_v'")
    return SparseScan(pattern, NoiseModel(manifest["sigma_v"]), data,
                      manifest.get("wavenumber_cm1"))


def write_scan_bundle(directory, scans: list[SparseScan], extra: dict | None = None) -> Path:
    """One ``scan_<i>`` file pair per channel plus an index ``bundle.json``."""
    directory = Path(directory)
    names = []
    for i, scan in enumerate(scans):
        write_scan(directory / f"scan_{i}", scan)
        names.append(f"scan_{i}.json")
    index = scan_manifest(scans[0])
    index.pop("wavenumber_cm1")
    index["channels"] = names
    index["wavenumbers_cm1"] = [s.wavenumber for s in scans]
    index.update(extra or {})
    return write_json(directory / "bundle.json", index)


def read_scan_bundle(directory) -> tuple[list[SparseScan], dict]:
    directory = Path(directory)
    index = read_json(directory / "bundle.json")
    if "channels" not in index:
        raise FormatError("bundle.json lacks 'channels'")
    return [read_scan(directory / name) for name in index["channels"]], index


# ---------------------------------------------------------------------------
# Ensemble checkpoints
# ---------------------------------------------------------------------------


def write_ensemble(directory, ens: PosteriorEnsemble) -> Path:
    """Manifest ``ensemble.json`` plus float32 ``mean.f32`` and ``residuals.f32``."""
    directory = Path(directory)
    write_f32(directory / "mean.f32", ens.mean)
    write_f32(directory / "residuals.f32", np.stack(ens.residuals))
    p = ens.pattern
    manifest = {
        "prior": ens.prior_config.to_dict(),
        "pattern": {"stride_w": p.stride_w, "pulses_per_pixel": p.pulses_per_pixel,
                    "pulses_full": p.pulses_full},
        "psf_sigma_um": ens.psf_sigma,
        "mgvi": None if ens.config is None else asdict(ens.config),
        "latent_size": int(ens.mean.size),
        "n_samples": len(ens.residuals),
        "mean_file": "mean.f32",
        "residuals_file": "residuals.f32",
        "diagnostics": ens.diagnostics,
    }
    return write_json(directory / "ensemble.json", manifest)


def read_ensemble(directory) -> PosteriorEnsemble:
    directory = Path(directory)
    manifest = read_json(directory / "ensemble.json")
    try:
        prior = PriorConfig.from_dict(manifest["prior"])
        pattern = ScanPattern(prior.grid, **manifest["pattern"])
        size, count = manifest["latent_size"], manifest["n_samples"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed ensemble manifest: {exc}") from None
    if size != prior.latent_size:
        raise FormatError("latent size does not match the prior configuration")
    mean = read_f32(directory / manifest["mean_file"], size)
    residuals = read_f32(directory / manifest["residuals_file"], size * count).reshape(count, size)
    mgvi = manifest.get("mgvi")
    return PosteriorEnsemble(prior, pattern, mean, list(residuals),
                             manifest.get("psf_sigma_um"),
                             None if mgvi is None else MGVIConfig(**mgvi),
                             manifest.get("diagnostics", {}))


# ---------------------------------------------------------------------------
# Reports and spectra
# ---------------------------------------------------------------------------


def write_report(path, report: MetricsReport, extra: dict | None = None) -> Path:
    out = report.to_dict()
    out.update(extra or {})
    return write_json(path, out)


def read_report(path) -> MetricsReport:
    try:
        return MetricsReport.from_dict(read_json(path))
    except KeyError as exc:
        raise FormatError(f"{path}: report lacks {exc.args[0]!r}") from None


def write_spectrum(path, wavenumbers, values) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.column_stack([wavenumbers, values]), fmt="%.10g",
               header="wavenumber_cm1 value_V")
    return path


def read_spectrum(path) -> tuple[np.ndarray, np.ndarray]:
    """Two-column text file ``wavenumber_cm1 value_V``; ``#`` starts a comment."""
    try:
        table = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if table.shape[1] != 2 or table.shape[0] == 0:
        raise FormatError(f"{path}: expected two columns")
    return table[:, 0], table[:, 1]


def read_endmembers(paths) -> EndmemberSet:
    """One spectrum file per endmember, named after the file stem.

    All files must list the same wavenumbers in the same order.
    """
    names, spectra, grid = [], [], None
    for path in paths:
        wn, values = read_spectrum(path)
        if grid is None:
            grid = wn
        elif wn.shape != grid.shape or not np.allclose(wn, grid):
            raise FormatError(f"{path}: wavenumbers differ from the first spectrum")
        names.append(Path(path).stem)
        spectra.append(values)
    if grid is None:
        raise FormatError("no endmember files given")
    return EndmemberSet(tuple(names), np.array(spectra), tuple(grid))


# ---------------------------------------------------------------------------
# Renders
# ---------------------------------------------------------------------------


def _unit(values: np.ndarray, symmetric: bool = False) -> np.ndarray:
    if symmetric:
        bound = float(np.max(np.abs(values)))
        return np.full(values.shape, 0.5) if bound == 0 else 0.5 + 0.5 * values / bound
    lo, hi = float(values.min()), float(values.max())
    return np.zeros(values.shape) if hi == lo else (values - lo) / (hi - lo)


def _diverging(unit: np.ndarray) -> np.ndarray:
    """Blue-white-red map on [0, 1] with white at 0.5."""
    t = 2.0 * unit - 1.0
    rgb = np.empty(unit.shape + (3,))
    neg, pos = np.clip(-t, 0, 1), np.clip(t, 0, 1)
    rgb[..., 0] = 1.0 - neg
    rgb[..., 1] = 1.0 - np.maximum(neg, pos)
    rgb[..., 2] = 1.0 - pos
    return rgb


def render(path, img: Image, scaling: str = "minmax", colormap: str = "gray",
           bits: int = 8) -> Path:
    """Save an image as PNG or PGM (chosen by suffix).

    ``scaling`` is ``"minmax"``, ``"clahe"`` or ``"symmetric"`` (zero maps
    to mid-scale). ``colormap`` is ``"gray"`` (lightness-linear single hue)
    or ``"diverging"``; diverging renders are 8-bit RGB PNGs.
    """
    path = Path(path)
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    if scaling == "clahe":
        unit = clahe(img).values
        unit = _unit(unit) if unit is img.values else unit
    elif scaling in ("minmax", "symmetric"):
        unit = _unit(img.values, symmetric=scaling == "symmetric")
    else:
        raise ValueError(f"unknown scaling {scaling!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    if colormap == "diverging":
        if path.suffix.lower() != ".png":
            raise ValueError("diverging renders must be PNG")
        rgb = np.rint(255 * _diverging(unit)).astype(np.uint8)
        PILImage.fromarray(rgb, "RGB").save(path)
    elif colormap == "gray":
        if bits == 8:
            PILImage.fromarray(np.rint(255 * unit).astype(np.uint8), "L").save(path)
        else:
            _save_gray16(path, np.rint(65535 * unit).astype(np.uint16))
    else:
        raise ValueError(f"unknown colormap {colormap!r}")
    return path


def _save_gray16(path: Path, values: np.ndarray):
    if path.suffix.lower() == ".pgm":
        n, m = values.shape
        path.write_bytes(f"P5\n{m} {n}\n65535\n".encode() + values.astype(">u2").tobytes())
    else:
        PILImage.fromarray(values.astype(np.uint16)).save(path)


def render_overlay(path, base: Image, highlight: Image) -> Path:
    """Gray ``base`` with ``|highlight|`` blended in red; 8-bit RGB PNG."""
    gray = _unit(base.values)
    alpha = _unit(np.abs(highlight.values))
    rgb = np.stack([gray * (1 - alpha) + alpha, gray * (1 - alpha), gray * (1 - alpha)], -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.rint(255 * rgb).astype(np.uint8), "RGB").save(path)
    return path


def read_render(path) -> np.ndarray:
    """Pixel values of a render as an integer array."""
    return np.asarray(PILImage.open(path))


def json_safe(value):
    """Replace non-finite floats (not valid JSON) by ``None``, recursively."""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value
