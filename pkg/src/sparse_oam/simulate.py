"""Virtual scanner: ground-truth phantoms, noisy scans and acquisition timing.

Scans are simulated at the level of the pulse-averaged peak-to-peak datum;
averaging ``p`` pulses scales the noise as ``1 / sqrt(p)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .analyze import EndmemberSet
from .forward import (DARK_NOISE_SIGMA_V, DEFAULT_PSF_SIGMA_UM, SIGMA_FLOOR, ForwardOperator,
                      NoiseModel, ScanPattern, SparseScan)
from .grid import GridSpec, HyperCube, Image
from .prior import CorrelatedField, PriorConfig

PHANTOM_KINDS = ("grain", "cells", "prior-draw")
DEFAULT_PEAK_V = 0.1


def peak_to_peak(transient) -> float:
    """Peak-to-peak amplitude ``max - min`` of a sampled transient."""
    x = np.asarray(transient, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("transient is empty")
    return float(x.max() - x.min())


@dataclass(frozen=True, eq=False)
class Phantom:
    """Ground-truth signal strength field.

    ``truth`` is an :class:`Image` for a single wavenumber or a
    :class:`HyperCube` built as a non-negative mixture of ``endmembers``
    with per-pixel weights ``abundances`` (shape ``(k, n, m)``).
    """

    kind: str
    truth: Image | HyperCube
    endmembers: EndmemberSet | None = None
    abundances: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        arr = self.truth.stack() if isinstance(self.truth, HyperCube) else self.truth.values
        if np.any(arr < 0):
            raise ValueError("phantom values must be non-negative")
        if isinstance(self.truth, HyperCube) and self.endmembers is None:
            raise ValueError("hyperspectral phantoms need their endmember spectra")

    @property
    def spec(self) -> GridSpec:
        return self.truth.spec

    def channels(self) -> list[Image]:
        if isinstance(self.truth, HyperCube):
            return list(self.truth.channels)
        return [self.truth]


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------


def correlation_length(values: np.ndarray) -> float:
    """Lag (pixels) where the axis-averaged autocorrelation first drops to 1/e.

    The autocorrelation is computed without wrap-around; the crossing is
    linearly interpolated between integer lags.
    """
    x = np.asarray(values, dtype=float)
    x = x - x.mean()
    n, m = x.shape
    f = np.fft.rfft2(x, s=(2 * n, 2 * m))
    acf = np.fft.irfft2(np.abs(f) ** 2, s=(2 * n, 2 * m))
    if acf[0, 0] <= 0:
        raise ValueError("field has no variance")
    lags = min(n, m) // 2
    # Unbiased normalization by the overlap size.
    rows = acf[:lags, 0] / (n - np.arange(lags))
    cols = acf[0, :lags] / (m - np.arange(lags))
    profile = 0.5 * (rows / rows[0] + cols / cols[0])
    below = np.nonzero(profile < math.exp(-1.0))[0]
    if below.size == 0:
        return float(lags)
    k = int(below[0])
    p0, p1 = profile[k - 1], profile[k]
    return float(k - 1 + (p0 - math.exp(-1.0)) / (p0 - p1))


def _grain(spec: GridSpec, rng: np.random.Generator, correlation_um: float,
           threshold: float, peak: float) -> np.ndarray:
    target = correlation_um / spec.pixel_size
    if not target > 0:
        raise ValueError("correlation_length must be positive")
    if target > min(spec.shape) / 4:
        raise ValueError("correlation length too large for the grid")
    noise = rng.standard_normal(spec.shape)

    def render(smooth):
        g = gaussian_filter(noise, smooth, mode="wrap")
        g = (g - g.mean()) / g.std()
        v = np.clip(g - threshold, 0.0, None)
        return v / v.max()

    # Gaussian-smoothed white noise crosses 1/e at lag 2*s; thresholding
    # shortens this, so rescale the smoothing width until it matches.
    smooth = target / 2.0
    v = render(smooth)
    for _ in range(8):
        measured = correlation_length(v)
        if abs(measured - target) <= 0.02 * target:
            break
        smooth *= target / measured
        v = render(smooth)
    return peak * v


def _pack_discs(spec: GridSpec, rng: np.random.Generator, r_min: float, r_max: float,
                n_discs: int | None, max_attempts: int,
                shared: float = 0.0) -> list[tuple[float, float, float]]:
    """Random sequential packing of discs (pixel units).

    Neighbours may overlap by at most ``shared`` pixels, so adjacent cells
    can share a wall.
    """
    n, m = spec.shape
    discs: list[tuple[float, float, float]] = []
    failures = 0
    target = math.inf if n_discs is None else n_discs
    while len(discs) < target and failures < max_attempts:
        r = rng.uniform(r_min, r_max)
        y = rng.uniform(-0.5 * r, n - 1 + 0.5 * r)
        x = rng.uniform(-0.5 * r, m - 1 + 0.5 * r)
        if all((y - yy) ** 2 + (x - xx) ** 2 >= (r + rr - shared) ** 2 for yy, xx, rr in discs):
            discs.append((y, x, r))
            failures = 0
        else:
            failures += 1
    if n_discs is not None and len(discs) < n_discs:
        raise ValueError(f"could only place {len(discs)} of {n_discs} discs")
    return discs


def _cells(spec: GridSpec, rng: np.random.Generator, radius_range_um: Sequence[float],
           rim_um: float, levels: Sequence[float], n_discs: int | None,
           edge_sigma_px: float, peak: float) -> tuple[np.ndarray, np.ndarray]:
    """Disc phantom and its cell-interior fraction map."""
    r_min, r_max = (float(v) / spec.pixel_size for v in radius_range_um)
    rim = rim_um / spec.pixel_size
    if not (0 < r_min <= r_max):
        raise ValueError("radius range must satisfy 0 < r_min <= r_max")
    if not 0 < rim < r_min:
        raise ValueError("rim width must be positive and smaller than the minimum radius")
    if 2 * r_min > min(spec.shape):
        raise ValueError("discs do not fit in the grid")
    background, interior, rim_level = levels
    discs = _pack_discs(spec, rng, r_min, r_max, n_discs, max_attempts=5000, shared=rim)

    n, m = spec.shape
    label = np.zeros(spec.shape)  # 0 background, 1 interior, 2 rim
    for y, x, r in discs:
        y0, y1 = max(int(y - r) - 1, 0), min(int(y + r) + 2, n)
        x0, x1 = max(int(x - r) - 1, 0), min(int(x + r) + 2, m)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist = np.hypot(yy - y, xx - x)
        patch = label[y0:y1, x0:x1]
        # Rims drawn last win where neighbours share a wall.
        patch[dist <= r - rim] = 1
        patch[(dist > r - rim) & (dist <= r)] = 2
    inside = (label == 1).astype(float)
    values = np.choose(label.astype(int), [background, interior, rim_level])
    if edge_sigma_px > 0:
        values = gaussian_filter(values, edge_sigma_px, mode="reflect")
        inside = gaussian_filter(inside, edge_sigma_px, mode="reflect")
    return peak * np.clip(values, 0.0, 1.0), np.clip(inside, 0.0, 1.0)


def _prior_draw(spec: GridSpec, rng: np.random.Generator, params: dict, peak: float):
    cfg = PriorConfig(spec, r=peak, margin=int(params.get("margin", 3)))
    model = CorrelatedField(cfg)
    latent = params.get("latent")
    if latent is None:
        psi = np.empty(cfg.latent_size)
        psi[:-4] = rng.standard_normal(cfg.latent_size - 4)
        psi[-4:] = [params.get("a_lat", 0.0), params.get("b_lat", 0.0),
                    params.get("c_lat", 0.0), params.get("s_lat", 0.0)]
    else:
        psi = np.asarray(latent, dtype=float)
    return model.crop(model.image(psi))


_KNOWN_PARAMS = {
    "grain": {"peak_v", "correlation_length", "threshold", "wavenumbers", "endmembers"},
    "cells": {"peak_v", "radius_range", "rim_width", "levels", "n_discs", "edge_sigma_px",
              "wavenumbers", "endmembers"},
    "prior-draw": {"peak_v", "margin", "latent", "a_lat", "b_lat", "c_lat", "s_lat",
                   "wavenumbers", "endmembers"},
}


def make_phantom(kind: str, spec: GridSpec, rng: np.random.Generator,
                 params: dict | None = None) -> Phantom:
    """Synthesize a ground-truth phantom.

    Parameters
    ----------
    kind : {"grain", "cells", "prior-draw"}
    spec : GridSpec
    rng : numpy.random.Generator
    params : dict, optional
        ``peak_v`` (default 0.1 V) for every kind, plus

        * grain: ``correlation_length`` (um, default 4 pixels), ``threshold``
          (in standard deviations of the smoothed noise, default 0).
        * cells: ``radius_range`` (um, default 8-16 pixels), ``rim_width``
          (um, default 2 pixels), ``levels`` (background, interior, rim as
          fractions of ``peak_v``; default 0.4, 0.15, 1.0), ``n_discs``
          (default: pack until placement keeps failing), ``edge_sigma_px``
          (default 0.75).
        * prior-draw: ``a_lat``, ``b_lat``, ``c_lat``, ``s_lat`` fixed scalar
          latents (default 0) with random ``xi``, or a full flat ``latent``.

        Passing ``wavenumbers`` and an :class:`EndmemberSet` as
        ``endmembers`` yields a hyperspectral cube. The structural map ``u``
        (the phantom rescaled to [0, 1]) weights the first endmember and
        ``1 - u`` is split among the rest by smooth random partitions. The
        cube is scaled so its maximum equals ``peak_v``.
    """
    if kind not in PHANTOM_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    params = dict(params or {})
    unknown = set(params) - _KNOWN_PARAMS[kind]
    if unknown:
        raise ValueError(f"unknown {kind} phantom parameters: {sorted(unknown)}")
    peak = float(params.get("peak_v", DEFAULT_PEAK_V))
    if not peak > 0:
        raise ValueError("peak_v must be positive")

    if kind == "grain":
        values = _grain(spec, rng, float(params.get("correlation_length", 4 * spec.pixel_size)),
                        float(params.get("threshold", 0.0)), peak)
    elif kind == "cells":
        radius = params.get("radius_range", (8 * spec.pixel_size, 16 * spec.pixel_size))
        values, _ = _cells(spec, rng, radius,
                           float(params.get("rim_width", 2 * spec.pixel_size)),
                           params.get("levels", (0.4, 0.15, 1.0)), params.get("n_discs"),
                           float(params.get("edge_sigma_px", 0.75)), peak)
    else:
        values = _prior_draw(spec, rng, params, peak)

    if "endmembers" not in params:
        return Phantom(kind, Image(spec, values))
    return _mix(kind, spec, rng, values, params["endmembers"], params.get("wavenumbers"), peak)


def _mix(kind, spec, rng, values, endmembers: EndmemberSet, wavenumbers, peak) -> Phantom:
    spectra = np.asarray(endmembers.spectra, dtype=float)
    k, n_ch = spectra.shape
    if wavenumbers is None or len(wavenumbers) != n_ch:
        raise ValueError("wavenumbers must be given, one per endmember spectrum entry")
    if np.any(spectra < 0):
        raise ValueError("endmember spectra must be non-negative for a physical mixture")
    lo, hi = values.min(), values.max()
    u = (values - lo) / (hi - lo) if hi > lo else np.ones_like(values)
    abundances = np.empty((k, *spec.shape))
    abundances[0] = u
    if k > 1:
        logits = np.stack([gaussian_filter(rng.standard_normal(spec.shape), 4.0, mode="wrap")
                           for _ in range(k - 1)])
        weights = np.exp(logits - logits.max(axis=0))
        weights /= weights.sum(axis=0)
        abundances[1:] = (1.0 - u) * weights
    cube = np.einsum("kc,kij->cij", spectra, abundances)
    scale = peak / cube.max()
    abundances *= scale
    cube = np.einsum("kc,kij->cij", spectra, abundances)
    truth = HyperCube.from_array(spec, wavenumbers, cube)
    return Phantom(kind, truth, endmembers, abundances)


# ---------------------------------------------------------------------------
# Acquisition
# ---------------------------------------------------------------------------


def averaged_noise_sigma(sigma_ref: float, pattern: ScanPattern) -> float:
    """Noise of a datum averaged over ``p`` pulses: ``sigma_ref * sqrt(p_full / p)``."""
    return sigma_ref * math.sqrt(pattern.pulses_full / pattern.pulses_per_pixel)


def acquire(phantom: Phantom, pattern: ScanPattern,
            noise: NoiseModel | float = DARK_NOISE_SIGMA_V,
            psf_sigma: float = DEFAULT_PSF_SIGMA_UM,
            rng: np.random.Generator | None = None) -> list[SparseScan]:
    """Simulate a scan of every phantom channel.

    ``noise`` is the reference (full-averaging) noise level, either as a
    :class:`NoiseModel` or a float; ``0`` gives noiseless data. The noise
    actually added is scaled by ``sqrt(p_full / p)``, while the returned
    scans carry the reference level for use in the likelihood (the floor
    value when noiseless).
    """
    sigma_ref = noise.sigma if isinstance(noise, NoiseModel) else float(noise)
    if not (sigma_ref >= 0 and math.isfinite(sigma_ref)):
        raise ValueError("noise level must be finite and non-negative")
    if phantom.spec != pattern.full_spec:
        raise ValueError(f"phantom grid {phantom.spec} does not match scan grid "
                         f"{pattern.full_spec}")
    if rng is None:
        rng = np.random.default_rng()
    op = ForwardOperator(pattern, psf_sigma)
    sigma_p = averaged_noise_sigma(sigma_ref, pattern)
    recorded = NoiseModel(max(sigma_ref, SIGMA_FLOOR))
    wavenumbers = (phantom.truth.wavenumbers if isinstance(phantom.truth, HyperCube)
                   else (None,))
    scans = []
    for img, wn in zip(phantom.channels(), wavenumbers):
        d = op(img.values)
        if sigma_p > 0:
            d = d + sigma_p * rng.standard_normal(d.size)
        scans.append(SparseScan(pattern, recorded, d, wn))
    return scans


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimingModel:
    """Per-line acquisition time ``max(m p / rep_rate, m dx / v_max) + line_overhead``.

    ``v_max`` (um/s) may be infinite for a purely dwell-limited scanner.
    """

    rep_rate: float = 1e5
    line_overhead: float = 0.0
    v_max: float = math.inf

    def __post_init__(self):
        if not (self.rep_rate > 0 and math.isfinite(self.rep_rate)):
            raise ValueError("rep_rate must be positive")
        if not (self.line_overhead >= 0 and math.isfinite(self.line_overhead)):
            raise ValueError("line_overhead must be non-negative")
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")

    def line_time(self, m_cols: int, pulses: int, pixel_size: float) -> float:
        dwell = m_cols * pulses / self.rep_rate
        travel = m_cols * pixel_size / self.v_max
        return max(dwell, travel) + self.line_overhead


def acquisition_time(pattern: ScanPattern, spec: GridSpec | None = None,
                     tm: TimingModel = TimingModel()) -> float:
    """Seconds needed to acquire ``pattern`` (``spec`` defaults to its grid)."""
    spec = spec or pattern.full_spec
    return pattern.n_lines * tm.line_time(spec.m_cols, pattern.pulses_per_pixel, spec.pixel_size)


def speedup(full: ScanPattern | float, sparse: ScanPattern | float,
            tm: TimingModel = TimingModel()) -> float:
    """Ratio of full to sparse acquisition time (patterns or seconds)."""
    t_full = full if isinstance(full, (int, float)) else acquisition_time(full, tm=tm)
    t_sparse = sparse if isinstance(sparse, (int, float)) else acquisition_time(sparse, tm=tm)
    if not (t_full > 0 and t_sparse > 0):
        raise ValueError("acquisition times must be positive")
    return float(t_full) / float(t_sparse)


def calibrate_timing(t_full: float, t_sparse: float, full: ScanPattern, sparse: ScanPattern,
                     rep_rate: float | None = None) -> TimingModel:
    """Fit a :class:`TimingModel` to two measured acquisition times (seconds).

    With ``rep_rate`` fixed, solves for ``v_max`` and ``line_overhead`` and
    raises ``ValueError`` when no non-negative solution exists. With
    ``rep_rate=None`` the scan is taken as dwell limited and an effective
    pulse rate is fitted together with the overhead; ``v_max`` is then set
    to the slowest stage speed that keeps both scans dwell limited.
    """
    spec = full.full_spec
    if sparse.full_spec.m_cols != spec.m_cols:
        raise ValueError("both scans must have the same line length")
    m, dx = spec.m_cols, spec.pixel_size
    per_full = t_full / full.n_lines
    per_sparse = t_sparse / sparse.n_lines
    p_f, p_s = full.pulses_per_pixel, sparse.pulses_per_pixel

    if rep_rate is None:
        if p_f == p_s:
            raise ValueError("pulse counts must differ to fit an effective pulse rate")
        rate = m * (p_f - p_s) / (per_full - per_sparse)
        overhead = per_full - m * p_f / rate
        if not (rate > 0 and overhead >= 0):
            raise ValueError("timings are inconsistent with a dwell-limited scanner")
        v_max = m * dx / (m * min(p_f, p_s) / rate)
        return TimingModel(rate, overhead, v_max)

    # Order so that "long" has the larger dwell time.
    (p_long, per_long), (p_short, per_short) = sorted(
        [(p_f, per_full), (p_s, per_sparse)], reverse=True)
    dwell_long, dwell_short = m * p_long / rep_rate, m * p_short / rep_rate
    # With the stage time T between the dwell times (inclusive), the long
    # scan is dwell limited and the short one stage limited; the boundary
    # cases cover the purely dwell- or stage-limited regimes.
    overhead = per_long - dwell_long
    travel = per_short - overhead
    tol = 1e-9 * dwell_long
    if overhead >= 0 and dwell_short - tol <= travel <= dwell_long + tol and travel > 0:
        return TimingModel(rep_rate, overhead, m * dx / travel)
    raise ValueError(
        f"no (v_max, line_overhead) at rep_rate={rep_rate:g} Hz reproduces "
        f"{per_full:.4g} s and {per_sparse:.4g} s per line")
