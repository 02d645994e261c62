"""Evaluation metrics, display post-processing and linear spectral unmixing.

Metrics always consume raw signal values; contrast-equalized images are for
display only.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import lsq_linear
from skimage.exposure import equalize_adapthist

from .grid import GridSpec, HyperCube, Image

SSIM_C1 = 1e-4
SSIM_C2 = 9e-4


class RankDeficientWarning(RuntimeWarning):
    """Endmember spectra are linearly dependent."""


class ExcludedEntriesWarning(RuntimeWarning):
    """Some ground-truth entries were zero and left out of a relative error."""


def _pair(rc, gt) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(rc, Image) and isinstance(gt, Image):
        if rc.spec != gt.spec:
            raise ValueError(f"grid mismatch: {rc.spec} vs {gt.spec}")
        return rc.values, gt.values
    a = rc.values if isinstance(rc, Image) else np.asarray(rc, dtype=float)
    b = gt.values if isinstance(gt, Image) else np.asarray(gt, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def ssim(rc: Image, gt: Image) -> float:
    """Single-window structural similarity of jointly min-max normalized images.

    Uses population (co)variances and the stabilizers ``c1 = 1e-4`` and
    ``c2 = 9e-4``.
    """
    x, y = _pair(rc, gt)
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    if hi > lo:
        x = (x - lo) / (hi - lo)
        y = (y - lo) / (hi - lo)
    else:
        x = np.zeros_like(x)
        y = np.zeros_like(y)
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).mean()
    vy = ((y - my) ** 2).mean()
    cov = ((x - mx) * (y - my)).mean()
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(num / den)


def mrsd(mean_img: Image, std_img: Image) -> float:
    """Mean over pixels of the relative standard deviation ``std / mean``."""
    mean, std = _pair(mean_img, std_img)
    if np.any(mean <= 0):
        raise ValueError("posterior mean must be strictly positive")
    return float(np.mean(std / mean))


def error_map(rc: Image, gt: Image) -> Image:
    """Pixel-wise absolute error ``|rc - gt|``."""
    a, b = _pair(rc, gt)
    spec = rc.spec if isinstance(rc, Image) else GridSpec(*a.shape, 1.0)
    return Image(spec, np.abs(a - b))


def mae(rc: Image, gt: Image) -> float:
    a, b = _pair(rc, gt)
    return float(np.mean(np.abs(a - b)))


def max_error(rc: Image, gt: Image) -> float:
    a, b = _pair(rc, gt)
    return float(np.max(np.abs(a - b)))


def mre_spectrum(rc_spectrum, gt_spectrum) -> float:
    """Mean relative error ``|rc - gt| / |gt|`` over channels.

    Channels where ``gt`` is zero are excluded; an
    :class:`ExcludedEntriesWarning` reports how many.
    """
    rc = np.asarray(rc_spectrum, dtype=float).ravel()
    gt = np.asarray(gt_spectrum, dtype=float).ravel()
    if rc.shape != gt.shape:
        raise ValueError("spectra must have the same length")
    keep = gt != 0
    excluded = int(rc.size - keep.sum())
    if excluded:
        warnings.warn(f"{excluded} zero-valued ground-truth channel(s) excluded",
                      ExcludedEntriesWarning, stacklevel=2)
    if not keep.any():
        raise ValueError("ground truth is zero in every channel")
    return float(np.mean(np.abs(rc[keep] - gt[keep]) / np.abs(gt[keep])))


def rsd_histogram(mean_img: Image, std_img: Image, bins: int = 50,
                  value_range: tuple[float, float] | None = None):
    """Histogram of the relative standard deviation; returns ``(edges, counts)``."""
    mean, std = _pair(mean_img, std_img)
    if np.any(mean <= 0):
        raise ValueError("posterior mean must be strictly positive")
    rsd = std / mean
    if value_range is None:
        lo, hi = float(rsd.min()), float(rsd.max())
        # A ratio that is constant up to round-off cannot be split into
        # finite bins; widen it to a unit-free interval around the value.
        if hi - lo <= 1e-9 * max(abs(hi), 1e-300):
            half = 0.5 * max(abs(hi), 1e-12)
            lo, hi = lo - half, hi + half
        value_range = (lo, hi)
    counts, edges = np.histogram(rsd, bins=bins, range=value_range)
    return edges, counts


def backprojection_display(scan) -> Image:
    """Scatter the sparse data onto the full grid; skipped lines are zero."""
    from .forward import apply_stages_adjoint

    return apply_stages_adjoint(scan.data, scan.pattern)


def clahe(img: Image, tiles: int | tuple[int, int] = 8, clip: float = 2.0,
          nbins: int = 256) -> Image:
    """Contrast-limited adaptive histogram equalization for display.

    ``tiles`` is the number of contextual regions per axis and ``clip`` the
    histogram clip limit as a multiple of the uniform bin height. The input
    is min-max normalized first and the output lies in [0, 1]. A constant
    image is returned unchanged.
    """
    ty, tx = (tiles, tiles) if np.isscalar(tiles) else tiles
    if ty < 1 or tx < 1:
        raise ValueError("tiles must be >= 1")
    if not clip > 0:
        raise ValueError("clip must be positive")
    v = img.values
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return img
    unit = (v - lo) / (hi - lo)
    kernel = (max(math.ceil(v.shape[0] / ty), 1), max(math.ceil(v.shape[1] / tx), 1))
    out = equalize_adapthist(unit, kernel_size=kernel, clip_limit=clip / nbins, nbins=nbins)
    return Image(img.spec, np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Unmixing
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EndmemberSet:
    """Named reference spectra; ``spectra`` has shape ``(k, n_channels)``."""

    names: tuple[str, ...]
    spectra: np.ndarray
    wavenumbers: tuple[float, ...] | None = None

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        spectra = np.array(self.spectra, dtype=float)
        if spectra.ndim != 2:
            raise ValueError("spectra must be a (k, n_channels) array")
        if len(names) != spectra.shape[0]:
            raise ValueError("one name per endmember spectrum is required")
        if len(names) < 2:
            raise ValueError("at least two endmembers are required")
        if not np.all(np.isfinite(spectra)):
            raise ValueError("spectra must be finite")
        if np.all(spectra == 0):
            raise ValueError("spectra are all zero")
        if self.wavenumbers is not None:
            wn = tuple(float(w) for w in self.wavenumbers)
            if len(wn) != spectra.shape[1]:
                raise ValueError("one wavenumber per spectrum entry is required")
            object.__setattr__(self, "wavenumbers", wn)
        spectra.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "spectra", spectra)

    @property
    def n_channels(self) -> int:
        return self.spectra.shape[1]

    def __len__(self):
        return len(self.names)


_ACTIVE_TOL = 1e-12


def _is_rank_deficient(a: np.ndarray) -> bool:
    return np.linalg.matrix_rank(a) < a.shape[1]


def _nnls(a: np.ndarray, y: np.ndarray, deficient: bool) -> tuple[np.ndarray, float]:
    """NNLS of the problem rescaled to ``max|A| = max|y| = 1``.

    Returns the rescaled solution ``u`` and the factor ``max|y| / max|A|``;
    the solution of the original problem is their product.  The solver's
    tolerances are absolute, so it only sees problems of unit size.
    """
    ymax = float(np.abs(y).max(initial=0.0))
    amax = float(np.abs(a).max(initial=0.0))
    if ymax == 0.0 or amax == 0.0:
        return np.zeros(a.shape[1]), 0.0
    a, y = a / amax, y / ymax
    if deficient:
        # Vanishing ridge term selects the minimum-norm non-negative solution.
        eps = 1e-7 * np.linalg.norm(a, 2)
        a = np.vstack([a, eps * np.eye(a.shape[1])])
        y = np.concatenate([y, np.zeros(a.shape[1])])
    # Bounded-variable least squares is an exact active-set method; it can
    # leave round-off residue on clamped coordinates, which is snapped to 0.
    x = lsq_linear(a, y, bounds=(0.0, np.inf), method="bvls", tol=1e-14).x
    x[x <= _ACTIVE_TOL * float(x.max(initial=0.0))] = 0.0
    return _polish(a, y, x), ymax / amax


def _polish(a: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Release clamped coordinates whose gradient still points inward.

    The solver stops on an absolute gradient tolerance and can leave a
    coordinate clamped one step short of the optimum.  Each pass re-solves
    the unconstrained problem on the enlarged free set and keeps it while it
    stays feasible.
    """
    floor = _ACTIVE_TOL * np.linalg.norm(a, 2) * max(np.linalg.norm(y), 1.0)
    for _ in range(a.shape[1]):
        g = a.T @ (a @ x - y)
        free = (x > 0) | (g < -floor)
        if np.array_equal(free, x > 0):
            break
        sol, *_ = np.linalg.lstsq(a[:, free], y, rcond=None)
        if np.any(sol < 0):
            break
        x = np.zeros_like(x)
        x[free] = sol
    return x


def kkt_violation(a: np.ndarray, y: np.ndarray, x: np.ndarray) -> float:
    """Largest violation of the NNLS optimality conditions, relative to ``|A| |y|``.

    At a solution the gradient ``g = A^T (A x - y)`` vanishes on the free
    coordinates and is non-negative on the clamped ones.
    """
    ymax = float(np.abs(y).max(initial=0.0))
    amax = float(np.abs(a).max(initial=0.0))
    if ymax == 0.0 or amax == 0.0:
        return 0.0 if not x.any() else float("inf")
    # Work on the problem rescaled to unit-size A and y, where nothing
    # underflows; |A| |y| bounds |A^T y| and stays positive when y is
    # orthogonal to range(A).
    a, y, x = a / amax, y / ymax, x / ymax * amax
    g = a.T @ (a @ x - y)
    free = x > _ACTIVE_TOL * float(x.max(initial=0.0))
    worst = max(float(np.abs(g[free]).max(initial=0.0)),
                float(np.clip(-g[~free], 0.0, None).max(initial=0.0)))
    return worst / (np.linalg.norm(a, 2) * np.linalg.norm(y))


def unmix_pixel(spectrum, endmembers: EndmemberSet, check: bool = True) -> np.ndarray:
    """Non-negative least-squares coefficients of ``spectrum`` on the endmembers."""
    y = np.asarray(spectrum, dtype=float).ravel()
    if y.size != endmembers.n_channels:
        raise ValueError(f"spectrum has {y.size} channels, endmembers have "
                         f"{endmembers.n_channels}")
    a = endmembers.spectra.T
    deficient = _is_rank_deficient(a)
    if deficient:
        warnings.warn("endmember spectra are linearly dependent; returning the "
                      "minimum-norm solution", RankDeficientWarning, stacklevel=2)
    unit, scale = _nnls(a, y, deficient)
    # Checked before rescaling: subnormal data cannot hold the solution to
    # full relative precision.
    if check and scale and not deficient and kkt_violation(a, y / scale, unit) > 1e-8:
        raise ArithmeticError("NNLS solution failed the optimality check")
    return scale * unit


def enumerate_nnls(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Brute-force NNLS over all active sets, for small problems.

    Each support is solved by unconstrained least squares; among the
    feasible candidates the one with the smallest residual wins.
    """
    k = a.shape[1]
    best, best_res = np.zeros(k), float(y @ y)
    for size in range(1, k + 1):
        for support in itertools.combinations(range(k), size):
            cols = list(support)
            sol, *_ = np.linalg.lstsq(a[:, cols], y, rcond=None)
            if np.all(sol >= 0):
                x = np.zeros(k)
                x[cols] = sol
                r = a @ x - y
                if float(r @ r) < best_res:
                    best, best_res = x, float(r @ r)
    return best


@dataclass(frozen=True, eq=False)
class UnmixResult:
    """Coefficient maps ``(k, n, m)`` and fractional composition per endmember."""

    names: tuple[str, ...]
    maps: np.ndarray
    composition: np.ndarray

    def as_dict(self) -> dict:
        return {name: float(c) for name, c in zip(self.names, self.composition)}


def unmix_cube(cube: HyperCube, endmembers: EndmemberSet) -> UnmixResult:
    """Unmix every pixel and summarize the fractional composition.

    ``composition_j = sum(alpha_j) / sum(alpha)`` over all pixels.
    """
    if len(cube) != endmembers.n_channels:
        raise ValueError(f"cube has {len(cube)} channels, endmembers have "
                         f"{endmembers.n_channels}")
    stack = cube.stack()
    pixels = stack.reshape(len(cube), -1).T
    a = endmembers.spectra.T
    deficient = _is_rank_deficient(a)
    if deficient:
        warnings.warn("endmember spectra are linearly dependent; returning "
                      "minimum-norm solutions", RankDeficientWarning, stacklevel=2)
    coeffs = np.array([scale * unit for unit, scale in (_nnls(a, y, deficient) for y in pixels)])
    total = coeffs.sum()
    if not total > 0:
        raise ValueError("all unmixing coefficients are zero")
    composition = coeffs.sum(axis=0) / total
    maps = coeffs.T.reshape(len(endmembers), *cube.spec.shape)
    return UnmixResult(endmembers.names, maps, composition)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MetricsReport:
    """Quality metrics of a reconstruction against ground truth.

    ``channels`` holds one report per channel for hyperspectral input; the
    top-level values are then channel averages. ``error`` is the pixel-wise
    absolute error map (first channel for cubes).
    """

    ssim: float
    mrsd: float
    mae: float
    max_error: float
    error: Image | None = None
    rsd_edges: np.ndarray | None = None
    rsd_counts: np.ndarray | None = None
    channels: list["MetricsReport"] = field(default_factory=list)
    wavenumbers: list[float] | None = None

    def __post_init__(self):
        if not -1.0 - 1e-12 <= self.ssim <= 1.0 + 1e-12:
            raise ValueError("ssim outside [-1, 1]")
        if self.mrsd < 0 or self.mae < 0 or self.max_error < 0:
            raise ValueError("mrsd, mae and max_error must be non-negative")

    def to_dict(self) -> dict:
        out = {"ssim": self.ssim, "mrsd": self.mrsd, "mae": self.mae,
               "max_error": self.max_error}
        if self.rsd_edges is not None:
            out["rsd_histogram"] = {"edges": [float(e) for e in self.rsd_edges],
                                    "counts": [int(c) for c in self.rsd_counts]}
        if self.channels:
            out["channels"] = [c.to_dict() for c in self.channels]
            out["wavenumbers_cm1"] = self.wavenumbers
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        hist = d.get("rsd_histogram")
        return cls(
            ssim=float(d["ssim"]), mrsd=float(d["mrsd"]), mae=float(d["mae"]),
            max_error=float(d["max_error"]),
            rsd_edges=None if hist is None else np.asarray(hist["edges"], dtype=float),
            rsd_counts=None if hist is None else np.asarray(hist["counts"], dtype=int),
            channels=[cls.from_dict(c) for c in d.get("channels", [])],
            wavenumbers=d.get("wavenumbers_cm1"),
        )


def _evaluate_image(rc_mean: Image, rc_std: Image, gt: Image, bins: int) -> MetricsReport:
    edges, counts = rsd_histogram(rc_mean, rc_std, bins)
    return MetricsReport(
        ssim=ssim(rc_mean, gt), mrsd=mrsd(rc_mean, rc_std), mae=mae(rc_mean, gt),
        max_error=max_error(rc_mean, gt), error=error_map(rc_mean, gt),
        rsd_edges=edges, rsd_counts=counts)


def evaluate(rc_mean: Image | HyperCube, rc_std: Image | HyperCube,
             gt: Image | HyperCube, bins: int = 50) -> MetricsReport:
    """Compare a posterior mean/std pair with the ground truth."""
    if isinstance(rc_mean, Image):
        if not (isinstance(rc_std, Image) and isinstance(gt, Image)):
            raise TypeError("mixing images and cubes")
        return _evaluate_image(rc_mean, rc_std, gt, bins)
    if not (isinstance(rc_std, HyperCube) and isinstance(gt, HyperCube)):
        raise TypeError("mixing images and cubes")
    if not (len(rc_mean) == len(rc_std) == len(gt)):
        raise ValueError("cubes have different channel counts")
    per = [_evaluate_image(m, s, g, bins)
           for m, s, g in zip(rc_mean.channels, rc_std.channels, gt.channels)]
    return MetricsReport(
        ssim=float(np.mean([p.ssim for p in per])),
        mrsd=float(np.mean([p.mrsd for p in per])),
        mae=float(np.mean([p.mae for p in per])),
        max_error=float(np.max([p.max_error for p in per])),
        error=per[0].error, channels=per, wavenumbers=list(gt.wavenumbers))


def cube_spectra_mre(rc: HyperCube, gt: HyperCube) -> float:
    """MRE of the field-of-view mean spectra of two cubes."""
    return mre_spectrum(rc.stack().mean(axis=(1, 2)), gt.stack().mean(axis=(1, 2)))


def stack_images(images: Sequence[Image], wavenumbers: Sequence[float]) -> HyperCube:
    return HyperCube(images[0].spec, tuple(wavenumbers), tuple(images))
