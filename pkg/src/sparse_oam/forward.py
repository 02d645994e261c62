"""Measurement model for sparse line scans.

A candidate image is blurred by the Gaussian PSF and then sampled on every
``w``-th scan line; the data carry i.i.d. Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, Image, gaussian_blur_array

DEFAULT_PSF_SIGMA_UM = 5.0
DARK_NOISE_SIGMA_V = 9.318e-7
# Smallest noise level used in likelihoods; stands in for noiseless data.
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class ScanPattern:
    """Which lines of ``full_spec`` are measured and with how many pulses.

    ``measured_lines`` is derived from the stride and holds 1-based row
    indices ``1, w + 1, 2w + 1, ...``.
    """

    full_spec: GridSpec
    stride_w: int
    pulses_per_pixel: int = 15
    pulses_full: int = 50

    def __post_init__(self):
        for name in ("stride_w", "pulses_per_pixel", "pulses_full"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.pulses_per_pixel > self.pulses_full:
            raise ValueError("pulses_per_pixel cannot exceed pulses_full")

    @property
    def measured_lines(self) -> tuple[int, ...]:
        return tuple(range(1, self.full_spec.n_rows + 1, self.stride_w))

    @property
    def row_index(self) -> np.ndarray:
        """0-based row indices of the measured lines."""
        return np.arange(0, self.full_spec.n_rows, self.stride_w)

    @property
    def n_lines(self) -> int:
        return len(self.row_index)

    @property
    def data_size(self) -> int:
        return self.n_lines * self.full_spec.m_cols

    @classmethod
    def full(cls, spec: GridSpec, pulses_full: int = 50) -> "ScanPattern":
        return cls(spec, 1, pulses_full, pulses_full)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = DARK_NOISE_SIGMA_V

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"noise sigma must be positive, got {self.sigma!r}")


@dataclass(frozen=True, eq=False)
class SparseScan:
    """Measured data in scan order (line by line, columns dense)."""

    pattern: ScanPattern
    noise: NoiseModel
    data: np.ndarray
    wavenumber: float | None = None

    def __post_init__(self):
        d = np.array(self.data, dtype=float).ravel()
        if d.size != self.pattern.data_size:
            raise ValueError(
                f"data length {d.size} does not match pattern ({self.pattern.data_size})"
            )
        if not np.all(np.isfinite(d)):
            raise ValueError("scan data must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def spec(self) -> GridSpec:
        return self.pattern.full_spec


def sparsity_fraction(pattern: ScanPattern) -> float:
    """Overall fraction of data not acquired relative to a full scan."""
    lateral = pattern.n_lines / pattern.full_spec.n_rows
    longitudinal = pattern.pulses_per_pixel / pattern.pulses_full
    return 1.0 - lateral * longitudinal


def _check_spec(spec: GridSpec, pattern: ScanPattern):
    if spec != pattern.full_spec:
        raise ValueError(f"image grid {spec} incompatible with scan grid {pattern.full_spec}")


def apply_stages(blurred: Image, pattern: ScanPattern) -> np.ndarray:
    """Copy the pixels on the measured lines into a data vector."""
    _check_spec(blurred.spec, pattern)
    return blurred.values[pattern.row_index].ravel()


def apply_stages_adjoint(data, pattern: ScanPattern) -> Image:
    """Scatter a data vector back onto its lines; unmeasured pixels are 0."""
    return Image(pattern.full_spec, _scatter(data, pattern))


def _scatter(data, pattern: ScanPattern) -> np.ndarray:
    d = np.asarray(data, dtype=float).ravel()
    if d.size != pattern.data_size:
        raise ValueError(f"data length {d.size} does not match pattern ({pattern.data_size})")
    out = np.zeros(pattern.full_spec.shape)
    out[pattern.row_index] = d.reshape(pattern.n_lines, -1)
    return out


class ForwardOperator:
    """Array-level response ``R = R_stages o R_PSF`` and its adjoint.

    Parameters
    ----------
    pattern : ScanPattern
    psf_sigma : float
        PSF standard deviation in micrometres. Kernels narrower than 0.05 px
        are treated as the identity.
    """

    def __init__(self, pattern: ScanPattern, psf_sigma: float = DEFAULT_PSF_SIGMA_UM):
        if psf_sigma < 0:
            raise ValueError("psf_sigma must be non-negative")
        self.pattern = pattern
        self.psf_sigma = float(psf_sigma)
        self.sigma_px = self.psf_sigma / pattern.full_spec.pixel_size
        self._rows = pattern.row_index

    @property
    def shape(self) -> tuple[int, int]:
        return self.pattern.full_spec.shape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return gaussian_blur_array(x, self.sigma_px)[self._rows].ravel()

    def adjoint(self, d: np.ndarray) -> np.ndarray:
        return gaussian_blur_array(_scatter(d, self.pattern), self.sigma_px)


def forward_apply(image: Image, pattern: ScanPattern,
                  psf_sigma: float = DEFAULT_PSF_SIGMA_UM) -> np.ndarray:
    """Noise-free data predicted for ``image``."""
    _check_spec(image.spec, pattern)
    return ForwardOperator(pattern, psf_sigma)(image.values)


def forward_adjoint(data, pattern: ScanPattern,
                    psf_sigma: float = DEFAULT_PSF_SIGMA_UM) -> Image:
    return Image(pattern.full_spec, ForwardOperator(pattern, psf_sigma).adjoint(data))


def log_likelihood(scan: SparseScan, image: Image,
                   psf_sigma: float = DEFAULT_PSF_SIGMA_UM) -> float:
    """Gaussian log-likelihood ``log p(d | image)`` including normalization."""
    sigma = scan.noise.sigma
    if not sigma > 0:
        raise ValueError("noise sigma must be positive")
    r = scan.data - forward_apply(image, scan.pattern, psf_sigma)
    n = r.size
    return -0.5 * float(r @ r) / sigma**2 - 0.5 * n * math.log(2.0 * math.pi * sigma**2)
