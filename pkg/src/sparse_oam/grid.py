"""Pixel grids, field containers and the harmonic-domain helpers shared by
the forward model, the prior and the analysis tools.

Grids are stored row-major with the row index running along the slow raster
axis, so one scan line is one row.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft
import scipy.sparse

# Gaussian kernels narrower than this (in pixels) act as the identity.
MIN_KERNEL_PX = 0.05


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a rectangular pixel grid.

    Parameters
    ----------
    n_rows, m_cols : int
        Number of scan lines and pixels per line.
    pixel_size : float
        Pixel pitch in micrometres.
    """

    n_rows: int
    m_cols: int
    pixel_size: float

    def __post_init__(self):
        for name in ("n_rows", "m_cols"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if not (self.pixel_size > 0 and math.isfinite(self.pixel_size)):
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size!r}")
        object.__setattr__(self, "pixel_size", float(self.pixel_size))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.m_cols)

    @property
    def size(self) -> int:
        return self.n_rows * self.m_cols

    def with_shape(self, n_rows: int, m_cols: int) -> "GridSpec":
        return GridSpec(n_rows, m_cols, self.pixel_size)


@dataclass(frozen=True, eq=False)
class Image:
    """A finite real field on a :class:`GridSpec`.

    ``values`` is kept as a read-only ``(n_rows, m_cols)`` float array.
    """

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.size != self.spec.size:
            raise ValueError(
                f"expected {self.spec.size} values for grid {self.spec.shape}, got {v.size}"
            )
        v = v.reshape(self.spec.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.spec.shape


@dataclass(frozen=True, eq=False)
class HyperCube:
    """A stack of co-registered images, one per excitation wavenumber (cm^-1)."""

    spec: GridSpec
    wavenumbers: tuple[float, ...]
    channels: tuple[Image, ...]

    def __post_init__(self):
        wn = tuple(float(w) for w in self.wavenumbers)
        ch = tuple(self.channels)
        if len(wn) != len(ch):
            raise ValueError("channel count must equal wavenumber count")
        if len(set(wn)) != len(wn):
            raise ValueError("wavenumbers must be pairwise distinct")
        for img in ch:
            if img.spec != self.spec:
                raise ValueError("all channels must share the cube's grid spec")
        object.__setattr__(self, "wavenumbers", wn)
        object.__setattr__(self, "channels", ch)

    @classmethod
    def from_array(cls, spec: GridSpec, wavenumbers: Sequence[float], stack) -> "HyperCube":
        stack = np.asarray(stack, dtype=float).reshape(len(wavenumbers), *spec.shape)
        return cls(spec, tuple(wavenumbers), tuple(Image(spec, s) for s in stack))

    def stack(self) -> np.ndarray:
        """Channels as a ``(n_channels, n_rows, m_cols)`` array."""
        return np.stack([c.values for c in self.channels])

    def __len__(self):
        return len(self.channels)


def _values(field) -> np.ndarray:
    return field.values if isinstance(field, Image) else np.asarray(field, dtype=float)


# ---------------------------------------------------------------------------
# Hartley transform
# ---------------------------------------------------------------------------


def hartley(x: np.ndarray) -> np.ndarray:
    """Unitary Hartley transform over all axes without input validation."""
    f = scipy.fft.fftn(x, norm="ortho")
    return f.real - f.imag


def hartley_transform(field) -> np.ndarray:
    """Hartley transform ``Re(F x) - Im(F x)`` with the unitary DFT ``F``.

    With the unitary normalization the transform is real, symmetric and its
    own inverse.
    """
    x = _values(field)
    if x.ndim < 1 or x.size == 0:
        raise ValueError("field must have at least one element")
    if not np.all(np.isfinite(x)):
        raise ValueError("field must be finite")
    return hartley(x)


# ---------------------------------------------------------------------------
# Padding / cropping
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=64)
def _reflect_matrix(n: int, margin: int) -> scipy.sparse.csr_matrix:
    """Sparse ``(n + 2*margin, n)`` selection matrix of reflect padding."""
    idx = np.pad(np.arange(n), margin, mode="reflect") if n > 1 else np.zeros(n + 2 * margin, int)
    rows = np.arange(idx.size)
    return scipy.sparse.csr_matrix((np.ones(idx.size), (rows, idx)), shape=(idx.size, n))


def reflect_pad_array(x: np.ndarray, margin: int) -> np.ndarray:
    if margin == 0:
        return np.array(x, dtype=float)
    if min(x.shape) > 1:
        return np.pad(x, margin, mode="reflect")
    pr = _reflect_matrix(x.shape[0], margin)
    pc = _reflect_matrix(x.shape[1], margin)
    return np.asarray(pr @ (pc @ x.T).T)


def pad_reflect(field: Image, margin: int) -> Image:
    """Extend every side of ``field`` by ``margin`` pixels of edge reflection."""
    margin = _check_margin(margin)
    v = reflect_pad_array(field.values, margin)
    return Image(field.spec.with_shape(*v.shape), v)


def crop(field: Image, margin: int) -> Image:
    """Remove ``margin`` pixels from every side of ``field``."""
    margin = _check_margin(margin)
    n, m = field.shape
    if 2 * margin >= min(n, m):
        raise ValueError(f"crop margin {margin} too large for a {n}x{m} field")
    v = field.values[margin:n - margin, margin:m - margin]
    return Image(field.spec.with_shape(*v.shape), v)


def _check_margin(margin) -> int:
    if int(margin) != margin or margin < 0:
        raise ValueError(f"margin must be a non-negative integer, got {margin!r}")
    return int(margin)


# ---------------------------------------------------------------------------
# Gaussian convolution
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def gaussian_transfer(shape: tuple[int, int], sigma_px: float) -> np.ndarray:
    """Cosine-domain transfer function of an isotropic Gaussian.

    Mode ``k`` of an orthonormal DCT-II on ``n`` samples has frequency
    ``k / (2 n)`` cycles per pixel.
    """
    fr = np.arange(shape[0])[:, None] / (2.0 * shape[0])
    fc = np.arange(shape[1])[None, :] / (2.0 * shape[1])
    h = np.exp(-2.0 * math.pi**2 * sigma_px**2 * (fr**2 + fc**2))
    h.setflags(write=False)
    return h


def gaussian_blur_array(x: np.ndarray, sigma_px: float) -> np.ndarray:
    """Gaussian blur with mirror boundaries, ``sigma_px`` in pixels.

    Equivalent to periodic convolution of the half-sample mirrored extension
    of ``x``; diagonal in the orthonormal DCT-II basis, hence symmetric and
    mass preserving.
    """
    x = np.asarray(x, dtype=float)
    if sigma_px < MIN_KERNEL_PX:
        return x.copy()
    h = gaussian_transfer(x.shape, float(sigma_px))
    return scipy.fft.idctn(scipy.fft.dctn(x, type=2, norm="ortho") * h, type=2, norm="ortho")


# The blur is self-adjoint.
gaussian_blur_adjoint = gaussian_blur_array


def convolve_gaussian(field: Image, sigma: float) -> Image:
    """Blur ``field`` with an isotropic Gaussian of standard deviation
    ``sigma`` micrometres, mirroring the field at its edges."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    return Image(field.spec, gaussian_blur_array(field.values, sigma / field.spec.pixel_size))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _linear_weights(n_src: int, n_tgt: int):
    if n_src == 1:
        zeros = np.zeros(n_tgt, dtype=int)
        return zeros, zeros, np.zeros(n_tgt)
    pos = np.linspace(0.0, n_src - 1, n_tgt) if n_tgt > 1 else np.array([(n_src - 1) / 2.0])
    lo = np.clip(np.floor(pos).astype(int), 0, n_src - 2)
    return lo, lo + 1, pos - lo


def resample_bilinear(field: Image, target: GridSpec) -> Image:
    """Bilinear resampling with the field-of-view corners aligned."""
    if target == field.spec:
        return Image(target, field.values)
    v = field.values
    lo, hi, t = _linear_weights(v.shape[0], target.n_rows)
    v = v[lo] * (1.0 - t)[:, None] + v[hi] * t[:, None]
    lo, hi, t = _linear_weights(v.shape[1], target.m_cols)
    v = v[:, lo] * (1.0 - t)[None, :] + v[:, hi] * t[None, :]
    return Image(target, v)
