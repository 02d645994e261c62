"""Correlated-field image prior.

Images are generated from standard-normal latents as

    image = r * sigmoid(HT(E(a, b, c) * xi) + s)

where ``HT`` is the unitary Hartley transform on a padded grid and ``E`` is
a Matern-type amplitude spectrum over integer wavevectors. The spectrum
parameters and the offset come from scalar latents through fixed
lognormal/affine maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import scipy.fft
from scipy.special import expit

from .grid import GridSpec, Image, hartley

N_SCALARS = 4  # a, b, c, s


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the generative image model.

    ``grid`` is the image (data) grid; the field lives on a larger periodic
    grid with ``margin`` extra pixels on the top/left and at least
    ``margin`` on the bottom/right, sized for fast FFTs.

    ``b_log_mean=None`` resolves to ``log(0.1 * min(n, m))``.
    """

    grid: GridSpec
    r: float
    margin: int = 3
    s_mean: float = 0.5
    s_std: float = 0.25
    a_log_mean: float = 0.0
    a_log_std: float = 1.0
    b_log_mean: float | None = None
    b_log_std: float = 0.75
    c_log_mean: float = math.log(4.0)
    c_log_std: float = 0.5

    def __post_init__(self):
        if not (self.r > 0 and math.isfinite(self.r)):
            raise ValueError(f"r must be positive, got {self.r!r}")
        if int(self.margin) != self.margin or self.margin < 0:
            raise ValueError("margin must be a non-negative integer")
        for name in ("s_std", "a_log_std", "b_log_std", "c_log_std"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.b_log_mean is None:
            object.__setattr__(self, "b_log_mean",
                               math.log(0.1 * min(self.grid.n_rows, self.grid.m_cols)))
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "margin", int(self.margin))

    @property
    def padded_shape(self) -> tuple[int, int]:
        n, m = self.grid.shape
        return (scipy.fft.next_fast_len(n + 2 * self.margin, real=False),
                scipy.fft.next_fast_len(m + 2 * self.margin, real=False))

    @property
    def padded_spec(self) -> GridSpec:
        return self.grid.with_shape(*self.padded_shape)

    @property
    def latent_size(self) -> int:
        n, m = self.padded_shape
        return n * m + N_SCALARS

    def to_dict(self) -> dict:
        d = asdict(self)
        g = d.pop("grid")
        d.update(n_rows=g["n_rows"], m_cols=g["m_cols"], pixel_size_um=g["pixel_size"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        d = dict(d)
        grid = GridSpec(d.pop("n_rows"), d.pop("m_cols"), d.pop("pixel_size_um"))
        return cls(grid=grid, **d)


@dataclass(frozen=True, eq=False)
class LatentVector:
    """Standard-normal latent coordinates of the prior."""

    xi: np.ndarray
    a_lat: float = 0.0
    b_lat: float = 0.0
    c_lat: float = 0.0
    s_lat: float = 0.0

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float)
        if xi.ndim != 2:
            raise ValueError("xi must be two-dimensional")
        object.__setattr__(self, "xi", xi)

    @classmethod
    def zeros(cls, cfg: PriorConfig) -> "LatentVector":
        return cls(np.zeros(cfg.padded_shape))

    @classmethod
    def from_flat(cls, flat, cfg: PriorConfig) -> "LatentVector":
        flat = np.asarray(flat, dtype=float)
        if flat.size != cfg.latent_size:
            raise ValueError(f"latent size {flat.size} != {cfg.latent_size}")
        a, b, c, s = flat[-N_SCALARS:]
        return cls(flat[:-N_SCALARS].reshape(cfg.padded_shape), a, b, c, s)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.xi.ravel(), [self.a_lat, self.b_lat, self.c_lat, self.s_lat]])


def matern_spectrum(a, b, c, k_row, k_col):
    """Amplitude spectrum ``a * (1 + (|k| / b)**2) ** (c / 4)``."""
    if not np.all(np.asarray(a) > 0):
        raise ValueError("a must be positive")
    if not np.all(np.asarray(b) > 0):
        raise ValueError("b must be positive")
    if not np.all(np.asarray(c) < 0):
        raise ValueError("c must be negative")
    k2 = np.asarray(k_row, dtype=float) ** 2 + np.asarray(k_col, dtype=float) ** 2
    return a * (1.0 + k2 / b**2) ** (c / 4.0)


def wavevector_grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Signed integer wavevector components in FFT order."""
    kr = np.rint(scipy.fft.fftfreq(shape[0]) * shape[0])[:, None]
    kc = np.rint(scipy.fft.fftfreq(shape[1]) * shape[1])[None, :]
    return np.broadcast_to(kr, shape), np.broadcast_to(kc, shape)


def latent_to_params(cfg: PriorConfig, lat) -> tuple[float, float, float, float]:
    """Map the scalar latents to ``(a, b, c, s)``; always ``a, b > 0 > c``."""
    if isinstance(lat, LatentVector):
        pa, pb, pc, ps = lat.a_lat, lat.b_lat, lat.c_lat, lat.s_lat
    else:
        pa, pb, pc, ps = np.asarray(lat, dtype=float)[-N_SCALARS:]
    a = math.exp(cfg.a_log_mean + cfg.a_log_std * pa)
    b = math.exp(cfg.b_log_mean + cfg.b_log_std * pb)
    c = -math.exp(cfg.c_log_mean + cfg.c_log_std * pc)
    s = cfg.s_mean + cfg.s_std * ps
    return a, b, c, s


class CorrelatedField:
    """Vectorized generative model operating on flat latent arrays.

    The flat layout is ``[xi.ravel(), psi_a, psi_b, psi_c, psi_s]``.
    """

    def __init__(self, cfg: PriorConfig):
        self.cfg = cfg
        self.shape = cfg.padded_shape
        kr, kc = wavevector_grid(self.shape)
        self._k2 = kr**2 + kc**2

    @property
    def size(self) -> int:
        return self.cfg.latent_size

    def split(self, psi: np.ndarray):
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (self.size,):
            raise ValueError(f"latent shape {psi.shape} != ({self.size},)")
        return psi[:-N_SCALARS].reshape(self.shape), psi[-N_SCALARS:]

    def _q(self, b: float) -> np.ndarray:
        return self._k2 / b**2

    def spectrum(self, psi) -> np.ndarray:
        a, b, c, _ = latent_to_params(self.cfg, psi)
        return a * (1.0 + self._q(b)) ** (c / 4.0)

    def field(self, psi) -> np.ndarray:
        xi, _ = self.split(psi)
        return hartley(self.spectrum(psi) * xi)

    def image(self, psi) -> np.ndarray:
        """Padded image ``r * sigmoid(GF + s)``."""
        _, _, _, s = latent_to_params(self.cfg, psi)
        return self.cfg.r * expit(self.field(psi) + s)

    def crop(self, padded: np.ndarray) -> np.ndarray:
        k = self.cfg.margin
        n, m = self.cfg.grid.shape
        return padded[k:k + n, k:k + m]

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`crop`."""
        out = np.zeros(self.shape)
        k = self.cfg.margin
        n, m = self.cfg.grid.shape
        out[k:k + n, k:k + m] = x
        return out

    def linearize(self, psi) -> "FieldLinearization":
        return FieldLinearization(self, np.asarray(psi, dtype=float))


class FieldLinearization:
    """Value and exact Jacobian of :meth:`CorrelatedField.image` at a point.

    The spectrum derivatives enter linearly inside the Hartley transform, so
    every Jacobian action costs one transform.
    """

    def __init__(self, model: CorrelatedField, psi: np.ndarray):
        cfg = model.cfg
        self.model = model
        xi, _ = model.split(psi)
        a, b, c, s = latent_to_params(cfg, psi)
        q = model._q(b)
        E = a * (1.0 + q) ** (c / 4.0)
        self._xi = xi
        self.spectrum = E
        sig = expit(hartley(E * xi) + s)
        self.value = cfg.r * sig
        self.gain = cfg.r * sig * (1.0 - sig)
        # d E / d (psi_a, psi_b, psi_c)
        self._dE = (
            E * cfg.a_log_std,
            E * (c / 4.0) * (-2.0 * q / (1.0 + q)) * cfg.b_log_std,
            E * np.log1p(q) / 4.0 * c * cfg.c_log_std,
        )
        self._ds = cfg.s_std

    def jvp(self, tangent: np.ndarray) -> np.ndarray:
        t_xi, t_p = self.model.split(tangent)
        amp = self.spectrum * t_xi
        for d, t in zip(self._dE, t_p[:3]):
            if t:
                amp = amp + (t * d) * self._xi
        return self.gain * (hartley(amp) + self._ds * t_p[3])

    def vjp(self, cotangent: np.ndarray) -> np.ndarray:
        h = self.gain * np.asarray(cotangent, dtype=float).reshape(self.model.shape)
        back = hartley(h)
        out = np.empty(self.model.size)
        out[:-N_SCALARS] = (self.spectrum * back).ravel()
        xb = self._xi * back
        out[-N_SCALARS:-1] = [float(np.vdot(d, xb)) for d in self._dE]
        out[-1] = self._ds * float(h.sum())
        return out


# ---------------------------------------------------------------------------
# Functional interface on LatentVector / Image
# ---------------------------------------------------------------------------


def _flat(lat) -> np.ndarray:
    return lat.to_flat() if isinstance(lat, LatentVector) else np.asarray(lat, dtype=float)


def generate_field(cfg: PriorConfig, lat) -> np.ndarray:
    """Gaussian random field ``HT(E * xi)`` on the padded grid."""
    return CorrelatedField(cfg).field(_flat(lat))


def generate_image(cfg: PriorConfig, lat) -> Image:
    """Padded prior image with values strictly inside ``(0, r)``."""
    return Image(cfg.padded_spec, CorrelatedField(cfg).image(_flat(lat)))


def jvp(cfg: PriorConfig, lat, tangent) -> np.ndarray:
    """Directional derivative of :func:`generate_image` along ``tangent``."""
    return CorrelatedField(cfg).linearize(_flat(lat)).jvp(_flat(tangent))


def vjp(cfg: PriorConfig, lat, cotangent) -> LatentVector:
    """Pull an image-space cotangent back to latent space."""
    g = cotangent.values if isinstance(cotangent, Image) else cotangent
    out = CorrelatedField(cfg).linearize(_flat(lat)).vjp(g)
    return LatentVector.from_flat(out, cfg)


def choose_scale_r(scan, kappa: float = 1.5) -> float:
    """Image scale ``r = kappa * max(d)``, floored at ten noise deviations."""
    d = np.asarray(scan.data, dtype=float)
    if d.size == 0:
        raise ValueError("scan has no data")
    sigma = scan.noise.sigma
    if not sigma > 0 and not np.any(d > 0):
        raise ValueError("cannot choose a scale for non-positive data with sigma <= 0")
    return max(kappa * float(d.max()), 10.0 * sigma)
