"""Metric Gaussian variational inference over the prior's latent space.

The posterior is approximated by a Gaussian centred on a latent mean with
covariance equal to the inverse Fisher metric

    M(mean) = I + J^T N^-1 J,

where ``J`` is the Jacobian of latent -> predicted data. Each iteration draws
antithetic samples from ``N(0, M^-1)`` at the current mean and then moves
the mean by Newton-CG steps on the sample-averaged KL, holding the sample
residuals fixed.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .forward import (DEFAULT_PSF_SIGMA_UM, SIGMA_FLOOR, ForwardOperator, ScanPattern,
                      SparseScan)
from .grid import Image
from .prior import CorrelatedField, LatentVector, PriorConfig

log = logging.getLogger(__name__)

PRESETS = {"full": (5, 16), "approx": (3, 8)}


class NumericalFailure(RuntimeError):
    """The KL objective became non-finite."""


class CGWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class MGVIConfig:
    n_iterations: int = 5
    n_samples: int = 16
    cg_tolerance: float = 1e-4
    cg_max_steps: int = 200
    newton_steps: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if self.n_samples < 2 or self.n_samples % 2:
            raise ValueError("n_samples must be even and >= 2 (antithetic pairs)")
        if not self.cg_tolerance > 0:
            raise ValueError("cg_tolerance must be positive")
        if self.cg_max_steps < 1 or self.newton_steps < 1:
            raise ValueError("cg_max_steps and newton_steps must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "MGVIConfig":
        try:
            n_it, n_s = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(n_iterations=n_it, n_samples=n_s, **overrides)


# ---------------------------------------------------------------------------
# Conjugate gradients
# ---------------------------------------------------------------------------


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    n_steps: int
    rel_residual: float


def conjugate_gradient(apply_op, b: np.ndarray, tol: float, max_steps: int,
                       precondition=None, x0: np.ndarray | None = None) -> CGResult:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    ``precondition`` applies an approximate inverse of ``A``; ``x0`` is the
    starting point (default zero). Stops once ``|b - A x| <= tol |b|``.
    Otherwise the last iterate is returned: CG iterates decrease the
    ``A``-norm error monotonically, so it is the best one available.
    """
    b = np.asarray(b, dtype=float)
    bnorm = math.sqrt(float(b @ b))
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), True, 0, 0.0)
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float)
        r = b - apply_op(x)
    res = math.sqrt(float(r @ r))
    if res <= tol * bnorm:
        return CGResult(x, True, 0, res / bnorm)
    z = precondition(r) if precondition is not None else r.copy()
    p = z.copy()
    rz = float(r @ z)
    step = 0
    for step in range(1, max_steps + 1):
        ap = apply_op(p)
        pap = float(p @ ap)
        if not pap > 0:
            step -= 1
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = math.sqrt(float(r @ r))
        if res <= tol * bnorm:
            return CGResult(x, True, step, res / bnorm)
        z = precondition(r) if precondition is not None else r
        rz_new = float(r @ z)
        p *= rz_new / rz
        p += z
        rz = rz_new
    return CGResult(x, False, step, res / bnorm)


# ---------------------------------------------------------------------------
# Problem definition
# ---------------------------------------------------------------------------


class ReconstructionProblem:
    """Latent-space posterior ``p(psi | d)`` for one scan channel.

    Parameters
    ----------
    scan : SparseScan
    prior_cfg : PriorConfig
        Its ``grid`` must match the scan grid.
    psf_sigma : float
        PSF standard deviation in micrometres.
    use_likelihood : bool
        ``False`` drops the data term entirely (``J := 0``); testing hook.
    """

    def __init__(self, scan: SparseScan, prior_cfg: PriorConfig,
                 psf_sigma: float = DEFAULT_PSF_SIGMA_UM, use_likelihood: bool = True):
        if prior_cfg.grid != scan.spec:
            raise ValueError("prior grid does not match the scan grid")
        self.scan = scan
        self.prior_cfg = prior_cfg
        self.psf_sigma = psf_sigma
        self.model = CorrelatedField(prior_cfg)
        self.response = ForwardOperator(scan.pattern, psf_sigma)
        self.data = np.asarray(scan.data, dtype=float)
        self.sigma = max(scan.noise.sigma, SIGMA_FLOOR)
        self.use_likelihood = use_likelihood

    @property
    def size(self) -> int:
        return self.model.size

    def linearize(self, psi: np.ndarray) -> "ProblemLinearization":
        return ProblemLinearization(self, psi)

    def energy(self, psi: np.ndarray) -> float:
        """Negative log posterior up to a constant."""
        psi = np.asarray(psi, dtype=float)
        value = 0.5 * float(psi @ psi)
        if self.use_likelihood:
            pred = self.response(self.model.crop(self.model.image(psi)))
            res = (pred - self.data) / self.sigma
            value += 0.5 * float(res @ res)
        return value


class ProblemLinearization:
    """Predicted data at ``psi`` together with ``J``, ``J^T`` and the metric."""

    def __init__(self, problem: ReconstructionProblem, psi: np.ndarray):
        self.problem = problem
        self.psi = np.asarray(psi, dtype=float)
        self.field = problem.model.linearize(self.psi)
        self.image = problem.model.crop(self.field.value)
        self.prediction = problem.response(self.image)

    def jvp(self, v: np.ndarray) -> np.ndarray:
        model = self.problem.model
        return self.problem.response(model.crop(self.field.jvp(v)))

    def vjp(self, w: np.ndarray) -> np.ndarray:
        model = self.problem.model
        return self.field.vjp(model.embed(self.problem.response.adjoint(w)))

    def metric(self, v: np.ndarray) -> np.ndarray:
        if not self.problem.use_likelihood:
            return np.array(v, dtype=float)
        return self.vjp(self.jvp(v)) / self.problem.sigma**2 + v

    def energy_and_gradient(self) -> tuple[float, np.ndarray]:
        psi = self.psi
        value = 0.5 * float(psi @ psi)
        grad = psi.copy()
        if self.problem.use_likelihood:
            sigma = self.problem.sigma
            res = (self.prediction - self.problem.data) / sigma
            value += 0.5 * float(res @ res)
            grad += self.vjp(res / sigma)
        return value, grad


def metric_apply(problem: ReconstructionProblem, mean, v) -> np.ndarray:
    """Fisher metric plus prior curvature at ``mean`` applied to ``v``."""
    mean = _flat(mean)
    v = _flat(v)
    if v.shape != (problem.size,) or mean.shape != (problem.size,):
        raise ValueError("latent vector shape mismatch")
    return problem.linearize(mean).metric(v)


def draw_metric_sample(problem: ReconstructionProblem, mean, rng: np.random.Generator,
                       cfg: MGVIConfig = MGVIConfig(),
                       linearization: ProblemLinearization | None = None):
    """Draw ``x ~ N(0, M(mean)^-1)``.

    ``eta = J^T N^-1/2 z1 + z2`` has covariance ``M``; solving ``M x = eta``
    by CG gives the sample. Returns ``(x, converged)``; on CG
    non-convergence the best iterate is returned and a :class:`CGWarning`
    is issued.
    """
    lin = linearization or problem.linearize(_flat(mean))
    z1 = rng.standard_normal(problem.data.size)
    z2 = rng.standard_normal(problem.size)
    eta = z2
    if problem.use_likelihood:
        eta = lin.vjp(z1 / problem.sigma) + z2
    sol = conjugate_gradient(lin.metric, eta, cfg.cg_tolerance, cfg.cg_max_steps)
    if not sol.converged:
        warnings.warn(
            f"sampling CG stopped after {sol.n_steps} steps at relative residual "
            f"{sol.rel_residual:.2e}", CGWarning, stacklevel=2)
    return sol.x, sol.converged


def sampled_kl(problem: ReconstructionProblem, mean, residual_samples) -> tuple[float, np.ndarray]:
    """Sample estimate of the KL (up to constants) and its gradient in ``mean``.

    Averages the negative log posterior over ``mean + x_i`` with the
    residuals ``x_i`` held fixed.
    """
    state = SampledKL(problem, _flat(mean), [_flat(x) for x in residual_samples])
    return state.value, state.gradient


class SampledKL:
    """Sampled KL at one mean, with its gradient and Newton curvature.

    The curvature is the metric at the mean itself rather than its average
    over the samples: at early iterations the samples sit where the sigmoid
    gain differs wildly from the mean's, and the averaged metric then gives
    poorly scaled Newton steps.
    """

    def __init__(self, problem: ReconstructionProblem, mean: np.ndarray, residuals):
        residuals = list(residuals)
        self._at_mean = None
        if not residuals:
            raise ValueError("need at least one residual sample")
        self.problem = problem
        self.mean = mean
        self.residuals = residuals
        self.lins = [problem.linearize(mean + x) for x in residuals]
        total = 0.0
        grad = np.zeros(problem.size)
        for lin in self.lins:
            value, g = lin.energy_and_gradient()
            total += value
            grad += g
        n = len(self.lins)
        self.value = total / n
        self.gradient = grad / n

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value) and bool(np.all(np.isfinite(self.gradient)))

    def metric(self, v: np.ndarray) -> np.ndarray:
        if self._at_mean is None:
            self._at_mean = self.problem.linearize(self.mean)
        return self._at_mean.metric(v)


def _flat(v) -> np.ndarray:
    return v.to_flat() if isinstance(v, LatentVector) else np.asarray(v, dtype=float)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PosteriorEnsemble:
    """Final MGVI state: latent mean plus residual samples ``psi_i - mean``."""

    prior_config: PriorConfig
    pattern: ScanPattern
    mean: np.ndarray
    residuals: list[np.ndarray]
    psf_sigma: float = DEFAULT_PSF_SIGMA_UM
    config: MGVIConfig | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def mean_latent(self) -> LatentVector:
        return LatentVector.from_flat(self.mean, self.prior_config)

    @property
    def residual_samples(self) -> list[LatentVector]:
        return [LatentVector.from_flat(x, self.prior_config) for x in self.residuals]

    def sample_images(self) -> np.ndarray:
        """Cropped images ``f(mean + x_i)``, shape ``(n_samples, n, m)``."""
        model = CorrelatedField(self.prior_config)
        return np.stack([model.crop(model.image(self.mean + x)) for x in self.residuals])


def run_mgvi(scan: SparseScan, prior_cfg: PriorConfig, mgvi_cfg: MGVIConfig = MGVIConfig(),
             psf_sigma: float = DEFAULT_PSF_SIGMA_UM,
             problem: ReconstructionProblem | None = None) -> PosteriorEnsemble:
    """Run MGVI from the prior median and return the final ensemble.

    Deterministic for a given configuration and ``rng_seed``.

    Raises
    ------
    NumericalFailure
        If the KL estimate becomes non-finite.
    """
    problem = problem or ReconstructionProblem(scan, prior_cfg, psf_sigma)
    rng = np.random.default_rng(mgvi_cfg.rng_seed)
    mean = np.zeros(problem.size)
    history = []
    cg_failures = 0
    t0 = time.perf_counter()
    residuals: list[np.ndarray] = []

    for it in range(mgvi_cfg.n_iterations):
        lin = problem.linearize(mean)
        residuals = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CGWarning)
            for _ in range(mgvi_cfg.n_samples // 2):
                x, ok = draw_metric_sample(problem, mean, rng, mgvi_cfg, linearization=lin)
                cg_failures += not ok
                residuals.extend([x, -x])

        state = SampledKL(problem, mean, residuals)
        kl_start = state.value
        _check_finite(kl_start, it)
        state = _newton(state, mgvi_cfg)
        _check_finite(state.value, it)
        mean = state.mean
        kl = state.value
        history.append({"iteration": it, "kl_start": kl_start, "kl_end": kl})
        log.info("MGVI iteration %d: KL %.6g -> %.6g", it, kl_start, kl)

    if cg_failures:
        warnings.warn(f"{cg_failures} sampling CG solves did not converge", CGWarning,
                      stacklevel=2)
    diagnostics = {
        "kl_history": history,
        "cg_failures": cg_failures,
        "wall_time_s": time.perf_counter() - t0,
    }
    return PosteriorEnsemble(prior_cfg, scan.pattern, mean, residuals, psf_sigma,
                             mgvi_cfg, diagnostics)


def _check_finite(kl: float, iteration: int):
    if not math.isfinite(kl):
        raise NumericalFailure(f"non-finite KL estimate in MGVI iteration {iteration}")


def _newton(state: SampledKL, cfg: MGVIConfig) -> SampledKL:
    """Newton-CG on the sampled KL with residuals held fixed."""
    for _ in range(cfg.newton_steps):
        step = conjugate_gradient(state.metric, -state.gradient, cfg.cg_tolerance,
                                  cfg.cg_max_steps)
        accepted = _line_search(state, step.x)
        if accepted is None:
            break
        state = accepted
    return state


def _line_search(state: SampledKL, direction: np.ndarray, max_halvings: int = 30):
    """Backtracking Armijo search; ``None`` if no decrease is found."""
    slope = float(state.gradient @ direction)
    if not slope < 0:
        return None
    alpha = 1.0
    for _ in range(max_halvings):
        # Long trial steps may overflow the spectrum parameters; such points
        # are rejected below, so their floating-point warnings are noise.
        try:
            with np.errstate(all="ignore"):
                trial = SampledKL(state.problem, state.mean + alpha * direction,
                                  state.residuals)
        except (OverflowError, FloatingPointError, ValueError):
            trial = None
        if (trial is not None and trial.finite
                and trial.value <= state.value + 1e-4 * alpha * slope):
            return trial
        alpha *= 0.5
    return None


def posterior_statistics(ens: PosteriorEnsemble) -> tuple[Image, Image]:
    """Pixel-wise posterior mean and population standard deviation."""
    imgs = ens.sample_images()
    grid = ens.prior_config.grid
    mean = imgs.mean(axis=0)
    std = np.sqrt(np.maximum(((imgs - mean) ** 2).mean(axis=0), 0.0))
    return Image(grid, mean), Image(grid, std)


def posterior_mean_image(ens: PosteriorEnsemble) -> Image:
    return posterior_statistics(ens)[0]


def posterior_std_image(ens: PosteriorEnsemble) -> Image:
    return posterior_statistics(ens)[1]
