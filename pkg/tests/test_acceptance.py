"""End-to-end acceptance checks.

Each test records a one-line verdict through ``record_criterion``; the lines
are printed in the "acceptance criteria" section of the pytest summary.
"""

import time
import warnings

import numpy as np
import pytest

from sparse_oam.analyze import (EndmemberSet, enumerate_nnls, mae, max_error, mrsd, ssim,
                                unmix_cube, unmix_pixel)
from sparse_oam.forward import (DARK_NOISE_SIGMA_V, ForwardOperator, NoiseModel, ScanPattern,
                                SparseScan, apply_stages, apply_stages_adjoint,
                                sparsity_fraction)
from sparse_oam.grid import GridSpec, HyperCube, Image, gaussian_blur_array, hartley
from sparse_oam.inference import (CGWarning, MGVIConfig, ReconstructionProblem, metric_apply,
                                  posterior_statistics, run_mgvi, sampled_kl)
from sparse_oam.prior import CorrelatedField, PriorConfig, choose_scale_r, jvp, vjp
from sparse_oam.simulate import (acquire, acquisition_time, calibrate_timing, make_phantom,
                                 speedup)

from test_inference import toy_problem

CELLS = GridSpec(256, 256, 5.0)
SEED = 0


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


class CellsScenario:
    """Standard cells phantom, its noiseless full scan and cached reconstructions."""

    def __init__(self):
        self.phantom = make_phantom("cells", CELLS, np.random.default_rng(SEED))
        full = ScanPattern.full(CELLS)
        self.reference = Image(CELLS, ForwardOperator(full)(self.phantom.truth.values))
        self._runs = {}

    def scan(self, w):
        pattern = ScanPattern(CELLS, w, 15, 50)
        return acquire(self.phantom, pattern, DARK_NOISE_SIGMA_V,
                       rng=np.random.default_rng(SEED + 1))[0]

    def run(self, w, preset="full"):
        key = (w, preset)
        if key not in self._runs:
            scan = self.scan(w)
            prior = PriorConfig(CELLS, r=choose_scale_r(scan))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CGWarning)
                t0 = time.perf_counter()
                ens = run_mgvi(scan, prior, MGVIConfig.preset(preset, rng_seed=SEED))
                wall = time.perf_counter() - t0
            mean, std = posterior_statistics(ens)
            self._runs[key] = {"mean": mean, "std": std, "wall": wall}
        return self._runs[key]


@pytest.fixture(scope="module")
def cells():
    return CellsScenario()


def test_operator_correctness(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    spec = GridSpec(64, 64, 5.0)
    x = rng.standard_normal(spec.shape)
    y = rng.standard_normal(spec.shape)
    worst = {}
    worst["ht_involution"] = np.linalg.norm(hartley(hartley(x)) - x) / np.linalg.norm(x)
    sigma_px = 1.0
    worst["psf_adjoint"] = rel(np.vdot(gaussian_blur_array(x, sigma_px), y),
                               np.vdot(x, gaussian_blur_array(y, sigma_px)))
    pattern = ScanPattern(spec, 4, 15, 50)
    d = rng.standard_normal(pattern.data_size)
    worst["stages_adjoint"] = rel(np.vdot(apply_stages(Image(spec, x), pattern), d),
                                  np.vdot(x, apply_stages_adjoint(d, pattern).values))
    op = ForwardOperator(pattern)
    worst["response_adjoint"] = rel(np.vdot(op(x), d), np.vdot(x, op.adjoint(d)))

    cfg = PriorConfig(spec, r=1.0)
    model = CorrelatedField(cfg)
    truth = model.crop(model.image(rng.standard_normal(cfg.latent_size)))
    scan = SparseScan(pattern, NoiseModel(1e-2), op(truth))
    prob = ReconstructionProblem(scan, cfg)
    sym, floor = 0.0, np.inf
    for _ in range(5):
        mean = 0.3 * rng.standard_normal(prob.size)
        v, w = rng.standard_normal((2, prob.size))
        mv, mw = metric_apply(prob, mean, v), metric_apply(prob, mean, w)
        sym = max(sym, rel(mv @ w, v @ mw))
        floor = min(floor, (mv @ v) / (v @ v))
    worst["metric_symmetry"] = sym
    elapsed = time.perf_counter() - t0
    passed = (worst["ht_involution"] <= 1e-12 and max(worst["psf_adjoint"],
              worst["stages_adjoint"], worst["response_adjoint"], sym) <= 1e-9
              and floor >= 1.0 and elapsed < 10)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record_criterion(1, passed, f"{detail}, min v'Mv/v'v {floor:.3f}, "
                                       f"{elapsed:.1f} s")


def test_linearizations(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    cfg = PriorConfig(GridSpec(8, 8, 5.0), r=1.0)
    model = CorrelatedField(cfg)
    eps = 1e-5
    jvp_err = vjp_err = 0.0
    for _ in range(10):
        psi = 0.5 * rng.standard_normal(cfg.latent_size)
        t = rng.standard_normal(cfg.latent_size)
        fd = (model.image(psi + eps * t) - model.image(psi - eps * t)) / (2 * eps)
        exact = jvp(cfg, psi, t)
        jvp_err = max(jvp_err, np.linalg.norm(exact - fd) / np.linalg.norm(exact))
        g = rng.standard_normal(cfg.padded_shape)
        vjp_err = max(vjp_err, rel(np.vdot(fd, g), np.vdot(t, vjp(cfg, psi, g).to_flat())))

    prob, _ = toy_problem(n=8)
    mean = 0.3 * rng.standard_normal(prob.size)
    residuals = [0.1 * rng.standard_normal(prob.size) for _ in range(2)]
    residuals += [-x for x in residuals]
    _, grad = sampled_kl(prob, mean, residuals)
    kl_err = 0.0
    for _ in range(10):
        t = rng.standard_normal(prob.size)
        t /= np.linalg.norm(t)
        fd = (sampled_kl(prob, mean + eps * t, residuals)[0]
              - sampled_kl(prob, mean - eps * t, residuals)[0]) / (2 * eps)
        kl_err = max(kl_err, rel(fd, grad @ t))
    elapsed = time.perf_counter() - t0
    passed = jvp_err <= 1e-5 and vjp_err <= 1e-5 and kl_err <= 1e-4 and elapsed < 30
    assert record_criterion(2, passed, f"jvp {jvp_err:.1e}, vjp {vjp_err:.1e}, "
                                       f"KL gradient {kl_err:.1e}, {elapsed:.1f} s")


def test_self_consistency(record_criterion):
    t0 = time.perf_counter()
    spec = GridSpec(64, 64, 5.0)
    phantom = make_phantom("prior-draw", spec, np.random.default_rng(SEED))
    scan = acquire(phantom, ScanPattern.full(spec), 0.0)[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CGWarning)
        ens = run_mgvi(scan, PriorConfig(spec, r=choose_scale_r(scan)),
                       MGVIConfig.preset("full", rng_seed=SEED))
    mean, _ = posterior_statistics(ens)
    value = ssim(mean, phantom.truth)
    elapsed = time.perf_counter() - t0
    passed = value >= 0.99 and elapsed < 120
    assert record_criterion(3, passed, f"SSIM {value:.4f}, {elapsed:.1f} s")


def test_sparse_reconstruction(cells, record_criterion):
    run = cells.run(4)
    value = ssim(run["mean"], cells.reference)
    passed = value >= 0.93 and run["wall"] < 600
    assert record_criterion(4, passed, f"SSIM {value:.4f} at 92.5% sparsity "
                                       f"(target 0.95), {run['wall']:.0f} s")


def test_sparsity_sweep(cells, record_criterion):
    runs = {w: cells.run(w) for w in (2, 4, 8)}
    maes = [mae(runs[w]["mean"], cells.reference) for w in (2, 4, 8)]
    maxes = [max_error(runs[w]["mean"], cells.reference) for w in (2, 4, 8)]
    spread = max(maes) / min(maes) - 1.0
    monotone = all(a <= b for a, b in zip(maxes, maxes[1:]))
    total = sum(r["wall"] for r in runs.values())
    passed = spread < 0.5 and monotone and total < 1800
    detail = (f"MAE {', '.join(f'{v:.5f}' for v in maes)} (spread {spread:.0%}), "
              f"max error {', '.join(f'{v:.4f}' for v in maxes)}, {total:.0f} s")
    assert record_criterion(5, passed, detail)


def test_uncertainty_calibration(cells, record_criterion):
    run = cells.run(4)
    value = mrsd(run["mean"], run["std"])
    inside = np.abs(run["mean"].values - cells.reference.values) <= 3 * run["std"].values
    coverage = float(inside.mean())
    passed = 0 < value < 0.15 and coverage >= 0.9
    assert record_criterion(6, passed, f"MRSD {value:.2e}, 3-sigma coverage {coverage:.1%}")


def test_approximate_preset(cells, record_criterion):
    full, approx = cells.run(4, "full"), cells.run(4, "approx")
    ratio = approx["wall"] / full["wall"]
    mae_full = mae(full["mean"], cells.reference)
    mae_approx = mae(approx["mean"], cells.reference)
    std_full, std_approx = full["std"].values.max(), approx["std"].values.max()
    passed = ratio <= 0.5 and mae_approx <= 2 * mae_full and std_approx >= std_full
    assert record_criterion(7, passed, f"time ratio {ratio:.2f}, MAE {mae_approx:.5f} vs "
                                       f"{mae_full:.5f}, max std {std_approx:.2e} vs "
                                       f"{std_full:.2e}")


def test_sparsity_and_timing(record_criterion):
    carbon = GridSpec(400, 400, 5.0)
    full = ScanPattern.full(carbon)
    sparse = ScanPattern(carbon, 4, 15, 50)
    s2 = sparsity_fraction(ScanPattern(carbon, 2, 15, 50))
    s4 = sparsity_fraction(sparse)
    dwell = speedup(full, sparse)
    tm = calibrate_timing(23.43 * 60, 2.15 * 60, full, sparse)
    t_full = acquisition_time(full, tm=tm) / 60
    t_sparse = acquisition_time(sparse, tm=tm) / 60
    passed = (s2 == 0.85 and s4 == 0.925 and rel(dwell, 40 / 3) <= 1e-12
              and rel(t_full, 23.43) <= 0.05 and rel(t_sparse, 2.15) <= 0.05)
    assert record_criterion(8, passed, f"sparsity {s2}, {s4}; dwell speedup {dwell:.4f}; "
                                       f"calibrated {t_full:.2f} / {t_sparse:.2f} min")


def test_unmixing_oracle(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        dim = int(rng.integers(2, 5))
        k = int(rng.integers(2, dim + 1))
        a = rng.standard_normal((dim, k))
        y = rng.standard_normal(dim)
        x = unmix_pixel(y, EndmemberSet(tuple("abcd"[:k]), a.T))
        worst = max(worst, float(np.abs(x - enumerate_nnls(a, y)).max()))

    spec = GridSpec(16, 16, 5.0)
    spectra = rng.uniform(0.1, 1.0, (3, 6))
    weights = rng.dirichlet(np.ones(3), spec.shape).transpose(2, 0, 1)
    cube = HyperCube.from_array(spec, np.arange(6) * 10.0 + 1000.0,
                                np.einsum("kc,kij->cij", spectra, weights))
    result = unmix_cube(cube, EndmemberSet(("a", "b", "c"), spectra))
    mix_err = float(np.abs(np.asarray(result.maps) - weights).max())
    elapsed = time.perf_counter() - t0
    passed = worst <= 1e-8 and mix_err <= 1e-6 and elapsed < 10
    assert record_criterion(9, passed, f"NNLS vs enumeration {worst:.1e}, exact mixture "
                                       f"{mix_err:.1e}, {elapsed:.1f} s")


def test_metric_formulas(record_criterion, rng):
    spec = GridSpec(8, 8, 5.0)
    x = Image(spec, rng.uniform(0.1, 1.0, spec.shape))
    same = ssim(x, x)
    board = np.indices(spec.shape).sum(axis=0) % 2
    anti = ssim(Image(spec, board), Image(spec, 1 - board))
    ratio = mrsd(x, Image(spec, 0.047 * x.values))
    passed = same == pytest.approx(1.0, abs=1e-12) and abs(anti + 0.9964) <= 1e-3 \
        and ratio == pytest.approx(0.047, rel=1e-14)
    assert record_criterion(10, passed, f"ssim(x,x) {same:.12f}, checkerboard {anti:.5f}, "
                                        f"MRSD {ratio:.6f}")
