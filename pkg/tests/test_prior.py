import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparse_oam.forward import NoiseModel, ScanPattern, SparseScan
from sparse_oam.grid import GridSpec, hartley
from sparse_oam.prior import (CorrelatedField, LatentVector, PriorConfig, choose_scale_r,
                              generate_field, generate_image, jvp, latent_to_params,
                              matern_spectrum, vjp, wavevector_grid)


@pytest.fixture
def cfg():
    return PriorConfig(GridSpec(8, 8, 5.0), r=0.2)


def random_latent(cfg, rng, scale=1.0):
    return LatentVector.from_flat(scale * rng.standard_normal(cfg.latent_size), cfg)


class TestPriorConfig:
    def test_padded_grid_covers_margins(self, cfg):
        n, m = cfg.padded_shape
        assert n >= 8 + 2 * cfg.margin and m >= 8 + 2 * cfg.margin
        assert cfg.latent_size == n * m + 4

    def test_default_length_scale(self):
        cfg = PriorConfig(GridSpec(30, 50, 5.0), r=1.0)
        assert cfg.b_log_mean == pytest.approx(math.log(3.0))

    def test_rejects_bad_hyperparameters(self):
        spec = GridSpec(8, 8, 5.0)
        with pytest.raises(ValueError):
            PriorConfig(spec, r=0.0)
        with pytest.raises(ValueError):
            PriorConfig(spec, r=1.0, s_std=0.0)
        with pytest.raises(ValueError):
            PriorConfig(spec, r=1.0, margin=-1)

    def test_dict_round_trip(self, cfg):
        assert PriorConfig.from_dict(cfg.to_dict()) == cfg


class TestMaternSpectrum:
    def test_origin_equals_amplitude(self):
        assert matern_spectrum(2.5, 3.0, -4.0, 0, 0) == 2.5

    def test_formula_value(self):
        assert matern_spectrum(1.0, 2.0, -4.0, 2, 0) == pytest.approx(0.5, rel=1e-15)

    def test_sign_constraints(self):
        with pytest.raises(ValueError):
            matern_spectrum(3.0, 1.0, 0.0, 1, 1)
        with pytest.raises(ValueError):
            matern_spectrum(-1.0, 1.0, -1.0, 1, 1)
        with pytest.raises(ValueError):
            matern_spectrum(1.0, 0.0, -1.0, 1, 1)

    def test_flat_limit(self):
        kr, kc = wavevector_grid((64, 64))
        np.testing.assert_allclose(matern_spectrum(3.0, 1.0, -1e-9, kr, kc), 3.0, rtol=1e-6)

    @given(st.floats(0.1, 10), st.floats(0.1, 20), st.floats(-8, -0.01))
    def test_radially_non_increasing(self, a, b, c):
        k = np.arange(0, 100)
        e = matern_spectrum(a, b, c, k, 0)
        assert np.all(np.diff(e) <= 0)

    def test_lattice_is_centred_and_signed(self):
        kr, kc = wavevector_grid((5, 4))
        np.testing.assert_array_equal(kr[:, 0], [0, 1, 2, -2, -1])
        np.testing.assert_array_equal(kc[0], [0, 1, -2, -1])


class TestLatentToParams:
    def test_origin(self, cfg):
        a, b, c, s = latent_to_params(cfg, LatentVector.zeros(cfg))
        assert (a, b, c, s) == pytest.approx(
            (math.exp(cfg.a_log_mean), math.exp(cfg.b_log_mean), -math.exp(cfg.c_log_mean), 0.5))

    def test_offset_map(self, cfg):
        lat = LatentVector(np.zeros(cfg.padded_shape), s_lat=2.0)
        assert latent_to_params(cfg, lat)[3] == pytest.approx(1.0)

    @given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-30, 30))
    def test_signs_for_any_latent(self, pa, pb, pc):
        cfg = PriorConfig(GridSpec(8, 8, 5.0), r=1.0)
        a, b, c, _ = latent_to_params(cfg, [pa, pb, pc, 0.0])
        assert a > 0 and b > 0 and c < 0

    def test_offset_push_forward(self, cfg):
        draws = np.random.default_rng(3).standard_normal(10_000)
        s = np.array([latent_to_params(cfg, [0, 0, 0, p])[3] for p in draws])
        assert abs(s.mean() - 0.5) <= 0.02
        assert abs(s.std() - 0.25) <= 0.02


class TestGenerate:
    def test_zero_amplitudes_give_zero_field(self, cfg):
        assert not generate_field(cfg, LatentVector.zeros(cfg)).any()

    def test_single_dc_mode(self, cfg):
        xi = np.zeros(cfg.padded_shape)
        xi[0, 0] = 1.0
        a = latent_to_params(cfg, LatentVector.zeros(cfg))[0]
        n = xi.size
        np.testing.assert_allclose(generate_field(cfg, LatentVector(xi)), a / math.sqrt(n),
                                   rtol=1e-12)

    def test_hartley_power_matches_spectrum(self):
        # HT is unitary and an involution, so HT(GF) = E * xi and the power
        # per mode averages to E^2; standard error per |k| shell is
        # E^2 sqrt(2 / (draws * modes in shell)).
        cfg = PriorConfig(GridSpec(8, 8, 5.0), r=1.0)
        model = CorrelatedField(cfg)
        rng = np.random.default_rng(0)
        draws = 200
        power = np.zeros(cfg.padded_shape)
        psi = np.zeros(cfg.latent_size)
        for _ in range(draws):
            psi[:-4] = rng.standard_normal(cfg.latent_size - 4)
            power += hartley(model.field(psi)) ** 2
        power /= draws
        e2 = model.spectrum(psi) ** 2
        kr, kc = wavevector_grid(cfg.padded_shape)
        k2 = (kr**2 + kc**2).ravel()
        for shell in np.unique(k2):
            sel = k2 == shell
            ratio = power.ravel()[sel].mean() / e2.ravel()[sel][0]
            stderr = math.sqrt(2.0 / (draws * sel.sum()))
            assert abs(ratio - 1.0) <= 3 * stderr, (shell, ratio, stderr)

    def test_prior_origin_image(self, cfg):
        img = generate_image(cfg, LatentVector.zeros(cfg))
        np.testing.assert_allclose(img.values, 0.2 / (1 + math.exp(-0.5)), rtol=1e-14)
        assert img.shape == cfg.padded_shape

    def test_saturation(self, cfg):
        high = generate_image(cfg, LatentVector(np.zeros(cfg.padded_shape), s_lat=200.0))
        low = generate_image(cfg, LatentVector(np.zeros(cfg.padded_shape), s_lat=-200.0))
        np.testing.assert_allclose(high.values, 0.2, rtol=1e-12)
        assert np.all(low.values < 0.2 * math.exp(-49.0))

    def test_strictly_inside_range(self, cfg, rng):
        for _ in range(10):
            v = generate_image(cfg, random_latent(cfg, rng)).values
            assert v.min() > 0 and v.max() < cfg.r

    def test_deterministic(self, cfg, rng):
        lat = random_latent(cfg, rng)
        np.testing.assert_array_equal(generate_image(cfg, lat).values,
                                      generate_image(cfg, lat).values)


class TestLinearization:
    def test_adjoint(self, cfg, rng):
        for _ in range(20):
            lat = random_latent(cfg, rng, 0.5)
            t = rng.standard_normal(cfg.latent_size)
            g = rng.standard_normal(cfg.padded_shape)
            lhs = np.vdot(jvp(cfg, lat, t), g)
            rhs = np.vdot(t, vjp(cfg, lat, g).to_flat())
            assert abs(lhs - rhs) <= 1e-9 * abs(lhs) + 1e-12

    def test_against_central_differences(self, cfg, rng):
        eps = 1e-5
        model = CorrelatedField(cfg)
        for _ in range(10):
            psi = 0.5 * rng.standard_normal(cfg.latent_size)
            t = rng.standard_normal(cfg.latent_size)
            fd = (model.image(psi + eps * t) - model.image(psi - eps * t)) / (2 * eps)
            exact = jvp(cfg, psi, t)
            assert np.linalg.norm(exact - fd) <= 1e-5 * np.linalg.norm(exact)

    def test_scalar_directions(self, cfg, rng):
        eps = 1e-5
        model = CorrelatedField(cfg)
        psi = 0.5 * rng.standard_normal(cfg.latent_size)
        for i in range(1, 5):
            t = np.zeros(cfg.latent_size)
            t[-i] = 1.0
            fd = (model.image(psi + eps * t) - model.image(psi - eps * t)) / (2 * eps)
            exact = jvp(cfg, psi, t)
            assert np.linalg.norm(exact - fd) <= 1e-5 * np.linalg.norm(exact)

    def test_zero_tangent(self, cfg, rng):
        assert not jvp(cfg, random_latent(cfg, rng), np.zeros(cfg.latent_size)).any()

    def test_dimension_mismatch(self, cfg):
        with pytest.raises(ValueError):
            jvp(cfg, LatentVector.zeros(cfg), np.zeros(cfg.latent_size - 1))


class TestChooseScale:
    def _scan(self, data, sigma=9.318e-7):
        p = ScanPattern(GridSpec(1, len(data), 5.0), 1, 50, 50)
        return SparseScan(p, NoiseModel(sigma), data)

    def test_formula(self):
        assert choose_scale_r(self._scan([0.02, 0.1, 0.05])) == pytest.approx(0.15)
        assert choose_scale_r(self._scan([1.0, 0.5]), kappa=1.0) == 1.0

    def test_noise_floor(self):
        assert choose_scale_r(self._scan([-0.1, 0.0])) == pytest.approx(9.318e-6)
