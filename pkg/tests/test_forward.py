import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparse_oam.forward import (DARK_NOISE_SIGMA_V, NoiseModel, ScanPattern, SparseScan,
                                apply_stages, apply_stages_adjoint, forward_adjoint,
                                forward_apply, log_likelihood, sparsity_fraction)
from sparse_oam.grid import GridSpec, Image


def rows_image(n, m):
    return Image(GridSpec(n, m, 1.0), np.repeat(np.arange(1, n + 1, dtype=float), m))


class TestScanPattern:
    def test_measured_lines_are_one_based_stride(self):
        p = ScanPattern(GridSpec(10, 3, 5.0), 4)
        assert p.measured_lines == (1, 5, 9)
        np.testing.assert_array_equal(p.row_index, [0, 4, 8])
        assert p.data_size == 9

    def test_pulse_invariants(self):
        spec = GridSpec(4, 4, 5.0)
        with pytest.raises(ValueError):
            ScanPattern(spec, 1, 60, 50)
        with pytest.raises(ValueError):
            ScanPattern(spec, 0)
        with pytest.raises(ValueError):
            ScanPattern(spec, 1, 0)

    def test_noise_model_defaults_and_rejects(self):
        assert NoiseModel().sigma == DARK_NOISE_SIGMA_V
        with pytest.raises(ValueError):
            NoiseModel(0.0)


class TestSparsity:
    spec = GridSpec(400, 400, 5.0)

    def test_standard_levels(self):
        assert sparsity_fraction(ScanPattern(self.spec, 4, 15, 50)) == pytest.approx(0.925, abs=1e-15)
        assert sparsity_fraction(ScanPattern(self.spec, 2, 15, 50)) == pytest.approx(0.85, abs=1e-15)
        assert sparsity_fraction(ScanPattern.full(self.spec)) == 0.0

    @given(st.integers(1, 9), st.integers(1, 50))
    def test_monotone_in_stride_and_pulses(self, w, p):
        base = sparsity_fraction(ScanPattern(self.spec, w, p, 50))
        assert sparsity_fraction(ScanPattern(self.spec, w + 1, p, 50)) >= base
        if p > 1:
            assert sparsity_fraction(ScanPattern(self.spec, w, p - 1, 50)) >= base


class TestStages:
    def test_selects_rows_in_scan_order(self):
        img = rows_image(4, 4)
        d = apply_stages(img, ScanPattern(img.spec, 2))
        np.testing.assert_array_equal(d, [1] * 4 + [3] * 4)
        d8 = apply_stages(rows_image(8, 2), ScanPattern(GridSpec(8, 2, 1.0), 4))
        np.testing.assert_array_equal(d8, [1, 1, 5, 5])

    def test_stride_one_is_flattening(self, rng):
        img = Image(GridSpec(3, 5, 1.0), rng.random(15))
        np.testing.assert_array_equal(apply_stages(img, ScanPattern.full(img.spec)),
                                      img.values.ravel())

    def test_adjoint_scatters(self):
        p = ScanPattern(GridSpec(4, 2, 1.0), 2)
        out = apply_stages_adjoint([1, 1, 3, 3], p).values
        np.testing.assert_array_equal(out, [[1, 1], [0, 0], [3, 3], [0, 0]])
        assert not apply_stages_adjoint(np.zeros(4), p).values.any()

    def test_adjoint_identity_and_left_inverse(self, rng):
        for w in (1, 2, 3, 4):
            p = ScanPattern(GridSpec(9, 5, 1.0), w)
            for _ in range(20):
                x = Image(p.full_spec, rng.standard_normal(45))
                y = rng.standard_normal(p.data_size)
                lhs = apply_stages(x, p) @ y
                rhs = np.vdot(x.values, apply_stages_adjoint(y, p).values)
                assert abs(lhs - rhs) <= 1e-12 * np.linalg.norm(x.values) * np.linalg.norm(y)
                np.testing.assert_array_equal(apply_stages(apply_stages_adjoint(y, p), p), y)

    def test_length_and_spec_mismatch(self):
        p = ScanPattern(GridSpec(4, 4, 1.0), 2)
        with pytest.raises(ValueError):
            apply_stages_adjoint(np.zeros(7), p)
        with pytest.raises(ValueError):
            apply_stages(Image(GridSpec(4, 4, 2.0), np.zeros(16)), p)


class TestForward:
    def test_constant_image_gives_constant_data(self):
        spec = GridSpec(12, 10, 5.0)
        for w in (1, 2, 4):
            d = forward_apply(Image(spec, np.full(120, 0.7)), ScanPattern(spec, w))
            np.testing.assert_allclose(d, 0.7, rtol=1e-12)

    def test_impulse_gives_gaussian_row_profile(self):
        spec = GridSpec(41, 41, 1.0)
        x = np.zeros((41, 41))
        x[20, 20] = 1.0
        d = forward_apply(Image(spec, x), ScanPattern.full(spec), psf_sigma=2.0).reshape(41, 41)
        row = d[20]
        k = np.arange(-20, 21)
        g = np.exp(-k**2 / 8.0)
        g2 = np.outer(g, g)
        np.testing.assert_allclose(row[10:31], (g2 / g2.sum())[20, 10:31], atol=1e-7)
        assert row.argmax() == 20

    def test_linearity(self, rng):
        spec = GridSpec(16, 16, 5.0)
        p = ScanPattern(spec, 2)
        x, y = rng.standard_normal((2, 256))
        a, b = 0.3, -1.7
        lhs = forward_apply(Image(spec, a * x + b * y), p)
        rhs = a * forward_apply(Image(spec, x), p) + b * forward_apply(Image(spec, y), p)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10 * np.abs(rhs).max())

    def test_adjoint_random_pairs(self, rng):
        spec = GridSpec(16, 16, 5.0)
        for w in (1, 2, 4):
            p = ScanPattern(spec, w)
            for _ in range(20):
                x = rng.standard_normal(256)
                y = rng.standard_normal(p.data_size)
                lhs = forward_apply(Image(spec, x), p) @ y
                rhs = np.vdot(x, forward_adjoint(y, p).values)
                assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(x) * np.linalg.norm(y)

    def test_adjoint_edge_cases(self, rng):
        spec = GridSpec(6, 5, 5.0)
        assert not forward_adjoint(np.zeros(30), ScanPattern.full(spec)).values.any()
        d = rng.standard_normal(30)
        out = forward_adjoint(d, ScanPattern.full(spec), psf_sigma=0.01)
        np.testing.assert_array_equal(out.values, d.reshape(6, 5))
        with pytest.raises(ValueError):
            forward_adjoint(np.zeros(29), ScanPattern.full(spec))


class TestLogLikelihood:
    spec = GridSpec(4, 4, 5.0)
    sigma = 0.01

    def _scan(self, image, offsets):
        p = ScanPattern(self.spec, 2)
        d = forward_apply(image, p) + offsets
        return SparseScan(p, NoiseModel(self.sigma), d)

    def test_maximum_at_zero_residual(self, rng):
        img = Image(self.spec, rng.random(16))
        scan = self._scan(img, 0.0)
        n = scan.data.size
        expected = -0.5 * n * math.log(2 * math.pi * self.sigma**2)
        assert log_likelihood(scan, img) == pytest.approx(expected, rel=1e-12)

    def test_unit_residual_costs_half(self, rng):
        img = Image(self.spec, rng.random(16))
        offsets = np.zeros(8)
        offsets[3] = self.sigma
        top = log_likelihood(self._scan(img, 0.0), img)
        assert log_likelihood(self._scan(img, offsets), img) == pytest.approx(top - 0.5, rel=1e-12)

    def test_doubling_residual(self, rng):
        img = Image(self.spec, rng.random(16))
        r = rng.standard_normal(8) * self.sigma
        top = log_likelihood(self._scan(img, 0.0), img)
        one = log_likelihood(self._scan(img, r), img) - top
        two = log_likelihood(self._scan(img, 2 * r), img) - top
        assert two - one == pytest.approx(-1.5 * (r @ r) / self.sigma**2, rel=1e-9)

    def test_concave_along_random_directions(self, rng):
        img = Image(self.spec, rng.random(16))
        scan = self._scan(img, 0.0)
        top = log_likelihood(scan, img)
        for _ in range(10):
            v = rng.standard_normal(16)
            assert log_likelihood(scan, Image(self.spec, img.values.ravel() + 1e-3 * v)) < top


class TestSparseScan:
    def test_invariants(self):
        p = ScanPattern(GridSpec(4, 3, 5.0), 2)
        with pytest.raises(ValueError):
            SparseScan(p, NoiseModel(), np.zeros(5))
        with pytest.raises(ValueError):
            SparseScan(p, NoiseModel(), [0, 0, 0, 0, 0, np.nan])
        assert SparseScan(p, NoiseModel(), np.zeros(6)).spec == p.full_spec
