import numpy as np
import pytest

from dirfmm import kernel
from oracles import bessel_ref

# Frozen reference values (extended-precision series, see oracles.py).
H0_AT_1 = 0.7651976865579666 + 0.08825696421567697j
H1_AT_1 = 0.4400505857449335 - 0.7812128213002887j


class TestHankelAccuracy:
    def test_hankel0_vs_oracle(self, hankel_grid):
        x, h0_ref, _ = hankel_grid
        err = np.abs(kernel.hankel0(x) - h0_ref)
        assert err.max() <= 1e-12

    def test_hankel1_vs_oracle(self, hankel_grid):
        x, _, h1_ref = hankel_grid
        err = np.abs(kernel.hankel1(x) - h1_ref)
        # |Y1| ~ 2/(pi*x) reaches 6.4e5 at x=1e-6 where one double ulp is
        # ~1.2e-10, so a pure 1e-12 absolute bound is unrepresentable; the
        # 1e-15*|H1| term is the representability floor (~6 ulp).
        assert np.all(err <= 1e-12 + 1e-15 * np.abs(h1_ref))

    def test_wronskian(self, hankel_grid):
        x, _, _ = hankel_grid
        h0 = kernel.hankel0(x)
        h1 = kernel.hankel1(x)
        w = h1.real * h0.imag - h0.real * h1.imag  # J1 Y0 - J0 Y1
        exact = 2.0 / (np.pi * x)
        assert np.max(np.abs(w - exact) / exact) <= 1e-10

    def test_frozen_values_at_1(self):
        assert abs(kernel.hankel0(1.0) - H0_AT_1) < 1e-13
        assert abs(kernel.hankel1(1.0) - H1_AT_1) < 1e-13

    def test_scalar_returns_complex(self):
        assert isinstance(kernel.hankel0(2.0), complex)
        assert isinstance(kernel.hankel1(2.0), complex)

    def test_large_argument_magnitude(self):
        # |H0(x)| ~ sqrt(2/(pi x)) with O(1/x) relative correction
        for x in [50.0, 1e3, 1e5]:
            amp = np.sqrt(2.0 / (np.pi * x))
            assert abs(abs(kernel.hankel0(x)) / amp - 1.0) <= 1.0 / x

    def test_small_argument_log_behaviour(self):
        x = 1e-8
        h = kernel.hankel0(x)
        assert np.isfinite(h.real) and np.isfinite(h.imag)
        lead = (2.0 / np.pi) * (np.log(x / 2.0) + np.euler_gamma)
        assert abs(h.imag - lead) / abs(lead) < 1e-10

    def test_derivative_identity(self):
        # d/dx H0(x) = -H1(x), central difference
        h = 1e-6
        for x in [1.0, 10.0, 100.0]:
            fd = (kernel.hankel0(x + h) - kernel.hankel0(x - h)) / (2 * h)
            assert abs(fd + kernel.hankel1(x)) / abs(kernel.hankel1(x)) < 1e-6

    @pytest.mark.parametrize("fn", [kernel.hankel0, kernel.hankel1])
    @pytest.mark.parametrize("bad", [0.0, -1.0, np.nan, np.inf])
    def test_domain_errors(self, fn, bad):
        with pytest.raises(ValueError):
            fn(bad)
        with pytest.raises(ValueError):
            fn(np.array([1.0, bad]))


class TestFastMode:
    def test_fast_vs_oracle(self, hankel_grid):
        x, h0_ref, h1_ref = hankel_grid
        assert np.abs(kernel.hankel0(x, fast=True) - h0_ref).max() <= 1e-10
        err1 = np.abs(kernel.hankel1(x, fast=True) - h1_ref)
        assert np.all(err1 <= 1e-10 + 1e-15 * np.abs(h1_ref))

    def test_fast_identical_below_cutoff(self):
        x = np.linspace(0.1, 19.9, 57)
        assert np.array_equal(kernel.hankel0(x, fast=True), kernel.hankel0(x))
        assert np.array_equal(kernel.hankel1(x, fast=True), kernel.hankel1(x))

    def test_fast_kernel_matrix_near_cutoff(self):
        rng = np.random.default_rng(7)
        # distances straddling the asymptotic cutoff 2*pi*r = 20
        t = rng.uniform(-1, 1, (40, 2))
        s = rng.uniform(-1, 1, (40, 2)) + np.array([3.5, 0.0])
        a = kernel.kernel_matrix(t, s, fast=True)
        b = kernel.kernel_matrix(t, s)
        assert np.abs(a - b).max() <= 1e-10


class TestHelmholtzG:
    def test_symmetry_bit_exact(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-5, 5, (100, 2))
        y = rng.uniform(-5, 5, (100, 2))
        assert np.array_equal(kernel.helmholtz_g(x, y), kernel.helmholtz_g(y, x))

    def test_translation_invariance_bit_exact(self):
        # points on a dyadic grid, integer shift: coordinates stay exact
        rng = np.random.default_rng(1)
        x = rng.integers(-320, 320, (50, 2)) / 64.0
        y = rng.integers(-320, 320, (50, 2)) / 64.0 + np.array([7.0, 7.0])
        t = np.array([13.0, -6.0])
        assert np.array_equal(kernel.helmholtz_g(x + t, y + t), kernel.helmholtz_g(x, y))

    def test_unit_distance_vs_oracle(self):
        h0_ref, _ = bessel_ref(2.0 * np.pi)
        g = kernel.helmholtz_g(np.array([0.3, 0.4]), np.array([0.3 + 0.6, 0.4 + 0.8]))
        assert abs(g - 0.25j * h0_ref) < 1e-14

    def test_coincident_raises(self):
        p = np.array([0.5, -0.25])
        with pytest.raises(ValueError):
            kernel.helmholtz_g(p, p)


class TestCombinedKernel:
    def test_perpendicular_normal(self):
        x = np.array([2.0, 1.0])
        y = np.array([-1.5, 1.0])  # x - y along +e1
        ny = np.array([0.0, 1.0])
        got = kernel.combined_kernel(x, y, ny, eta=np.pi)
        want = -1j * np.pi * kernel.helmholtz_g(x, y)
        assert got == want

    @pytest.mark.parametrize("dist", [0.5, 3.0])
    def test_derivative_vs_finite_difference(self, dist):
        x = np.array([0.1, 0.2])
        u = np.array([np.cos(0.7), np.sin(0.7)])
        y = x - dist * u
        ny = np.array([np.cos(2.1), np.sin(2.1)])
        h = 1e-5
        fd = (kernel.helmholtz_g(x, y + h * ny) - kernel.helmholtz_g(x, y - h * ny)) / (2 * h)
        got = kernel.combined_kernel(x, y, ny, eta=0.0)
        assert abs(got - fd) / abs(fd) < 1e-6

    def test_linearity_in_eta(self):
        rng = np.random.default_rng(3)
        x, y = rng.uniform(-2, 2, (2, 2))
        a = rng.normal(size=2)
        ny = a / np.hypot(*a)
        total = kernel.combined_kernel(x, y, ny, eta=np.pi)
        parts = kernel.combined_kernel(x, y, ny, eta=0.0) - 1j * np.pi * kernel.helmholtz_g(x, y)
        assert abs(total - parts) <= 1e-15 * abs(total)

    def test_coincident_raises(self):
        p = np.array([1.0, 1.0])
        with pytest.raises(ValueError):
            kernel.combined_kernel(p, p, np.array([1.0, 0.0]), eta=np.pi)


class TestMatrices:
    def test_kernel_matrix_matches_pointwise(self):
        rng = np.random.default_rng(5)
        t = rng.uniform(-3, 3, (17, 2))
        s = rng.uniform(4, 9, (23, 2))
        m = kernel.kernel_matrix(t, s)
        assert m.shape == (17, 23)
        loop = np.array([[kernel.helmholtz_g(ti, sj) for sj in s] for ti in t])
        assert np.array_equal(m, loop)

    def test_kernel_matrix_coincident_raises(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ValueError):
            kernel.kernel_matrix(pts, pts)

    def test_combined_matrix_matches_pointwise(self):
        rng = np.random.default_rng(6)
        t = rng.uniform(-3, 3, (9, 2))
        s = rng.uniform(-3, 3, (11, 2))
        a = rng.normal(size=(11, 2))
        n = a / np.linalg.norm(a, axis=1, keepdims=True)
        m = kernel.combined_kernel_matrix(t, s, n, eta=np.pi)
        loop = np.array(
            [[kernel.combined_kernel(ti, sj, nj, eta=np.pi) for sj, nj in zip(s, n)] for ti in t]
        )
        assert np.abs(m - loop).max() <= 1e-15

    def test_combined_matrix_zero_diagonal(self):
        rng = np.random.default_rng(8)
        pts = rng.uniform(-1, 1, (6, 2))
        a = rng.normal(size=(6, 2))
        n = a / np.linalg.norm(a, axis=1, keepdims=True)
        with pytest.raises(ValueError):
            kernel.combined_kernel_matrix(pts, pts, n, eta=np.pi)
        m = kernel.combined_kernel_matrix(pts, pts, n, eta=np.pi, zero_diagonal=True)
        assert np.all(np.diag(m) == 0.0)
        off = kernel.combined_kernel_matrix(pts + np.array([5.0, 0.0]), pts, n, eta=np.pi)
        assert np.all(np.isfinite(off))
