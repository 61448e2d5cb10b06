"""Tests for the builtin target densities and the Gaussian-convolution approximant."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from vpflow.targets import (
    BUILTIN_1D,
    BUILTIN_2D,
    BUILTINS,
    ClassTag,
    CompactConvolution,
    TargetError,
    as_points,
    g_approximant,
    make_builtin_target,
    quadrature_nodes,
)


def _grid_mass(target, lo=-8.0, hi=8.0, n=8001):
    x = np.linspace(lo, hi, n)
    return np.trapezoid(target.pdf(x), x)


class TestBuiltinFactory:
    """Construction, class tags and default parameters."""

    @pytest.mark.parametrize(
        "name, tag",
        [
            ("triangular", ClassTag.A1),
            ("two_uniform", ClassTag.A1),
            ("squares", ClassTag.A1),
            ("gmm1d", ClassTag.A4),
            ("rings", ClassTag.A4),
            ("moons", ClassTag.A3),
            ("concentric", ClassTag.A3),
            ("cubic_pullback", ClassTag.GENERAL),
        ],
    )
    def test_class_tags(self, name, tag):
        assert make_builtin_target(name).class_tag is tag

    def test_gmm1d_defaults(self, gmm1d):
        mix = gmm1d.structure
        assert np.allclose(mix.means[:, 0], [-3.0, -1.0, 1.0])
        assert np.allclose(np.sqrt(mix.covs[:, 0, 0]), [0.2, 0.35, 0.25])
        assert np.allclose(mix.weights, [0.2, 0.5, 0.3])

    def test_unknown_name_is_rejected(self):
        with pytest.raises(TargetError):
            make_builtin_target("banana")

    def test_invalid_parameters_are_rejected(self):
        with pytest.raises(TargetError):
            make_builtin_target("gmm1d", {"stds": [0.2, -0.1, 0.3]})
        with pytest.raises(TargetError):
            make_builtin_target("gaussian", {"std": 0.0})

    def test_dimensions(self):
        for name in BUILTIN_1D:
            assert make_builtin_target(name).dim == 1
        for name in BUILTIN_2D:
            assert make_builtin_target(name).dim == 2

    def test_a2_gaussian_variant(self):
        g = make_builtin_target("gaussian", {"std": 1.5, "class_tag": "A2"})
        assert g.class_tag is ClassTag.A2
        assert g.pdf(0.0)[0] == pytest.approx(1.0 / (1.5 * math.sqrt(2 * math.pi)), rel=1e-12)


class TestPdfValues:
    """Point evaluations against closed forms."""

    def test_gmm1d_direct_sum(self, gmm1d):
        mu, sd, w = [-3.0, -1.0, 1.0], [0.2, 0.35, 0.25], [0.2, 0.5, 0.3]
        oracle = math.fsum(wk * stats.norm.pdf(-1.0, m, s) for wk, m, s in zip(w, mu, sd))
        assert gmm1d.pdf(-1.0)[0] == pytest.approx(oracle, rel=1e-13)

    def test_two_uniform_gap_and_plateau(self, two_uniform):
        assert two_uniform.pdf(0.0)[0] == 0.0
        assert two_uniform.pdf(0.75)[0] == pytest.approx(1.0)
        assert two_uniform.pdf(-0.75)[0] == pytest.approx(1.0)

    def test_triangular_peak(self):
        assert make_builtin_target("triangular").pdf(0.0)[0] == pytest.approx(1.0)

    def test_cubic_pullback_at_origin(self):
        assert make_builtin_target("cubic_pullback").pdf(0.0)[0] == pytest.approx(0.3989422804014327, rel=1e-12)

    @pytest.mark.parametrize("name", BUILTIN_1D)
    def test_1d_normalisation(self, name):
        # jump discontinuities cost up to h/2 each under the trapezoid rule
        assert _grid_mass(make_builtin_target(name)) == pytest.approx(1.0, abs=5e-3)

    @pytest.mark.parametrize("name, nodes", [("rings", 200), ("squares", 2000), ("moons", 200), ("concentric", 200)])
    def test_2d_normalisation(self, name, nodes):
        target = make_builtin_target(name)
        # even node counts keep the box edges off the grid; boxes need a fine grid along their perimeter
        ax = np.linspace(-5.0, 5.0, nodes)
        xx, yy = np.meshgrid(ax, ax, indexing="ij")
        vals = target.pdf(np.stack([xx.ravel(), yy.ravel()], axis=1)).reshape(xx.shape)
        mass = np.trapezoid(np.trapezoid(vals, ax, axis=1), ax)
        assert mass == pytest.approx(1.0, abs=1e-2)

    @given(st.floats(-10.0, 10.0))
    def test_1d_pdfs_are_nonnegative_and_finite(self, x):
        for name in BUILTIN_1D:
            v = make_builtin_target(name).pdf(x)[0]
            assert np.isfinite(v) and v >= 0.0

    @given(st.floats(-6.0, 6.0))
    def test_logpdf_matches_pdf(self, x):
        g = make_builtin_target("gmm1d")
        assert np.exp(g.logpdf(x)[0]) == pytest.approx(g.pdf(x)[0], rel=1e-12, abs=1e-300)


class TestMoments:
    """Declared second moments and means agree with quadrature."""

    def test_gmm1d_second_moment(self, gmm1d):
        assert gmm1d.second_moment == pytest.approx(2.688, abs=1e-12)

    @pytest.mark.parametrize("name", ["triangular", "two_uniform", "cubic_pullback", "gmm1d"])
    def test_second_moment_by_quadrature(self, name):
        target = make_builtin_target(name)
        x = np.linspace(-8.0, 8.0, 16001)
        m2 = np.trapezoid(x**2 * target.pdf(x), x)
        assert target.second_moment == pytest.approx(m2, abs=2e-3)

    def test_triangular_mean_from_nodes(self):
        target = make_builtin_target("triangular")
        pts, logw = quadrature_nodes(target)
        assert np.exp(logw).sum() == pytest.approx(1.0, abs=1e-10)
        assert float(np.exp(logw) @ pts[:, 0]) == pytest.approx(0.0, abs=1e-12)


class TestSampling:
    """Seeded sampling is deterministic and matches the density."""

    def test_gmm1d_sample_mean(self, gmm1d):
        x = gmm1d.sample(100_000, seed=0)
        # mean 0.2*(-3) + 0.5*(-1) + 0.3*1 = -0.8, standard deviation below 1.7
        assert abs(x.mean() + 0.8) < 5 * 1.7 / math.sqrt(100_000)

    @pytest.mark.parametrize("name", BUILTIN_1D + BUILTIN_2D)
    def test_same_seed_same_draws(self, name):
        target = make_builtin_target(name)
        assert np.array_equal(target.sample(50, seed=7), target.sample(50, seed=7))
        assert target.sample(50, seed=7).shape == (50, target.dim)

    @pytest.mark.parametrize("name", ["triangular", "two_uniform", "cubic_pullback"])
    def test_ks_against_cdf(self, name):
        target = make_builtin_target(name)
        x = np.linspace(-4.0, 4.0, 20001)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (target.pdf(x[1:]) + target.pdf(x[:-1])) * np.diff(x))])
        draws = target.sample(5000, seed=3)[:, 0]
        res = stats.kstest(draws, lambda v: np.interp(v, x, cdf))
        assert res.pvalue > 0.01

    @given(st.integers(0, 2**31 - 1))
    def test_compact_samples_stay_in_support(self, seed):
        target = make_builtin_target("two_uniform")
        draws = target.sample(200, seed=seed)
        assert np.all(target.pdf(draws) > 0.0)

    def test_zero_draws_rejected(self, gmm1d):
        with pytest.raises(TargetError):
            gmm1d.sample(0, seed=0)


class TestAsPoints:
    """Input coercion to ``(N, dim)`` arrays."""

    def test_scalar_and_vector_inputs(self):
        assert as_points(0.5, 1).shape == (1, 1)
        assert as_points([0.1, 0.2, 0.3], 1).shape == (3, 1)
        assert as_points([0.1, 0.2], 2).shape == (1, 2)

    def test_wrong_width_rejected(self):
        with pytest.raises(TargetError):
            as_points(np.zeros((4, 3)), 2)


class TestGApproximant:
    """Truncate, renormalise and smooth to land in the Gaussian-convolution class."""

    @pytest.mark.parametrize("epsilon", [0.1, 0.5])
    def test_standard_normal_guarantee(self, std_normal, epsilon):
        approx, info = g_approximant(std_normal, epsilon)
        assert isinstance(approx, CompactConvolution)
        assert info["l1_error"] < epsilon
        assert info["tail_mass"] < epsilon / 4

    def test_compact_support_needs_no_radius_growth(self, two_uniform):
        _, info = g_approximant(two_uniform, 0.05)
        assert info["radius"] == 1.0
        assert info["tail_mass"] == 0.0
        assert info["l1_error"] < 0.05

    def test_approximant_is_a_density(self, gmm1d):
        approx, info = g_approximant(gmm1d, 0.2)
        x = np.linspace(-8.0, 8.0, 8001)
        q = np.exp(approx.logpdf(x[:, None]))
        assert np.all(q > 0.0)
        assert np.trapezoid(q, x) == pytest.approx(1.0, abs=1e-6)
        # independent L1 oracle from the approximant's own log-density
        assert np.trapezoid(np.abs(q - gmm1d.pdf(x)), x) == pytest.approx(info["l1_error"], abs=2e-3)

    def test_epsilon_range(self, gmm1d):
        with pytest.raises(TargetError):
            g_approximant(gmm1d, 0.0)
        with pytest.raises(TargetError):
            g_approximant(gmm1d, 2.0)

    def test_two_dimensional_targets_rejected(self):
        with pytest.raises(TargetError):
            g_approximant(make_builtin_target("rings"), 0.1)


def test_registry_covers_builtin_lists():
    assert set(BUILTIN_1D + BUILTIN_2D) <= set(BUILTINS)
