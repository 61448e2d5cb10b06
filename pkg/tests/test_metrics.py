"""Tests for grid distances, divergences and the terminal-time bound suite."""

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from vpflow.flow import FlowField
from vpflow.metrics import (
    CONVERGENCE_COLUMNS,
    SLACK_KEYS,
    GridSpec,
    MetricError,
    MetricReport,
    bound_suite,
    convergence_table,
    kl_divergence,
    kl_terminal_bound,
    l1_distance,
    l2_squared,
    std_normal_pdf,
    wasserstein_1d,
)
from vpflow.targets import BUILTIN_1D, make_builtin_target
from vpflow.vp import VpScoreModel

GRID = GridSpec.default(1)
WIDE = GridSpec.uniform(1, -20.0, 20.0, 4001)


def _normal(mu=0.0, s=1.0):
    return lambda x: stats.norm.pdf(x[:, 0], mu, s)


class TestGridSpec:
    """Tensor trapezoid grids."""

    def test_defaults(self):
        assert GRID.count == (1601,)
        two = GridSpec.default(2)
        assert two.count == (201, 201)
        assert two.points().shape == (201 * 201, 2)

    def test_weights_integrate_constants(self):
        two = GridSpec.uniform(2, -1.0, 2.0, 31)
        assert two.integrate(np.ones(31 * 31)) == pytest.approx(9.0, rel=1e-12)

    def test_invalid_grid(self):
        with pytest.raises(MetricError):
            GridSpec((1.0,), (0.0,), (11,))

    def test_serialisable(self):
        assert json.loads(json.dumps(GRID.to_dict()))["count"] == [1601]


class TestDistances:
    """Closed-form oracles for L1, L2, KL and Wasserstein distances."""

    def test_identical_densities(self):
        p = _normal()
        assert l1_distance(p, p, GRID) == 0.0
        assert kl_divergence(p, p, GRID) == 0.0
        assert wasserstein_1d(p, p, GRID, 1) == pytest.approx(0.0, abs=1e-12)
        assert wasserstein_1d(p, p, GRID, 2) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_supports(self):
        x = GRID.points()[:, 0]
        p = ((x > -3) & (x < -1)) * 0.5
        q = ((x > 1) & (x < 3)) * 0.5
        assert l1_distance(p, q, GRID) == pytest.approx(2.0, abs=2e-2)

    def test_gaussian_l1_closed_form(self):
        # |N(0,1) - N(1,1)| integrates to 2(2 Phi(1/2) - 1)
        expect = 2 * (2 * stats.norm.cdf(0.5) - 1)
        # the kink of |p - q| at x = 1/2 limits the trapezoid rule to O(h^2)
        assert l1_distance(_normal(), _normal(1.0), GRID) == pytest.approx(expect, abs=2e-5)

    def test_gaussian_kl_closed_form(self):
        expect = 0.5 * (3 - math.log(4.0))
        assert kl_divergence(_normal(0, 2), _normal(), WIDE) == pytest.approx(expect, abs=1e-4)

    def test_l2_closed_form(self):
        # int (phi_1 - phi_0)^2 = 2 (1 - e^{-1/4}) / (2 sqrt(pi))
        expect = (1 - math.exp(-0.25)) / math.sqrt(math.pi)
        assert l2_squared(_normal(), _normal(1.0), GRID) == pytest.approx(expect, abs=1e-8)

    def test_translation_wasserstein(self):
        assert wasserstein_1d(_normal(), _normal(0.3), GRID, 1) == pytest.approx(0.3, abs=1e-3)
        assert wasserstein_1d(_normal(), _normal(0.3), GRID, 2) == pytest.approx(0.3, abs=1e-3)

    @given(st.floats(-2, 2), st.floats(0.3, 2.0), st.floats(-2, 2), st.floats(0.3, 2.0))
    def test_w1_below_w2(self, m1, s1, m2, s2):
        p, q = _normal(m1, s1), _normal(m2, s2)
        assert wasserstein_1d(p, q, GRID, 1) <= wasserstein_1d(p, q, GRID, 2) + 1e-6

    @given(st.floats(-2, 2), st.floats(0.5, 2.0))
    def test_pinsker(self, m, s):
        p, q = _normal(m, s), _normal()
        assert l1_distance(p, q, WIDE) <= math.sqrt(2 * kl_divergence(p, q, WIDE)) + 1e-6

    def test_kl_absolute_continuity_failure(self):
        x = GRID.points()[:, 0]
        q = np.where(x > 0, 2 * stats.norm.pdf(x), 0.0)
        with pytest.raises(MetricError, match="q vanishes"):
            kl_divergence(_normal(), q, GRID)

    def test_kl_zero_p_contributes_nothing(self):
        x = GRID.points()[:, 0]
        p = np.where(x > 0, 2 * stats.norm.pdf(x), 0.0)
        # the jump of p at 0 costs about (h/2) p(0) log 2 under the trapezoid rule
        assert kl_divergence(p, _normal(), GRID) == pytest.approx(math.log(2.0), abs=5e-3)

    def test_shape_and_finiteness_checks(self):
        with pytest.raises(MetricError):
            l1_distance(np.ones(5), np.ones(5), GRID)
        with pytest.raises(MetricError):
            l1_distance(np.full(1601, np.nan), np.ones(1601), GRID)
        with pytest.raises(MetricError):
            wasserstein_1d(_normal(), _normal(), GridSpec.default(2))

    def test_grid_refinement_is_stable(self, gmm1d):
        q = _normal(-0.5, 1.2)
        fine = GridSpec.uniform(1, -8.0, 8.0, 3201)
        for metric in (l1_distance, kl_divergence):
            coarse_v, fine_v = metric(gmm1d.pdf, q, GRID), metric(gmm1d.pdf, q, fine)
            assert abs(coarse_v - fine_v) < 0.01 * abs(fine_v)


class TestMetricReport:
    """Serialisation and finiteness checks."""

    def test_json_round_trip(self):
        rep = MetricReport("r", {"a": 1.5, "b": math.inf}, {"k": "v"}, ["b"])
        back = MetricReport.from_json(rep.to_json())
        assert back.values["a"] == 1.5 and math.isinf(back.values["b"])
        assert back.flagged == ["b"] and back.metadata == {"k": "v"}

    def test_unflagged_non_finite_rejected(self):
        with pytest.raises(MetricError):
            MetricReport("r", {"a": math.nan}).check_finite()


class TestBoundSuite:
    """Terminal KL, Pinsker, Talagrand and Hoelder checks."""

    def test_standard_normal_floor(self):
        target = make_builtin_target("gaussian")
        rep = bound_suite(target, VpScoreModel(target), 3.0)
        assert rep["kl_T"] == pytest.approx(0.0, abs=1e-12)
        for key in SLACK_KEYS:
            assert rep[key] >= 0.0

    def test_gmm1d_kl_decreases_below_bound(self, gmm1d, gmm1d_model):
        kls = []
        for T in (1.0, 2.0, 3.0, 4.0):
            rep = bound_suite(gmm1d, gmm1d_model, T, WIDE)
            assert rep["kl_T"] <= math.exp(-T) * (1 + 2.68785)
            kls.append(rep["kl_T"])
        assert all(b < a for a, b in zip(kls, kls[1:]))

    @pytest.mark.parametrize("name", BUILTIN_1D)
    def test_slacks_nonnegative(self, name):
        target = make_builtin_target(name)
        rep = bound_suite(target, VpScoreModel(target), 3.0)
        for key in SLACK_KEYS:
            assert rep[key] >= -1e-6

    def test_terminal_bound_formula(self, gmm1d):
        assert kl_terminal_bound(gmm1d, 2.0) == pytest.approx(math.exp(-2.0) * (1 + 2.688))

    def test_pullback_error_reported(self, gmm1d, gmm1d_model):
        rep = bound_suite(gmm1d, gmm1d_model, 3.0, flow=FlowField.from_model(gmm1d_model), delta=1e-2)
        assert 0.0 < rep["l1_pullback"] < 0.5
        assert rep.metadata["delta"] == 1e-2

    def test_std_normal_pdf_2d(self):
        assert std_normal_pdf(np.zeros((1, 2)))[0] == pytest.approx(1 / (2 * math.pi))


class TestConvergenceTable:
    """Pullback error sweeps over early-stopping and horizon pairs."""

    def test_two_uniform_l1_decreases(self, two_uniform):
        rows = convergence_table(two_uniform, VpScoreModel(two_uniform), [(0.1, 2.0), (0.01, 3.0), (0.001, 4.0)])
        l1 = [r["l1"] for r in rows]
        assert l1[0] > l1[1] > l1[2]
        assert set(CONVERGENCE_COLUMNS) == set(rows[0])

    def test_gmm1d_kl_decreases_without_early_stopping(self, gmm1d, gmm1d_model):
        rows = convergence_table(gmm1d, gmm1d_model, [(0.0, 2.0), (0.0, 3.0), (0.0, 4.0)])
        kl = [r["kl"] for r in rows]
        assert kl[0] > kl[1] > kl[2]

    def test_rejects_inverted_window(self, gmm1d, gmm1d_model):
        with pytest.raises(MetricError):
            convergence_table(gmm1d, gmm1d_model, [(2.0, 1.0)])
