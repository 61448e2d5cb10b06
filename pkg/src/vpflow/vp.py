"""Variance-preserving diffusion with beta = 1: marginals, exact scores, bounds.

Conventions: ``a(t) = exp(-t/2)``, ``sigma2(t) = 1 - exp(-t)``, and
``X_t = a(t) X_0 + sigma(t) Z``.  Scores are evaluated either analytically
(Gaussian mixtures) or through posterior moments of ``Y = X_0`` given
``X_t = x`` computed by quadrature over the target's base measure.

For a base measure smoothed by ``N(0, Sigma0)`` (``Sigma0 = 0`` for plain
densities) the marginal is ``sum_i w_i N(x; a y_i, S_t)`` with
``S_t = a^2 Sigma0 + sigma2 I`` and

    score     = -S^{-1} (x - a E[Y|x])
    jacobian  = -S^{-1} + a^2 S^{-1} Cov[Y|x] S^{-1}

which for ``Sigma0 = 0`` is the posterior-covariance identity
``-I + e^{-t}/(1-e^{-t})^2 Cov - e^{-t}/(1-e^{-t}) I``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import log_ndtr, logsumexp

from .targets import (
    LOG_2PI,
    ArcMeasure,
    BoxUnion,
    ClassTag,
    CompactConvolution,
    GaussianMixture,
    GridDensity1D,
    IntervalDensity,
    LogConcave,
    TargetDensity,
    WeightedPoints,
    as_points,
)


class VpError(ValueError):
    pass


class TailGuardError(VpError):
    """All posterior quadrature weights vanished: ``x`` lies outside node coverage."""


# ---------------------------------------------------------------------------
# schedule


def alpha(t):
    return np.exp(-0.5 * np.asarray(t, dtype=float))


def sigma2(t):
    return -np.expm1(-np.asarray(t, dtype=float))


@dataclass(frozen=True)
class VpSchedule:
    """Fixed ``beta = 1`` schedule."""

    def a(self, t):
        return alpha(t)

    def sigma2(self, t):
        return sigma2(t)

    def sigma(self, t):
        return np.sqrt(sigma2(t))


def forward_sample(schedule: VpSchedule, x0, t: float, seed: int) -> np.ndarray:
    if t < 0:
        raise VpError("t must be non-negative")
    x0 = np.asarray(x0, dtype=float)
    z = np.random.default_rng(seed).standard_normal(x0.shape)
    return schedule.a(t) * x0 + schedule.sigma(t) * z


# ---------------------------------------------------------------------------
# score model


class Method(str, enum.Enum):
    ANALYTIC_GMM = "AnalyticGMM"
    QUADRATURE_POSTERIOR = "QuadraturePosterior"


def _chunks(n: int, per_row: int, budget: int = 4_000_000):
    step = max(1, budget // max(per_row, 1))
    for i in range(0, n, step):
        yield slice(i, min(n, i + step))


@dataclass(frozen=True)
class VpScoreModel:
    """Evaluator bundle for ``p_t``, ``s_t`` and ``grad s_t`` of one target.

    Attributes:
        target: The target density at ``t = 0``.
        method: Analytic mixture formulas (A4 only) or posterior quadrature.
        min_nodes: Minimum Gauss-Legendre nodes per dimension and piece.
        panel_nodes: Nodes per composite panel; panels are added until each
            is narrower than the posterior length scale ``sqrt(S_t)/a(t)``.
        tail_floor: Optional strict tail guard; if the largest absolute
            posterior log-weight falls below it, :class:`TailGuardError` is
            raised.  ``None`` only guards against a fully vanished weight set.
    """

    target: TargetDensity
    method: Method = None
    min_nodes: int = 400
    panel_nodes: int = 20
    tail_floor: float | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        structure = self.target.structure
        method = self.method
        if method is None:
            method = Method.ANALYTIC_GMM if isinstance(structure, GaussianMixture) else Method.QUADRATURE_POSTERIOR
        method = Method(method)
        if method is Method.ANALYTIC_GMM and self.target.class_tag is not ClassTag.A4:
            raise VpError("analytic mixture scores require an A4 target")
        if method is Method.QUADRATURE_POSTERIOR and isinstance(structure, GaussianMixture):
            # a mixture is a point base measure smoothed by its shared covariance
            if not structure.shared:
                raise VpError("quadrature route needs a shared mixture covariance")
        object.__setattr__(self, "method", method)

    # -- basic properties ---------------------------------------------------

    @property
    def dim(self) -> int:
        return self.target.dim

    @property
    def smooth_at_zero(self) -> bool:
        return self.target.class_tag in (ClassTag.A3, ClassTag.A4)

    @property
    def quadrature_spec(self) -> dict:
        return {"method": self.method.value, "min_nodes": self.min_nodes, "panel_nodes": self.panel_nodes}

    def _check_t(self, t: float, need_score: bool = True):
        if t < 0:
            raise VpError("t must be non-negative")
        if need_score and t == 0 and not self.smooth_at_zero:
            raise VpError(f"{self.target.class_tag.value} scores are only defined for t > 0")

    # -- base measure as weighted nodes -------------------------------------

    def _base(self):
        """Return ``(kind, payload, Sigma0)``."""
        hit = self._cache.get("base")
        if hit is None:
            hit = self._cache["base"] = self._make_base()
        return hit

    def _make_base(self):
        s = self.target.structure
        d = self.dim
        zero = np.zeros((d, d))
        if isinstance(s, GaussianMixture):
            return "nodes", WeightedPoints(s.means, s.weights), s.covs[0]
        if isinstance(s, CompactConvolution):
            return "nodes", s.base, s.cov
        if isinstance(s, BoxUnion):
            return "boxes", s, zero
        if isinstance(s, LogConcave):
            return "nodes", s.quadrature(), zero
        if isinstance(s, (IntervalDensity, WeightedPoints, ArcMeasure, GridDensity1D)):
            return "nodes", s, zero
        raise VpError(f"unsupported target structure {type(s).__name__}")

    def _S(self, t: float, sigma0: np.ndarray) -> np.ndarray:
        a2 = math.exp(-t)
        return a2 * sigma0 + (-math.expm1(-t)) * np.eye(self.dim)

    def _resolution(self, t: float, S: np.ndarray) -> float:
        a = math.exp(-0.5 * t)
        return math.sqrt(np.linalg.eigvalsh(S).min()) / a

    def _nodes(self, payload, resolution: float):
        n_panels_key = (id(payload), round(math.log(resolution), 1))
        hit = self._cache.get(n_panels_key)
        if hit is None:
            # quantise the resolution so node sets are reused across nearby t
            res = math.exp(round(math.log(resolution), 1))
            hit = payload.nodes(res * 0.95)
            self._cache[n_panels_key] = hit
        return hit

    # -- posterior moments ----------------------------------------------------

    def posterior(self, t: float, x) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Posterior of ``Y = X_0`` given ``X_t = x``.

        Returns:
            ``(log p_t(x), E[Y|x], Cov[Y|x], S_t)`` for the quadrature route.
        """
        self._check_t(t)
        x = as_points(x, self.dim)
        kind, payload, sigma0 = self._base()
        S = self._S(t, sigma0)
        if kind == "boxes":
            return (*self._box_posterior(t, x, payload), S)
        ys, logw = self._nodes(payload, self._resolution(t, S))
        return (*self._node_posterior(t, x, ys, logw, S), S)

    def _guard(self, logk_max: np.ndarray, x: np.ndarray):
        bad = ~np.isfinite(logk_max)
        if self.tail_floor is not None:
            bad |= logk_max < self.tail_floor
        if np.any(bad):
            raise TailGuardError(
                f"posterior weights underflow at x={x[np.argmax(bad)].tolist()}; "
                "point lies outside the quadrature coverage"
            )

    def _node_posterior(self, t, x, ys, logw, S):
        a = math.exp(-0.5 * t)
        d = self.dim
        prec = np.linalg.inv(S)
        logdet = np.linalg.slogdet(S)[1]
        # whiten so the Mahalanobis distances become one matrix product
        white = np.linalg.cholesky(prec)
        ay_w = (a * ys) @ white
        ay_sq = np.sum(ay_w**2, axis=1)
        base = logw - 0.5 * (ay_sq + logdet + d * LOG_2PI)
        n = len(x)
        logp = np.empty(n)
        mean = np.empty((n, d))
        cov = np.empty((n, d, d))
        for sl in _chunks(n, len(ys)):
            xw = x[sl] @ white
            logk = base[None, :] + xw @ ay_w.T - 0.5 * np.sum(xw**2, axis=1)[:, None]
            mx = logk.max(axis=1)
            self._guard(mx, x[sl])
            w = np.exp(logk - mx[:, None])
            tot = w.sum(axis=1)
            logp[sl] = mx + np.log(tot)
            w /= tot[:, None]
            mu = w @ ys
            mean[sl] = mu
            # centred second moments, one entry at a time (d <= 2)
            cent = [ys[None, :, j] - mu[:, j, None] for j in range(d)]
            for j in range(d):
                wc = w * cent[j]
                for k in range(j, d):
                    cov[sl, j, k] = cov[sl, k, j] = np.einsum("nm,nm->n", wc, cent[k])
        return logp, mean, cov

    def _box_posterior(self, t, x, boxes: BoxUnion):
        # within one box the posterior factorises into truncated normals per coordinate
        a = math.exp(-0.5 * t)
        s2 = -math.expm1(-t)
        tau = math.sqrt(s2) / a
        n, d = x.shape
        nb = len(boxes.weights)
        log_mass = np.tile(np.log(boxes.weights), (n, 1))
        means = np.empty((n, nb, d))
        variances = np.empty((n, nb, d))
        for b in range(nb):
            for j in range(d):
                lo, hi = boxes.lows[b, j], boxes.highs[b, j]
                log_z, mu, var = _truncnorm_moments(x[:, j] / a, tau, lo, hi)
                self._guard(log_z, x)
                log_mass[:, b] += log_z - math.log(a * (hi - lo))
                means[:, b, j] = mu
                variances[:, b, j] = var
        logp = logsumexp(log_mass, axis=1)
        pb = np.exp(log_mass - logp[:, None])
        mean = np.einsum("nb,nbd->nd", pb, means)
        dev = means - mean[:, None, :]
        cov = np.einsum("nb,nbd,nbe->nde", pb, dev, dev)
        idx = np.arange(d)
        cov[:, idx, idx] += np.einsum("nb,nbd->nd", pb, variances)
        return logp, mean, cov

    # -- analytic mixtures -----------------------------------------------------

    def _mixture_terms(self, t: float, x: np.ndarray):
        mix: GaussianMixture = self.target.structure
        a2 = math.exp(-t)
        a = math.sqrt(a2)
        s2 = -math.expm1(-t)
        d = self.dim
        S = a2 * mix.covs + s2 * np.eye(d)[None]  # (K, d, d)
        prec = np.linalg.inv(S)
        logdet = np.linalg.slogdet(S)[1]
        diff = x[:, None, :] - a * mix.means[None, :, :]  # (N, K, d)
        g = -np.einsum("kde,nke->nkd", prec, diff)  # component scores
        maha = -np.einsum("nkd,nkd->nk", diff, g)
        logk = np.log(mix.weights)[None, :] - 0.5 * (maha + logdet[None, :] + d * LOG_2PI)
        logp = logsumexp(logk, axis=1)
        w = np.exp(logk - logp[:, None])
        return logp, w, g, prec

    # -- public evaluators -----------------------------------------------------

    def log_marginal(self, t: float, x) -> np.ndarray:
        if t < 0:
            raise VpError("t must be non-negative")
        x = as_points(x, self.dim)
        if t == 0 and not self.smooth_at_zero:
            return self.target.logpdf(x)
        if self.method is Method.ANALYTIC_GMM:
            return self._mixture_terms(t, x)[0]
        s = self.target.structure
        if isinstance(s, BoxUnion):
            return _box_log_marginal(s, t, x)
        return self.posterior(t, x)[0]

    def marginal_pdf(self, t: float, x) -> np.ndarray:
        return np.exp(self.log_marginal(t, x))

    def score(self, t: float, x) -> np.ndarray:
        self._check_t(t)
        x = as_points(x, self.dim)
        if self.method is Method.ANALYTIC_GMM:
            _, w, g, _ = self._mixture_terms(t, x)
            return np.einsum("nk,nkd->nd", w, g)
        _, mean, _, S = self.posterior(t, x)
        a = math.exp(-0.5 * t)
        return -np.linalg.solve(S, (x - a * mean).T).T

    def score_and_jacobian(self, t: float, x) -> tuple[np.ndarray, np.ndarray]:
        self._check_t(t)
        x = as_points(x, self.dim)
        if self.method is Method.ANALYTIC_GMM:
            _, w, g, prec = self._mixture_terms(t, x)
            s = np.einsum("nk,nkd->nd", w, g)
            second = np.einsum("nk,nkd,nke->nde", w, g, g)
            jac = -np.einsum("nk,kde->nde", w, prec) + second - s[:, :, None] * s[:, None, :]
            return s, 0.5 * (jac + np.swapaxes(jac, 1, 2))
        _, mean, cov, S = self.posterior(t, x)
        a2 = math.exp(-t)
        prec = np.linalg.inv(S)
        s = -(x - math.sqrt(a2) * mean) @ prec.T
        jac = -prec[None] + a2 * np.einsum("de,nef,fg->ndg", prec, cov, prec)
        return s, jac

    def score_jacobian(self, t: float, x) -> np.ndarray:
        return self.score_and_jacobian(t, x)[1]


def _box_log_marginal(boxes: BoxUnion, t: float, x: np.ndarray) -> np.ndarray:
    """Closed-form ``log p_t`` for a union of uniform boxes (products of erf differences)."""
    a = math.exp(-0.5 * t)
    sd = math.sqrt(-math.expm1(-t))
    out = np.tile(np.log(boxes.weights / boxes.volumes), (len(x), 1))
    for b in range(len(boxes.weights)):
        for j in range(boxes.dim):
            lo = (x[:, j] - a * boxes.highs[b, j]) / sd
            hi = (x[:, j] - a * boxes.lows[b, j]) / sd
            # int_l^u phi_sd(x - a y) dy = (Phi(hi) - Phi(lo)) / a
            out[:, b] += _log_ndtr_diff(hi, lo) - math.log(a)
    return logsumexp(out, axis=1)


def _truncnorm_moments(m: np.ndarray, tau: float, lo: float, hi: float):
    """Log normaliser, mean and variance of ``N(m, tau^2)`` restricted to ``[lo, hi]``.

    Intervals on the upper side of ``m`` are reflected so the normaliser and
    the density ratios are always taken in the lower tail, where
    ``log_ndtr`` keeps full relative precision.
    """
    al = (lo - m) / tau
    be = (hi - m) / tau
    flip = (al + be) > 0
    a_ = np.where(flip, -be, al)
    b_ = np.where(flip, -al, be)
    log_z = _log_ndtr_diff(b_, a_)
    log_phi = -0.5 * LOG_2PI
    r_a = np.exp(log_phi - 0.5 * a_**2 - log_z)
    r_b = np.exp(log_phi - 0.5 * b_**2 - log_z)
    shift = r_a - r_b
    var = 1.0 + a_ * r_a - b_ * r_b - shift**2
    mean = m + tau * np.where(flip, -shift, shift)
    return log_z, mean, tau * tau * np.maximum(var, 0.0)


def _log_ndtr_diff(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    """``log(Phi(hi) - Phi(lo))`` for ``hi > lo`` without cancellation in either tail."""
    upper = lo > 0
    # use the reflected form on the upper tail
    h = np.where(upper, -lo, hi)
    l = np.where(upper, -hi, lo)
    lh = log_ndtr(h)
    ll = log_ndtr(l)
    with np.errstate(divide="ignore"):
        return lh + np.log1p(-np.exp(ll - lh))


# ---------------------------------------------------------------------------
# module level evaluators


def marginal_pdf(model: VpScoreModel, t: float, x) -> np.ndarray:
    return model.marginal_pdf(t, x)


def score(model: VpScoreModel, t: float, x) -> np.ndarray:
    return model.score(t, x)


def score_jacobian(model: VpScoreModel, t: float, x) -> np.ndarray:
    return model.score_jacobian(t, x)


def operator_norms(mats: np.ndarray) -> np.ndarray:
    """Largest singular value of each 1x1 or 2x2 matrix in a stack (closed form)."""
    mats = np.asarray(mats, dtype=float)
    if mats.shape[-1] == 1:
        return np.abs(mats[..., 0, 0])
    if mats.shape[-2:] != (2, 2):
        return np.linalg.norm(mats, ord=2, axis=(-2, -1))
    a, b = mats[..., 0, 0], mats[..., 0, 1]
    c, d = mats[..., 1, 0], mats[..., 1, 1]
    fro2 = a * a + b * b + c * c + d * d
    det = a * d - b * c
    disc = np.sqrt(np.maximum(fro2 * fro2 - 4.0 * det * det, 0.0))
    return np.sqrt(0.5 * (fro2 + disc))


def empirical_L(model: VpScoreModel, t: float, grid) -> float:
    """Max over ``grid`` of the operator norm of the score Jacobian at time ``t``."""
    pts = as_points(grid, model.dim)
    if len(pts) == 0:
        raise VpError("grid must be non-empty")
    return float(np.max(operator_norms(model.score_jacobian(t, pts))))


# ---------------------------------------------------------------------------
# theoretical Lipschitz bounds


@dataclass(frozen=True)
class LipschitzBound:
    """Closed-form bound ``L(t)`` on ``sup_x ||grad s_t(x)||``.

    ``t_min``/``t_max`` give the validity window; ``t_min_open`` marks the
    open left end ``t > 0`` of the compact-support and log-concave cases.
    """

    class_tag: ClassTag
    t_min: float
    t_max: float
    t_min_open: bool
    radius: float = math.nan
    lambda_min: float = math.nan
    m_T: float = math.nan
    exact_class: bool = True

    def valid(self, t: float) -> bool:
        lo_ok = t > self.t_min if self.t_min_open else t >= self.t_min
        return lo_ok and t <= self.t_max * (1.0 + 1e-12)

    def __call__(self, t: float) -> float:
        return theoretical_L(self, t)


def theoretical_L(bound: LipschitzBound, t: float) -> float:
    if not bound.valid(t):
        raise VpError(f"t={t} outside the validity window of the {bound.class_tag.value} bound")
    if bound.class_tag is ClassTag.A1:
        e = math.exp(-t)
        om = -math.expm1(-t)
        return 1.0 + e * bound.radius**2 / om**2 + e / om
    if bound.class_tag is ClassTag.A2:
        return 2.0 / (-math.expm1(-t))
    return bound.m_T


def min_eigenvalue_over_time(sigma0s: np.ndarray, T: float, n_grid: int = 1001) -> float:
    """``min_{t in [0,T]} lambda_min(a(t)^2 Sigma + sigma2(t) I)`` over one or more Sigmas."""
    sigma0s = np.asarray(sigma0s, float)
    if sigma0s.ndim == 2:
        sigma0s = sigma0s[None]
    eig = np.linalg.eigvalsh(sigma0s).ravel()

    def lam(t):
        a2 = math.exp(-t)
        return float(np.min(a2 * eig + (1.0 - a2)))

    ts = np.linspace(0.0, T, n_grid)
    vals = np.array([lam(t) for t in ts])
    i = int(np.argmin(vals))
    lo = ts[max(i - 1, 0)]
    hi = ts[min(i + 1, n_grid - 1)]
    best = vals[i]
    if hi > lo:
        res = optimize.minimize_scalar(lam, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
        best = min(best, float(res.fun))
    return best


def lipschitz_bound(target: TargetDensity, T: float = 5.0) -> LipschitzBound:
    """Class-specific score Lipschitz bound for ``target`` on its validity window."""
    tag = target.class_tag
    s = target.structure
    if tag is ClassTag.A1:
        return LipschitzBound(tag, 0.0, math.inf, True, radius=target.support_radius)
    if tag is ClassTag.A2:
        return LipschitzBound(tag, 0.0, math.inf, True)
    if tag is ClassTag.A4:
        mix: GaussianMixture = s
        lam = min_eigenvalue_over_time(mix.covs, T)
        radius = float(np.max(np.linalg.norm(mix.means, axis=1)))
        return LipschitzBound(
            tag, 0.0, T, False, radius=radius, lambda_min=lam,
            m_T=1.0 / lam + radius**2 / lam**2, exact_class=mix.shared,
        )
    if tag is ClassTag.A3:
        conv: CompactConvolution = s
        lam = min_eigenvalue_over_time(conv.cov, T)
        radius = conv.base.radius
        return LipschitzBound(tag, 0.0, T, False, radius=radius, lambda_min=lam, m_T=1.0 / lam + radius**2 / lam**2)
    raise VpError(f"no theoretical Lipschitz bound for class {tag.value}")
