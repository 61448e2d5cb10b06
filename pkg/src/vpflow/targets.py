"""Target densities in one and two dimensions.

Every target carries an exact pdf, a seeded sampler and a *structure*
object describing how it is built (Gaussian mixture, Gaussian-smoothed
compact measure, union of uniform boxes, or a 1D density on a bounded
interval).  The structure is what :mod:`vpflow.vp` uses to evaluate the
diffused marginals and their scores.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Mapping

import numpy as np
from scipy import signal
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


class ClassTag(str, enum.Enum):
    A1 = "A1"  # compact support
    A2 = "A2"  # log-concave
    A3 = "A3"  # Gaussian convolution of a compact measure
    A4 = "A4"  # finite Gaussian mixture
    GENERAL = "General"


class TargetError(ValueError):
    pass


def as_points(x, dim: int) -> np.ndarray:
    """Coerce scalars, single points and batches to shape ``(N, dim)``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        if dim != 1:
            raise TargetError(f"scalar input for a {dim}D target")
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        if dim == 1:
            return arr.reshape(-1, 1)
        if arr.shape[0] == dim:
            return arr.reshape(1, dim)
        raise TargetError(f"expected points of dimension {dim}, got shape {arr.shape}")
    if arr.ndim == 2 and arr.shape[1] == dim:
        return arr
    raise TargetError(f"expected points of dimension {dim}, got shape {arr.shape}")


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(n)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def composite_gauss_legendre(
    lo: float, hi: float, n_panels: int, panel_nodes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of an ``n_panels``-panel Gauss-Legendre rule on ``[lo, hi]``."""
    ref_x, ref_w = gauss_legendre(panel_nodes)
    edges = np.linspace(lo, hi, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * ref_x[None, :]).ravel()
    weights = (half[:, None] * ref_w[None, :]).ravel()
    return nodes, weights


def _check_spd(cov: np.ndarray, what: str = "covariance") -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise TargetError(f"{what} must be a square matrix")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise TargetError(f"{what} must be symmetric")
    if np.linalg.eigvalsh(cov).min() <= 0.0:
        raise TargetError(f"{what} must be positive definite")
    return cov


def _check_weights(weights, tol: float = 1e-9) -> np.ndarray:
    w = np.asarray(weights, dtype=float).ravel()
    if np.any(w <= 0.0):
        raise TargetError("mixture weights must be positive")
    if abs(w.sum() - 1.0) > tol:
        raise TargetError(f"mixture weights sum to {w.sum():.12g}, not 1")
    return w


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, (x - mean).T)
    maha = np.sum(sol**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (maha + logdet + d * LOG_2PI)


# ---------------------------------------------------------------------------
# structures


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture ``sum_k w_k N(m_k, C_k)``.

    A4 proper requires a shared covariance; per-component covariances are
    accepted so that the 1D benchmark mixture (three different widths)
    fits the same evaluator.
    """

    weights: np.ndarray
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)

    def __post_init__(self):
        w = _check_weights(self.weights, tol=1e-12)
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 2:
            covs = np.broadcast_to(covs, (len(w),) + covs.shape).copy()
        if means.shape[0] != len(w) or covs.shape[0] != len(w):
            raise TargetError("weights, means and covariances disagree in length")
        for c in covs:
            _check_spd(c)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def shared(self) -> bool:
        return bool(np.allclose(self.covs, self.covs[0], rtol=0, atol=0))

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        comps = np.stack(
            [gaussian_logpdf(x, m, c) for m, c in zip(self.means, self.covs)], axis=1
        )
        return logsumexp(comps + np.log(self.weights)[None, :], axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chols = np.linalg.cholesky(self.covs)
        return self.means[idx] + np.einsum("nij,nj->ni", chols[idx], z)

    @property
    def second_moment(self) -> float:
        return float(
            np.sum(
                self.weights
                * (np.sum(self.means**2, axis=1) + np.trace(self.covs, axis1=1, axis2=2))
            )
        )


@dataclass(frozen=True)
class WeightedPoints:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if abs(w.sum() - 1.0) > 1e-10 or np.any(w < 0):
            raise TargetError("base measure must be a probability measure")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def radius(self) -> float:
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    def nodes(self, resolution: float | None = None):
        with np.errstate(divide="ignore"):
            return self.points, np.log(self.weights)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.points[idx]


@dataclass(frozen=True)
class ArcMeasure:
    """Uniform measure on circular arcs, mixed with the given arc weights.

    Arc ``j`` is ``center_j + radius_j (cos u, sin u)`` for ``u`` in
    ``[start_j, stop_j]``; the parameter is uniform, hence so is arc length.
    """

    centers: np.ndarray
    radii: np.ndarray
    starts: np.ndarray
    stops: np.ndarray
    weights: np.ndarray
    arc_nodes: int = 800

    def __post_init__(self):
        object.__setattr__(self, "centers", np.atleast_2d(np.asarray(self.centers, float)))
        for name in ("radii", "starts", "stops"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float).ravel())
        object.__setattr__(self, "weights", _check_weights(self.weights, tol=1e-10))

    dim = 2

    @property
    def radius(self) -> float:
        # |c| + r bounds every arc point
        return float(np.max(np.linalg.norm(self.centers, axis=1) + self.radii))

    def nodes(self, resolution: float | None = None):
        pts, logw = [], []
        for c, r, u0, u1, w in zip(self.centers, self.radii, self.starts, self.stops, self.weights):
            n_panels = max(self.arc_nodes // 20, 1)
            if resolution is not None and resolution > 0:
                n_panels = max(n_panels, math.ceil(r * (u1 - u0) / resolution))
            u, uw = composite_gauss_legendre(u0, u1, n_panels, 20)
            pts.append(c[None, :] + r * np.stack([np.cos(u), np.sin(u)], axis=1))
            logw.append(np.log(w * uw / (u1 - u0)))
        return np.concatenate(pts), np.concatenate(logw)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        u = self.starts[idx] + (self.stops[idx] - self.starts[idx]) * rng.random(n)
        return self.centers[idx] + self.radii[idx, None] * np.stack([np.cos(u), np.sin(u)], axis=1)


@dataclass(frozen=True)
class GridDensity1D:
    """Density tabulated on a uniform 1D grid, used as a quadrature base measure."""

    grid: np.ndarray
    mass: np.ndarray  # per-node probability mass

    def __post_init__(self):
        m = np.asarray(self.mass, float)
        if abs(m.sum() - 1.0) > 1e-10 or np.any(m < 0):
            raise TargetError("grid base measure must have unit total mass")
        object.__setattr__(self, "grid", np.asarray(self.grid, float))
        object.__setattr__(self, "mass", m)

    dim = 1

    @property
    def radius(self) -> float:
        support = self.grid[self.mass > 0]
        return float(np.max(np.abs(support)))

    def nodes(self, resolution: float | None = None):
        keep = self.mass > 0
        return self.grid[keep, None], np.log(self.mass[keep])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.mass), size=n, p=self.mass)
        h = self.grid[1] - self.grid[0]
        return (self.grid[idx] + h * (rng.random(n) - 0.5))[:, None]


@dataclass(frozen=True)
class CompactConvolution:
    """``phi_{Sigma,0} * mu`` for a compactly supported base measure ``mu``."""

    base: Any
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cov", _check_spd(np.atleast_2d(self.cov), "smoothing covariance"))

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        ys, logw = self.base.nodes()
        out = np.empty(len(x))
        step = max(1, 2_000_000 // max(len(ys), 1))
        for i in range(0, len(x), step):
            xi = x[i : i + step]
            diff = xi[:, None, :] - ys[None, :, :]
            prec = np.linalg.inv(self.cov)
            maha = np.einsum("nmd,de,nme->nm", diff, prec, diff)
            logdet = np.linalg.slogdet(self.cov)[1]
            out[i : i + step] = logsumexp(
                logw[None, :] - 0.5 * (maha + logdet + self.dim * LOG_2PI), axis=1
            )
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        y = self.base.sample(n, rng)
        z = rng.standard_normal((n, self.dim))
        return y + z @ np.linalg.cholesky(self.cov).T


@dataclass(frozen=True)
class BoxUnion:
    """Mixture of uniform densities on axis-aligned boxes ``[lo_b, hi_b]``."""

    lows: np.ndarray
    highs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lows, float))
        hi = np.atleast_2d(np.asarray(self.highs, float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise TargetError("box bounds must satisfy high > low")
        object.__setattr__(self, "lows", lo)
        object.__setattr__(self, "highs", hi)
        object.__setattr__(self, "weights", _check_weights(self.weights))

    @property
    def dim(self) -> int:
        return self.lows.shape[1]

    @property
    def radius(self) -> float:
        corner = np.maximum(np.abs(self.lows), np.abs(self.highs))
        return float(np.max(np.linalg.norm(corner, axis=1)))

    @property
    def volumes(self) -> np.ndarray:
        return np.prod(self.highs - self.lows, axis=1)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        inside = np.all(
            (x[:, None, :] >= self.lows[None]) & (x[:, None, :] <= self.highs[None]), axis=2
        )
        return inside.astype(float) @ (self.weights / self.volumes)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        u = rng.random((n, self.dim))
        return self.lows[idx] + u * (self.highs[idx] - self.lows[idx])

    @property
    def second_moment(self) -> float:
        lo, hi = self.lows, self.highs
        per_axis = (hi**3 - lo**3) / (3.0 * (hi - lo))
        return float(np.sum(self.weights * per_axis.sum(axis=1)))


@dataclass(frozen=True)
class IntervalDensity:
    """1D density on ``[breaks[0], breaks[-1]]``, smooth between breakpoints.

    Used for targets whose diffused marginals have no closed form; the
    posterior integrals are done with composite Gauss-Legendre rules on each
    piece.  ``logpdf`` must be finite on the open pieces.
    """

    breaks: tuple
    logpdf_fn: Callable[[np.ndarray], np.ndarray]
    min_nodes: int = 400
    panel_nodes: int = 20

    dim = 1

    @property
    def radius(self) -> float:
        return float(max(abs(self.breaks[0]), abs(self.breaks[-1])))

    def nodes(self, resolution: float | None = None):
        pts, logw = [], []
        for lo, hi in zip(self.breaks[:-1], self.breaks[1:]):
            n_panels = max(math.ceil(self.min_nodes / self.panel_nodes), 1)
            if resolution is not None and resolution > 0:
                n_panels = max(n_panels, math.ceil((hi - lo) / resolution))
            y, w = composite_gauss_legendre(lo, hi, n_panels, self.panel_nodes)
            lp = self.logpdf_fn(y)
            keep = np.isfinite(lp)
            pts.append(y[keep])
            logw.append(np.log(w[keep]) + lp[keep])
        y = np.concatenate(pts)
        logw = np.concatenate(logw)
        # renormalise the (possibly truncated) quadrature measure
        logw = logw - logsumexp(logw)
        return y[:, None], logw


@dataclass(frozen=True)
class LogConcave:
    """``exp(-V) / Z`` with convex ``V``; integrated on a truncated window."""

    potential: Callable[[np.ndarray], np.ndarray]
    log_normalizer: float
    window: tuple[float, float]
    hessian_lower_bound: float = 0.0

    dim = 1

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return -self.potential(x) - self.log_normalizer

    def quadrature(self) -> IntervalDensity:
        lo, hi = self.window
        return IntervalDensity((lo, hi), lambda y: -self.potential(y) - self.log_normalizer)


# ---------------------------------------------------------------------------
# target objects


@dataclass(frozen=True)
class TargetDensity:
    name: str
    dim: int
    class_tag: ClassTag
    support_radius: float
    second_moment: float
    structure: Any
    params: Mapping[str, Any] = field(default_factory=dict)
    logpdf_fn: Callable[[np.ndarray], np.ndarray] | None = None
    pdf_fn: Callable[[np.ndarray], np.ndarray] | None = None
    sampler_fn: Callable[[int, np.random.Generator], np.ndarray] | None = None

    def pdf(self, x) -> np.ndarray:
        pts = as_points(x, self.dim)
        if self.pdf_fn is not None:
            return self.pdf_fn(pts)
        return np.exp(self.logpdf_fn(pts))

    def logpdf(self, x) -> np.ndarray:
        pts = as_points(x, self.dim)
        if self.logpdf_fn is not None:
            return self.logpdf_fn(pts)
        with np.errstate(divide="ignore"):
            return np.log(self.pdf_fn(pts))

    def sample(self, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise TargetError("n must be at least 1")
        rng = np.random.default_rng(seed)
        return self.sampler_fn(n, rng)

    @property
    def mean(self) -> np.ndarray:
        s = self.structure
        if isinstance(s, GaussianMixture):
            return s.weights @ s.means
        if isinstance(s, BoxUnion):
            return s.weights @ (0.5 * (s.lows + s.highs))
        pts, logw = quadrature_nodes(self)
        return np.exp(logw) @ pts


def quadrature_nodes(target: TargetDensity, resolution: float | None = None):
    """Weighted nodes of the target itself (for moments and sanity checks)."""
    s = target.structure
    if isinstance(s, (IntervalDensity, WeightedPoints, ArcMeasure, GridDensity1D)):
        return s.nodes(resolution)
    if isinstance(s, LogConcave):
        return s.quadrature().nodes(resolution)
    raise TargetError(f"no quadrature nodes for structure {type(s).__name__}")


def pdf_eval(target: TargetDensity, x) -> np.ndarray:
    return target.pdf(x)


def sample(target: TargetDensity, n: int, seed: int) -> np.ndarray:
    return target.sample(n, seed)


# ---------------------------------------------------------------------------
# builtin families


def _mixture_target(name, mix: GaussianMixture, params, tag=ClassTag.A4) -> TargetDensity:
    return TargetDensity(
        name=name,
        dim=mix.dim,
        class_tag=tag,
        support_radius=math.inf,
        second_moment=mix.second_moment,
        structure=mix,
        params=params,
        logpdf_fn=mix.logpdf,
        sampler_fn=mix.sample,
    )


def _box_target(name, boxes: BoxUnion, params) -> TargetDensity:
    def sampler(n, rng):
        if boxes.dim == 1:
            return _inverse_cdf_boxes_1d(boxes, rng.random(n))[:, None]
        return boxes.sample(n, rng)

    return TargetDensity(
        name=name,
        dim=boxes.dim,
        class_tag=ClassTag.A1,
        support_radius=boxes.radius,
        second_moment=boxes.second_moment,
        structure=boxes,
        params=params,
        pdf_fn=boxes.pdf,
        sampler_fn=sampler,
    )


def _inverse_cdf_boxes_1d(boxes: BoxUnion, u: np.ndarray) -> np.ndarray:
    order = np.argsort(boxes.lows[:, 0])
    w = boxes.weights[order]
    lo = boxes.lows[order, 0]
    hi = boxes.highs[order, 0]
    cum = np.concatenate([[0.0], np.cumsum(w)])
    k = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, len(w) - 1)
    frac = (u - cum[k]) / w[k]
    return lo[k] + frac * (hi[k] - lo[k])


def _triangular(params) -> TargetDensity:
    def pdf(x):
        return np.clip(1.0 - np.abs(x[:, 0]), 0.0, None)

    def logpdf_1d(y):
        with np.errstate(divide="ignore"):
            return np.log(np.clip(1.0 - np.abs(y), 0.0, None))

    def sampler(n, rng):
        u = rng.random(n)
        x = np.where(u < 0.5, -1.0 + np.sqrt(2.0 * u), 1.0 - np.sqrt(2.0 * (1.0 - u)))
        return x[:, None]

    return TargetDensity(
        name="triangular",
        dim=1,
        class_tag=ClassTag.A1,
        support_radius=1.0,
        second_moment=1.0 / 6.0,
        structure=IntervalDensity((-1.0, 0.0, 1.0), logpdf_1d),
        params=dict(params),
        pdf_fn=pdf,
        sampler_fn=sampler,
    )


def _cubic_pullback(params) -> TargetDensity:
    def logpdf_1d(x):
        g = 3.0 * x**3 + x
        return -0.5 * g**2 - 0.5 * LOG_2PI + np.log(9.0 * x**2 + 1.0)

    def sampler(n, rng):
        z = rng.standard_normal(n)
        # real root of 3x^3 + x - z = 0 (Cardano, discriminant > 0)
        q = -z / 3.0
        disc = np.sqrt(q**2 / 4.0 + (1.0 / 9.0) ** 3)
        return (np.cbrt(-q / 2.0 + disc) + np.cbrt(-q / 2.0 - disc))[:, None]

    # the density is below exp(-600) beyond |x| = 2.5
    structure = IntervalDensity((-2.5, 0.0, 2.5), logpdf_1d)
    y, w = structure.nodes()
    m2 = float(np.exp(w) @ (y[:, 0] ** 2))
    return TargetDensity(
        name="cubic_pullback",
        dim=1,
        class_tag=ClassTag.GENERAL,
        support_radius=math.inf,
        second_moment=m2,
        structure=structure,
        params=dict(params),
        logpdf_fn=lambda x: logpdf_1d(x[:, 0]),
        sampler_fn=sampler,
    )


def _gmm1d(params) -> TargetDensity:
    means = np.asarray(params.get("means", (-3.0, -1.0, 1.0)), float)
    stds = np.asarray(params.get("stds", (0.2, 0.35, 0.25)), float)
    weights = _check_weights(params.get("weights", (0.2, 0.5, 0.3)))
    if np.any(stds <= 0):
        raise TargetError("component standard deviations must be positive")
    mix = GaussianMixture(weights / weights.sum(), means[:, None], (stds**2)[:, None, None])
    return _mixture_target(
        "gmm1d", mix, {"means": means.tolist(), "stds": stds.tolist(), "weights": weights.tolist()}
    )


def _gaussian(params) -> TargetDensity:
    mean = np.atleast_1d(np.asarray(params.get("mean", 0.0), float))
    dim = int(params.get("dim", len(mean)))
    mean = np.broadcast_to(mean, (dim,)).copy()
    if "cov" in params:
        cov = _check_spd(np.atleast_2d(np.asarray(params["cov"], float)))
    else:
        std = float(params.get("std", 1.0))
        if std <= 0:
            raise TargetError("std must be positive")
        cov = std**2 * np.eye(dim)
    tag = ClassTag(params.get("class_tag", "A4"))
    mix = GaussianMixture(np.ones(1), mean[None, :], cov[None])
    clean = {"mean": mean.tolist(), "cov": cov.tolist(), "class_tag": tag.value}
    if tag is ClassTag.A4:
        return _mixture_target("gaussian", mix, clean)
    if tag is not ClassTag.A2 or dim != 1:
        raise TargetError("gaussian supports class_tag A4, or A2 in one dimension")
    var = float(cov[0, 0])
    m = float(mean[0])
    half = 12.0 * math.sqrt(var)
    lc = LogConcave(
        potential=lambda y: 0.5 * (y - m) ** 2 / var,
        log_normalizer=0.5 * math.log(2.0 * math.pi * var),
        window=(m - half, m + half),
        hessian_lower_bound=1.0 / var,
    )
    return TargetDensity(
        name="gaussian",
        dim=1,
        class_tag=ClassTag.A2,
        support_radius=math.inf,
        second_moment=mix.second_moment,
        structure=lc,
        params=clean,
        logpdf_fn=mix.logpdf,
        sampler_fn=mix.sample,
    )


def _rings(params) -> TargetDensity:
    k = int(params.get("n_components", 8))
    radius = float(params.get("radius", 2.0))
    std = float(params.get("std", 0.2))
    if k < 1 or radius < 0 or std <= 0:
        raise TargetError("invalid rings parameters")
    ang = 2.0 * math.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    mix = GaussianMixture(np.full(k, 1.0 / k), means, std**2 * np.eye(2))
    return _mixture_target("rings", mix, {"n_components": k, "radius": radius, "std": std})


def _arc_target(name, arcs: ArcMeasure, noise: float, params) -> TargetDensity:
    conv = CompactConvolution(arcs, noise**2 * np.eye(2))
    ys, logw = arcs.nodes()
    m2 = float(np.exp(logw) @ np.sum(ys**2, axis=1) + 2.0 * noise**2)
    return TargetDensity(
        name=name,
        dim=2,
        class_tag=ClassTag.A3,
        support_radius=math.inf,
        second_moment=m2,
        structure=conv,
        params=params,
        logpdf_fn=conv.logpdf,
        sampler_fn=conv.sample,
    )


def _moons(params) -> TargetDensity:
    noise = float(params.get("noise", 0.1))
    if noise <= 0:
        raise TargetError("noise must be positive")
    arcs = ArcMeasure(
        centers=[[0.0, 0.0], [1.0, 0.5]],
        radii=[1.0, 1.0],
        starts=[0.0, math.pi],
        stops=[math.pi, 2.0 * math.pi],
        weights=[0.5, 0.5],
    )
    return _arc_target("moons", arcs, noise, {"noise": noise})


def _concentric(params) -> TargetDensity:
    radii = np.asarray(params.get("radii", (1.0, 2.0, 3.0)), float)
    noise = float(params.get("noise", 0.08))
    if noise <= 0 or np.any(radii <= 0):
        raise TargetError("invalid concentric parameters")
    k = len(radii)
    arcs = ArcMeasure(
        centers=np.zeros((k, 2)),
        radii=radii,
        starts=np.zeros(k),
        stops=np.full(k, 2.0 * math.pi),
        weights=np.full(k, 1.0 / k),
    )
    return _arc_target("concentric", arcs, noise, {"radii": radii.tolist(), "noise": noise})


def _two_uniform(params) -> TargetDensity:
    boxes = BoxUnion([[-1.0], [0.5]], [[-0.5], [1.0]], [0.5, 0.5])
    return _box_target("two_uniform", boxes, {})


def _squares(params) -> TargetDensity:
    sep = float(params.get("offset", 1.5))
    boxes = BoxUnion(
        [[-sep - 0.5, -0.5], [sep - 0.5, -0.5]],
        [[-sep + 0.5, 0.5], [sep + 0.5, 0.5]],
        [0.5, 0.5],
    )
    return _box_target("squares", boxes, {"offset": sep})


BUILTINS: dict[str, Callable[[Mapping[str, Any]], TargetDensity]] = {
    "triangular": _triangular,
    "two_uniform": _two_uniform,
    "cubic_pullback": _cubic_pullback,
    "gmm1d": _gmm1d,
    "rings": _rings,
    "squares": _squares,
    "moons": _moons,
    "concentric": _concentric,
    "gaussian": _gaussian,
}

BUILTIN_1D = ("triangular", "two_uniform", "cubic_pullback", "gmm1d")
BUILTIN_2D = ("rings", "squares", "moons", "concentric")


def make_builtin_target(name: str, params: Mapping[str, Any] | None = None) -> TargetDensity:
    """Construct one of the builtin targets.

    >>> make_builtin_target("gmm1d").class_tag.value
    'A4'
    """
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise TargetError(f"unknown target {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(dict(params or {}))


# ---------------------------------------------------------------------------
# approximation by elements of the Gaussian-convolution class


def _tail_mass(target: TargetDensity, radius: float) -> float:
    """Mass of ``target`` outside ``[-radius, radius]`` (1D)."""
    s = target.structure
    if isinstance(s, GaussianMixture):
        from scipy.stats import norm

        sd = np.sqrt(s.covs[:, 0, 0])
        m = s.means[:, 0]
        return float(np.sum(s.weights * (norm.sf((radius - m) / sd) + norm.cdf((-radius - m) / sd))))
    if math.isfinite(target.support_radius) and radius >= target.support_radius:
        return 0.0
    pts, logw = quadrature_nodes(target)
    outside = np.abs(pts[:, 0]) > radius
    return float(np.exp(logw[outside]).sum()) if outside.any() else 0.0


def _truncated_pdf(target: TargetDensity, radius: float, grid: np.ndarray) -> np.ndarray:
    vals = target.pdf(grid)
    vals[np.abs(grid) > radius] = 0.0
    return vals


def g_approximant(
    target: TargetDensity,
    epsilon: float,
    *,
    sigma_bounds: tuple[float, float] = (1e-4, 1.0),
    bisection_steps: int = 40,
) -> tuple[CompactConvolution, dict]:
    """Gaussian-smoothed compact approximant with L1 error below ``epsilon``.

    The target is truncated to ``[-R, R]`` (tail mass below ``epsilon/4``),
    renormalised, and convolved with ``N(0, sigma^2)``; ``sigma`` is the
    largest value found by bisection whose measured L1 distance to the
    truncated density is below ``epsilon/2``.

    Returns:
        The approximant and a diagnostics dict with ``radius``, ``sigma``,
        ``tail_mass``, ``l1_truncation`` and the measured ``l1_error``
        against the original target.
    """
    if not 0.0 < epsilon < 2.0:
        raise TargetError("epsilon must lie in (0, 2)")
    if target.dim != 1:
        raise TargetError("g_approximant is implemented for 1D targets")

    radius = target.support_radius if math.isfinite(target.support_radius) else 1.0
    tail = _tail_mass(target, radius)
    while tail >= epsilon / 4.0:
        radius *= 2.0
        if radius > 1e6:
            raise TargetError("tail mass does not decay; target is not integrable in the tails")
        tail = _tail_mass(target, radius)

    def discretise(sigma):
        h = min(sigma, 0.01) / 4.0
        half = radius + 6.0 * sigma
        n = int(math.ceil(half / h))
        grid = h * np.arange(-n, n + 1)
        base = _truncated_pdf(target, radius, grid)
        mass = base * h
        # boundary nodes of the truncation carry half weight
        edge = np.isclose(np.abs(grid), radius, atol=0.5 * h)
        mass[edge] *= 0.5
        mass /= mass.sum()
        return grid, h, mass

    def smoothed(sigma):
        grid, h, mass = discretise(sigma)
        k_half = int(math.ceil(8.0 * sigma / h))
        kx = h * np.arange(-k_half, k_half + 1)
        kernel = np.exp(-0.5 * (kx / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
        p_sigma = signal.fftconvolve(mass, kernel, mode="same")
        return grid, h, mass, p_sigma

    def l1_to_truncated(sigma):
        grid, h, mass, p_sigma = smoothed(sigma)
        p_r = _truncated_pdf(target, radius, grid) / (1.0 - tail)
        return float(np.trapezoid(np.abs(p_sigma - p_r), dx=h))

    lo, hi = sigma_bounds
    if l1_to_truncated(hi) < epsilon / 2.0:
        sigma = hi
    else:
        for _ in range(bisection_steps):
            mid = math.sqrt(lo * hi)
            if l1_to_truncated(mid) < epsilon / 2.0:
                lo = mid
            else:
                hi = mid
        sigma = lo

    grid, h, mass = discretise(sigma)
    approx = CompactConvolution(GridDensity1D(grid, mass), np.array([[sigma**2]]))
    l1 = measured_l1(target, approx, radius + 6.0 * sigma + 1.0, min(sigma, 0.01) / 4.0)
    info = {
        "radius": radius,
        "sigma": sigma,
        "tail_mass": tail,
        "l1_truncation": 2.0 * tail,
        "l1_error": l1,
    }
    return approx, info


def measured_l1(target: TargetDensity, approx: CompactConvolution, half_width: float, h: float) -> float:
    """Trapezoid L1 distance between a 1D target and a grid-based approximant."""
    base = approx.base
    sigma = math.sqrt(approx.cov[0, 0])
    hb = base.grid[1] - base.grid[0]
    # evaluate the approximant on its own lattice by convolution, then interpolate
    k_half = int(math.ceil(8.0 * sigma / hb))
    kx = hb * np.arange(-k_half, k_half + 1)
    kernel = np.exp(-0.5 * (kx / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
    lattice = signal.fftconvolve(base.mass, kernel, mode="full")
    lat_x = base.grid[0] - k_half * hb + hb * np.arange(len(lattice))
    n = int(math.ceil(half_width / h))
    x = h * np.arange(-n, n + 1)
    q = np.interp(x, lat_x, lattice, left=0.0, right=0.0)
    p = target.pdf(x)
    return float(np.trapezoid(np.abs(p - q), dx=h))
