"""Grid-based distances between densities and the inequality checks built on them.

Density arguments are either callables mapping points ``(M, dim)`` to values
``(M,)`` or arrays already evaluated on the grid's points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .flow import FlowField, IntegratorConfig, pullback_logpdf
from .targets import LOG_2PI, TargetDensity
from .vp import VpScoreModel


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid with per-axis ``lo``, ``hi`` and node ``count``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    count: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.count)) or not self.lo:
            raise MetricError("lo, hi and count must have the same positive length")
        for lo, hi, n in zip(self.lo, self.hi, self.count):
            if n < 2 or not hi > lo:
                raise MetricError("each axis needs count >= 2 and hi > lo")

    @classmethod
    def default(cls, dim: int) -> "GridSpec":
        if dim == 1:
            return cls((-8.0,), (8.0,), (1601,))
        if dim == 2:
            return cls((-4.0, -4.0), (4.0, 4.0), (201, 201))
        raise MetricError("default grids exist for dim 1 and 2 only")

    @classmethod
    def uniform(cls, dim: int, lo: float, hi: float, count: int) -> "GridSpec":
        return cls((lo,) * dim, (hi,) * dim, (count,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lo, self.hi, self.count)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def weights(self) -> np.ndarray:
        """Tensor-trapezoid weights aligned with :meth:`points`."""
        ws = []
        for ax in self.axes():
            w = np.full(len(ax), ax[1] - ax[0])
            w[0] *= 0.5
            w[-1] *= 0.5
            ws.append(w)
        out = ws[0]
        for w in ws[1:]:
            out = np.outer(out, w).ravel()
        return out

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights(), np.asarray(values, dtype=float).ravel()))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "count": list(self.count)}


@dataclass
class MetricReport:
    name: str
    values: dict[str, float] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def check_finite(self) -> None:
        bad = [k for k, v in self.values.items() if not math.isfinite(v) and k not in self.flagged]
        if bad:
            raise MetricError(f"non-finite unflagged values in report {self.name!r}: {bad}")

    def to_json(self) -> str:
        def clean(v):
            return v if isinstance(v, str) or math.isfinite(v) else str(v)

        blob = {
            "name": self.name,
            "values": {k: clean(float(v)) for k, v in self.values.items()},
            "metadata": self.metadata,
            "flagged": self.flagged,
        }
        return json.dumps(blob, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        blob = json.loads(text)
        values = {k: float(v) for k, v in blob["values"].items()}
        return cls(blob["name"], values, blob.get("metadata", {}), blob.get("flagged", []))


Density = Callable[[np.ndarray], np.ndarray] | np.ndarray


def _evaluate(p: Density, grid: GridSpec, what: str) -> np.ndarray:
    pts = grid.points()
    vals = np.asarray(p(pts) if callable(p) else p, dtype=float).ravel()
    if vals.shape != (len(pts),):
        raise MetricError(f"{what} has {vals.size} values for {len(pts)} grid points")
    if not np.all(np.isfinite(vals)):
        raise MetricError(f"{what} is not finite on the grid")
    return vals


def l1_distance(p: Density, q: Density, grid: GridSpec) -> float:
    return grid.integrate(np.abs(_evaluate(p, grid, "p") - _evaluate(q, grid, "q")))


def l2_squared(p: Density, q: Density, grid: GridSpec) -> float:
    return grid.integrate((_evaluate(p, grid, "p") - _evaluate(q, grid, "q")) ** 2)


def kl_divergence(p: Density, q: Density, grid: GridSpec) -> float:
    """Trapezoid ``int p log(p/q)``; ``p = 0`` contributes 0, ``q = 0 < p`` is an error."""
    pv = _evaluate(p, grid, "p")
    qv = _evaluate(q, grid, "q")
    if np.any(pv < 0) or np.any(qv < 0):
        raise MetricError("densities must be nonnegative")
    pos = pv > 0
    bad = pos & (qv <= 0)
    if np.any(bad):
        pts = grid.points()[bad]
        raise MetricError(f"q vanishes where p > 0 at {len(pts)} grid points, e.g. {pts[:5].tolist()}")
    integrand = np.zeros_like(pv)
    integrand[pos] = pv[pos] * (np.log(pv[pos]) - np.log(qv[pos]))
    return grid.integrate(integrand)


def _cdf(vals: np.ndarray, x: np.ndarray) -> np.ndarray:
    c = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(x))])
    if c[-1] <= 0:
        raise MetricError("density has no mass on the grid")
    return c / c[-1]


def _quantiles(cdf: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    # first cell whose upper CDF value reaches u; flat cells (zero density) are skipped
    idx = np.clip(np.searchsorted(cdf, u, side="left"), 1, len(x) - 1)
    c0, c1 = cdf[idx - 1], cdf[idx]
    frac = np.where(c1 > c0, (u - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.0)
    return x[idx - 1] + frac * (x[idx] - x[idx - 1])


def wasserstein_1d(p: Density, q: Density, grid: GridSpec, order: int = 1, n_quantiles: int = 10_000) -> float:
    """W1 from the CDF difference, W2 from a uniform quantile coupling.

    Both densities are renormalised to unit mass on the grid.
    """
    if grid.dim != 1:
        raise MetricError("wasserstein_1d needs a 1D grid")
    if order not in (1, 2):
        raise MetricError("order must be 1 or 2")
    x = grid.axes()[0]
    Fp = _cdf(_evaluate(p, grid, "p"), x)
    Fq = _cdf(_evaluate(q, grid, "q"), x)
    if order == 1:
        return float(np.trapezoid(np.abs(Fp - Fq), x))
    u = (np.arange(n_quantiles) + 0.5) / n_quantiles
    return float(math.sqrt(np.mean((_quantiles(Fp, x, u) - _quantiles(Fq, x, u)) ** 2)))


def std_normal_pdf(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * np.sum(x**2, axis=1) - 0.5 * x.shape[1] * LOG_2PI)


def kl_terminal_bound(target: TargetDensity, T: float) -> float:
    """``e^{-T} (n + M_2)``, the exponential bound on ``KL(p_T || p_Z)``."""
    return math.exp(-T) * (target.dim + target.second_moment)


def bound_suite(
    target: TargetDensity,
    model: VpScoreModel,
    T: float,
    grid: GridSpec | None = None,
    flow: FlowField | None = None,
    delta: float | None = None,
    cfg: IntegratorConfig | None = None,
) -> MetricReport:
    """Terminal-time inequality checks, each reported as ``rhs - lhs``.

    Checks ``KL(p_T||p_Z) <= e^{-T}(n+M_2)``, Pinsker, Talagrand (1D) and the
    Hoelder bound ``||p_T - p_Z||_2^2 <= (sup p_T + sup p_Z) ||p_T - p_Z||_1``.
    When ``flow`` and ``delta`` are given the pullback error against the
    target is reported too.
    """
    grid = grid or GridSpec.default(target.dim)
    pts = grid.points()
    pT = model.marginal_pdf(T, pts)
    pZ = std_normal_pdf(pts)
    kl_T = kl_divergence(pT, pZ, grid)
    l1_T = l1_distance(pT, pZ, grid)
    l2sq_T = l2_squared(pT, pZ, grid)
    bound = kl_terminal_bound(target, T)
    rep = MetricReport("bound_suite", metadata={"target": target.name, "T": T, "grid": grid.to_dict()})
    rep.values.update(
        kl_T=kl_T,
        kl_bound=bound,
        slack_kl_exponential=bound - kl_T,
        l1_T=l1_T,
        slack_pinsker=math.sqrt(2.0 * max(kl_T, 0.0)) - l1_T,
        l2sq_T=l2sq_T,
        slack_holder=(pT.max() + pZ.max()) * l1_T - l2sq_T,
    )
    if grid.dim == 1:
        w2 = wasserstein_1d(pT, pZ, grid, order=2)
        rep.values.update(w2_T=w2, slack_talagrand=2.0 * kl_T - w2**2)
    if flow is not None and delta is not None:
        q = np.exp(pullback_logpdf(flow, delta, T, pts, cfg))
        rep.values["l1_pullback"] = l1_distance(target.pdf(pts), q, grid)
        rep.metadata["delta"] = delta
    rep.check_finite()
    return rep


SLACK_KEYS = ("slack_kl_exponential", "slack_pinsker", "slack_talagrand", "slack_holder")

CONVERGENCE_COLUMNS = ("delta", "T", "l1", "kl", "w1", "w2", "kl_bound_slack")


def convergence_table(
    target: TargetDensity,
    model: VpScoreModel,
    pairs,
    grid: GridSpec | None = None,
    cfg: IntegratorConfig | None = None,
) -> list[dict[str, float]]:
    """Pullback errors against the target along a list of ``(delta, T)`` pairs."""
    grid = grid or GridSpec.default(target.dim)
    pts = grid.points()
    field_ = FlowField.from_model(model)
    pH = target.pdf(pts)
    pZ = std_normal_pdf(pts)
    rows = []
    for delta, T in pairs:
        if not delta < T:
            raise MetricError(f"need delta < T, got ({delta}, {T})")
        q = np.exp(pullback_logpdf(field_, delta, T, pts, cfg))
        row = {"delta": float(delta), "T": float(T), "l1": l1_distance(pH, q, grid), "kl": kl_divergence(pH, q, grid)}
        if grid.dim == 1:
            row["w1"] = wasserstein_1d(pH, q, grid, 1)
            row["w2"] = wasserstein_1d(pH, q, grid, 2)
        else:
            row["w1"] = row["w2"] = math.nan
        row["kl_bound_slack"] = kl_terminal_bound(target, T) - kl_divergence(model.marginal_pdf(T, pts), pZ, grid)
        rows.append(row)
    return rows
