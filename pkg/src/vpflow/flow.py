"""Probability-flow transports ``phi_{s->t}`` with log-det and Jacobian states.

The ODE ``dx/dt = v_t(x) = -x/2 - s_t(x)/2`` is integrated together with
the variational equation ``dJ/dt = grad v_t(x) J`` and
``d logdet/dt = tr grad v_t(x)`` by an embedded Dormand-Prince 5(4) pair.
A batch of starting points shares one adaptive step sequence; the error
norm is the worst point's, so every trajectory meets the tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .targets import LOG_2PI, as_points
from .vp import VpError, VpScoreModel, operator_norms


class FlowError(RuntimeError):
    pass


class IntegrationError(FlowError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-8
    atol: float = 1e-10
    max_steps: int = 1_000_000
    initial_step: float | None = None

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class OdeSolution:
    t: float
    y: np.ndarray
    steps_accepted: int
    steps_rejected: int
    max_step_error: float
    ts: list = field(default_factory=list)
    ys: list = field(default_factory=list)


def _error_norm(err: np.ndarray, y_old: np.ndarray, y_new: np.ndarray, cfg: IntegratorConfig) -> float:
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    per_point = np.sqrt(np.mean((err / scale) ** 2, axis=1))
    return float(np.max(per_point))


def _initial_step(rhs, t0, y0, f0, direction, cfg: IntegratorConfig) -> float:
    scale = cfg.atol + cfg.rtol * np.abs(y0)
    d0 = np.max(np.sqrt(np.mean((y0 / scale) ** 2, axis=1)))
    d1 = np.max(np.sqrt(np.mean((f0 / scale) ** 2, axis=1)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = rhs(t0 + direction * h0, y1)
    d2 = np.max(np.sqrt(np.mean(((f1 - f0) / scale) ** 2, axis=1))) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def dopri5(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    t0: float,
    t1: float,
    y0: np.ndarray,
    cfg: IntegratorConfig,
    record: bool = False,
) -> OdeSolution:
    """Integrate ``dy/dt = rhs(t, y)`` for a batch ``y`` of shape ``(N, m)``."""
    y = np.array(y0, dtype=float)
    t = float(t0)
    direction = 1.0 if t1 >= t0 else -1.0
    sol = OdeSolution(t, y, 0, 0, 0.0)
    if record:
        sol.ts.append(t)
        sol.ys.append(y.copy())
    if t1 == t0:
        return sol
    f = rhs(t, y)
    h = cfg.initial_step or _initial_step(rhs, t, y, f, direction, cfg)
    h_min = 16 * np.finfo(float).eps * max(abs(t0), abs(t1), 1.0)
    steps = 0
    while direction * (t1 - t) > 0:
        if steps >= cfg.max_steps:
            raise IntegrationError(f"step budget {cfg.max_steps} exhausted at t={t:.6g}")
        steps += 1
        h = min(h, abs(t1 - t))
        hs = direction * h
        k = [f]
        for i in range(1, 7):
            yi = y + hs * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
            k.append(rhs(t + _C[i] * hs, yi))
        y_new = y + hs * sum(b * kj for b, kj in zip(_B5, k) if b != 0.0)
        err = hs * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
        en = _error_norm(err, y, y_new, cfg)
        if not np.isfinite(en):
            raise IntegrationError(f"non-finite state near t={t:.6g}")
        if en <= 1.0:
            t = t1 if abs(t1 - (t + hs)) <= h_min else t + hs
            y = y_new
            f = k[6]
            sol.steps_accepted += 1
            sol.max_step_error = max(sol.max_step_error, en)
            if record:
                sol.ts.append(t)
                sol.ys.append(y.copy())
            factor = 10.0 if en == 0.0 else min(10.0, 0.9 * en ** (-0.2))
        else:
            sol.steps_rejected += 1
            factor = max(0.2, 0.9 * en ** (-0.2))
        h = h * factor
        if h < h_min:
            raise IntegrationError(f"step size underflow at t={t:.6g}")
    sol.t, sol.y = t, y
    return sol


# ---------------------------------------------------------------------------
# vector fields


@dataclass(frozen=True)
class FlowField:
    """``v_t(x) = -x/2 - s_t(x)/2`` for an exact or learned score.

    Attributes:
        score_fn: ``(t, x[N, d]) -> s[N, d]``.
        dim: Space dimension.
        score_and_jac_fn: Optional ``(t, x) -> (s, grad s)``; when absent the
            Jacobian is taken by central differences with step
            ``1e-4 (1 + |x|)``.
        t_min, t_max: Validity window; ``t_min_open`` excludes ``t_min``.
    """

    score_fn: Callable[[float, np.ndarray], np.ndarray]
    dim: int
    score_and_jac_fn: Callable | None = None
    t_min: float = 0.0
    t_max: float = math.inf
    t_min_open: bool = False

    @classmethod
    def from_model(cls, model: VpScoreModel) -> "FlowField":
        return cls(
            score_fn=model.score,
            dim=model.dim,
            score_and_jac_fn=model.score_and_jacobian,
            t_min=0.0,
            t_min_open=not model.smooth_at_zero,
        )

    @classmethod
    def from_callable(cls, fn, dim: int, t_min: float = 0.0, t_max: float = math.inf, t_min_open: bool = False):
        return cls(score_fn=fn, dim=dim, t_min=t_min, t_max=t_max, t_min_open=t_min_open)

    def check_time(self, t: float):
        lo_ok = t > self.t_min if self.t_min_open else t >= self.t_min
        if not (lo_ok and t <= self.t_max):
            raise FlowError(f"time {t} outside the field's validity window")

    def velocity(self, t: float, x: np.ndarray) -> np.ndarray:
        return -0.5 * x - 0.5 * self.score_fn(t, x)

    def score_and_jacobian(self, t: float, x: np.ndarray):
        if self.score_and_jac_fn is not None:
            return self.score_and_jac_fn(t, x)
        return self.score_fn(t, x), fd_jacobian(lambda z: self.score_fn(t, z), x)

    def velocity_and_jacobian(self, t: float, x: np.ndarray):
        s, js = self.score_and_jacobian(t, x)
        eye = np.eye(self.dim)[None]
        return -0.5 * x - 0.5 * s, -0.5 * eye - 0.5 * js

    def divergence(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.trace(self.velocity_and_jacobian(t, x)[1], axis1=1, axis2=2)


def fd_jacobian(fn, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of ``fn: (N, d) -> (N, d)``."""
    n, d = x.shape
    h = rel_step * (1.0 + np.linalg.norm(x, axis=1))
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        step = h[:, None] * e[None, :]
        cols.append((fn(x + step) - fn(x - step)) / (2.0 * h[:, None]))
    return np.stack(cols, axis=2)


# ---------------------------------------------------------------------------
# transports


@dataclass
class FlowResult:
    endpoint: np.ndarray  # (N, d)
    logdet: np.ndarray  # (N,)
    jacobian: np.ndarray  # (N, d, d)
    steps_accepted: int
    steps_rejected: int
    max_step_error: float
    trajectory_t: np.ndarray | None = None
    trajectory_x: np.ndarray | None = None  # (steps, N, d)
    trajectory_logdet: np.ndarray | None = None  # (steps, N)


def _augmented_rhs(field_: FlowField):
    d = field_.dim

    def rhs(t, y):
        x = y[:, :d]
        jac = y[:, d : d + d * d].reshape(-1, d, d)
        try:
            v, gv = field_.velocity_and_jacobian(t, x)
        except VpError as exc:
            raise FlowError(f"score evaluation failed at t={t:.6g}: {exc}") from exc
        dj = np.einsum("nij,njk->nik", gv, jac).reshape(len(y), d * d)
        tr = np.trace(gv, axis1=1, axis2=2)[:, None]
        return np.concatenate([v, dj, tr], axis=1)

    return rhs


def transport(
    field_: FlowField,
    from_t: float,
    to_t: float,
    x,
    cfg: IntegratorConfig | None = None,
    record: bool = False,
) -> FlowResult:
    """Map ``x`` from time ``from_t`` to ``to_t`` along the probability flow.

    Either direction is allowed; integrating backward realises the inverse
    map.  ``logdet`` is ``int tr grad v dt`` along each trajectory, so
    ``det(jacobian) = exp(logdet)``.
    """
    cfg = cfg or IntegratorConfig()
    d = field_.dim
    pts = as_points(x, d)
    n = len(pts)
    if from_t == to_t:
        return FlowResult(pts.copy(), np.zeros(n), np.tile(np.eye(d), (n, 1, 1)), 0, 0, 0.0)
    field_.check_time(from_t)
    field_.check_time(to_t)
    y0 = np.concatenate([pts, np.tile(np.eye(d).ravel(), (n, 1)), np.zeros((n, 1))], axis=1)
    sol = dopri5(_augmented_rhs(field_), from_t, to_t, y0, cfg, record=record)
    y = sol.y
    res = FlowResult(
        endpoint=y[:, :d],
        logdet=y[:, -1],
        jacobian=y[:, d : d + d * d].reshape(n, d, d),
        steps_accepted=sol.steps_accepted,
        steps_rejected=sol.steps_rejected,
        max_step_error=sol.max_step_error,
    )
    if record:
        ys = np.stack(sol.ys)
        res.trajectory_t = np.asarray(sol.ts)
        res.trajectory_x = ys[:, :, :d]
        res.trajectory_logdet = ys[:, :, -1]
    return res


def std_normal_logpdf(z: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(z**2, axis=1) - 0.5 * z.shape[1] * LOG_2PI


def pullback_logpdf(field_: FlowField, delta: float, T: float, x, cfg: IntegratorConfig | None = None) -> np.ndarray:
    """``log p_Z(phi_{delta->T}(x)) + log|det J|`` (Gaussian pullback density)."""
    if delta > T:
        raise FlowError("delta must not exceed T")
    res = transport(field_, delta, T, x, cfg)
    return std_normal_logpdf(res.endpoint) + res.logdet


# ---------------------------------------------------------------------------
# Lipschitz certificates


def _adaptive_simpson(f, a: float, b: float, tol: float, max_depth: int = 60) -> float:
    def simpson(fa, fm, fb, lo, hi):
        return (hi - lo) / 6.0 * (fa + 4.0 * fm + fb)

    def check(v, where):
        if not math.isfinite(v):
            raise FlowError(f"L(t) is not finite at t={where}")
        return v

    def recurse(lo, hi, fa, fm, fb, whole, eps, depth):
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = check(f(lm), lm), check(f(rm), rm)
        left = simpson(fa, flm, fm, lo, mid)
        right = simpson(fm, frm, fb, mid, hi)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        return recurse(lo, mid, fa, flm, fm, left, eps / 2, depth - 1) + recurse(
            mid, hi, fm, frm, fb, right, eps / 2, depth - 1
        )

    fa, fb = check(f(a), a), check(f(b), b)
    fm = check(f(0.5 * (a + b)), 0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def log_gronwall_certificate(Lcurve: Callable[[float], float], from_t: float, to_t: float, tol: float = 1e-12) -> float:
    lo, hi = sorted((float(from_t), float(to_t)))
    if lo == hi:
        return 0.0
    integral = _adaptive_simpson(lambda t: 1.0 + Lcurve(t), lo, hi, tol)
    return 0.5 * integral


def gronwall_certificate(Lcurve: Callable[[float], float], from_t: float, to_t: float, tol: float = 1e-12) -> float:
    """``exp(1/2 int (1 + L(t)) dt)``, a Lipschitz bound for both flow directions.

    Overflows to ``inf`` for very large integrals; use
    :func:`log_gronwall_certificate` when comparing such bounds.
    """
    log_c = log_gronwall_certificate(Lcurve, from_t, to_t, tol)
    return math.exp(log_c) if log_c < 709.0 else math.inf


def measure_lipschitz(field_: FlowField, from_t: float, to_t: float, grid, cfg: IntegratorConfig | None = None):
    """Largest forward and inverse Jacobian operator norms of ``phi_{from->to}`` over ``grid``."""
    pts = as_points(grid, field_.dim)
    if len(pts) == 0:
        raise FlowError("grid must be non-empty")
    res = transport(field_, from_t, to_t, pts, cfg)
    fwd = operator_norms(res.jacobian)
    dets = np.linalg.det(res.jacobian)
    if np.any(dets == 0.0) or not np.all(np.isfinite(dets)):
        bad = int(np.argmax((dets == 0.0) | ~np.isfinite(dets)))
        raise FlowError(f"singular transport Jacobian at grid point {pts[bad].tolist()}")
    inv = operator_norms(np.linalg.inv(res.jacobian))
    return float(fwd.max()), float(inv.max())
