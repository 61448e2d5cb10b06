"""Small dense networks in numpy with exact reverse- and forward-mode derivatives.

Besides plain backpropagation, :class:`DenseNet` can push input tangents
through the network (giving the exact input Jacobian alongside the output)
and backpropagate a loss that depends on that Jacobian.  This is what the
exact log-determinant of an invertible residual block needs.
"""

from __future__ import annotations

import base64
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import special


class NetError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# activations: value, first and second derivative


def _sigmoid(z):
    return special.expit(z)


def _silu(z, order=2):
    s = _sigmoid(z)
    if order == 0:
        return (z * s,)
    d1 = s * (1.0 + z * (1.0 - s))
    if order == 1:
        return z * s, d1
    return z * s, d1, s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


def _elu(z, order=2):
    ez = np.exp(np.minimum(z, 0.0))
    pos = z > 0
    val = np.where(pos, z, ez - 1.0)
    if order == 0:
        return (val,)
    d1 = np.where(pos, 1.0, ez)
    if order == 1:
        return val, d1
    return val, d1, np.where(pos, 0.0, ez)


def _identity(z, order=2):
    return (z, np.ones_like(z), np.zeros_like(z))[: order + 1]


ACTIVATIONS = {"silu": _silu, "elu": _elu, "identity": _identity}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise NetError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# dense network


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    act: str = "identity"


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise NetError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise NetError("layer dimensions do not chain")
        for layer in self.layers:
            activation(layer.act)
            if layer.b.shape != (layer.W.shape[0],):
                raise NetError("bias shape does not match weight rows")

    @classmethod
    def init(
        cls,
        sizes: list[int],
        hidden_act: str = "silu",
        out_act: str = "identity",
        rng: np.random.Generator | int = 0,
        gain: float = math.sqrt(2.0),
        out_scale: float = 1.0,
    ) -> "DenseNet":
        """Kaiming-style uniform fan-in initialisation with zero biases."""
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            bound = gain * math.sqrt(3.0 / n_in) * (out_scale if last else 1.0)
            W = rng.uniform(-bound, bound, size=(n_out, n_in))
            layers.append(Layer(W, np.zeros(n_out), out_act if last else hidden_act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.act) for l in self.layers])

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise NetError(f"expected inputs of width {self.input_dim}, got shape {x.shape}")
        return x

    # -- plain reverse mode -------------------------------------------------

    def forward(self, x) -> np.ndarray:
        h = self._check_input(x)
        for layer in self.layers:
            h = activation(layer.act)(h @ layer.W.T + layer.b, 0)[0]
        return h

    def forward_cache(self, x):
        h = self._check_input(x)
        cache = []
        for layer in self.layers:
            z = h @ layer.W.T + layer.b
            val, d1 = activation(layer.act)(z, 1)
            cache.append((h, d1))
            h = val
        return h, cache

    def backward(self, cache, upstream: np.ndarray):
        """Gradients of ``sum(upstream * forward(x))``; returns ``(grad_x, grads)``."""
        g = np.asarray(upstream, dtype=float)
        grads: list[np.ndarray] = []
        for layer, (h_prev, d1) in zip(reversed(self.layers), reversed(cache)):
            gz = g * d1
            grads.extend([gz.sum(axis=0), gz.T @ h_prev])
            g = gz @ layer.W
        grads.reverse()
        return g, grads

    def input_jacobian(self, x) -> np.ndarray:
        """Exact ``d out / d x`` of shape ``(N, out, in)``, one reverse pass per output."""
        x = self._check_input(x)
        _, cache = self.forward_cache(x)
        rows = []
        for k in range(self.output_dim):
            e = np.zeros((len(x), self.output_dim))
            e[:, k] = 1.0
            rows.append(self.backward(cache, e)[0])
        return np.stack(rows, axis=1)

    # -- forward tangents and their reverse mode ----------------------------

    def forward_tangent(self, x):
        """Output and exact input Jacobian ``(N, out, in)`` by forward-mode tangents."""
        h = self._check_input(x)
        n, d = h.shape
        T = np.broadcast_to(np.eye(d), (n, d, d))
        cache = []
        for layer in self.layers:
            z = h @ layer.W.T + layer.b
            U = np.einsum("ij,njk->nik", layer.W, T)
            val, d1, d2 = activation(layer.act)(z)
            cache.append((h, T, U, d1, d2))
            h, T = val, d1[:, :, None] * U
        return h, T, cache

    def backward_tangent(self, cache, g_out: np.ndarray, g_jac: np.ndarray):
        """Reverse mode through :meth:`forward_tangent`.

        Args:
            cache: Third return value of :meth:`forward_tangent`.
            g_out: Upstream gradient for the output, ``(N, out)``.
            g_jac: Upstream gradient for the Jacobian, ``(N, out, in)``.

        Returns:
            ``(grad_x, grads)`` with ``grads`` aligned with :meth:`params`.
        """
        gh = np.asarray(g_out, dtype=float)
        gT = np.asarray(g_jac, dtype=float)
        grads: list[np.ndarray] = []
        for layer, (h_prev, T_prev, U, d1, d2) in zip(reversed(self.layers), reversed(cache)):
            gz = gh * d1 + np.einsum("nik,nik->ni", gT, U) * d2
            gU = d1[:, :, None] * gT
            gW = gz.T @ h_prev + np.einsum("nik,njk->ij", gU, T_prev)
            grads.extend([gz.sum(axis=0), gW])
            gh = gz @ layer.W
            gT = np.einsum("ij,nik->njk", layer.W, gU)
        grads.reverse()
        return gh, grads

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"act": l.act, "W_shape": list(l.W.shape), "W": encode_array(l.W), "b": encode_array(l.b)}
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "DenseNet":
        layers = []
        for spec in blob["layers"]:
            W = decode_array(spec["W"]).reshape(spec["W_shape"])
            layers.append(Layer(W, decode_array(spec["b"]), spec["act"]))
        return cls(layers)


def forward(net: DenseNet, x) -> np.ndarray:
    return net.forward(x)


def backward(net: DenseNet, x, upstream):
    _, cache = net.forward_cache(x)
    return net.backward(cache, upstream)


def input_jacobian(net: DenseNet, x) -> np.ndarray:
    return net.input_jacobian(x)


def encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def decode_array(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(float)


# ---------------------------------------------------------------------------
# time embedding


@dataclass
class FourierTimeEmbedding:
    """Random Fourier features of a scalar time followed by a trainable two-layer net.

    The frequencies are drawn once from ``N(0, scale^2)`` and never trained.
    """

    freqs: np.ndarray  # (k,)
    net: DenseNet

    @classmethod
    def init(cls, n_freqs: int = 16, width: int = 64, scale: float = 1.0, seed: int = 0) -> "FourierTimeEmbedding":
        rng = np.random.default_rng(seed)
        freqs = scale * rng.standard_normal(n_freqs)
        net = DenseNet.init([2 * n_freqs, width, width], hidden_act="silu", out_act="silu", rng=rng)
        return cls(freqs, net)

    @property
    def width(self) -> int:
        return self.net.output_dim

    def features(self, t) -> np.ndarray:
        arg = 2.0 * math.pi * np.asarray(t, dtype=float).reshape(-1, 1) * self.freqs[None, :]
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)

    def forward_cache(self, t):
        return self.net.forward_cache(self.features(t))

    def __call__(self, t) -> np.ndarray:
        return self.net.forward(self.features(t))


# ---------------------------------------------------------------------------
# spectral normalisation


@dataclass
class SpectralConstraint:
    """Per-layer spectral bound with persistent power-iteration vectors."""

    bound: float
    n_iter: int = 5
    certify_iter: int = 200
    vectors: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.bound <= 1.0:
            raise NetError("per-layer spectral bound must lie in (0, 1]")

    def _vector(self, key, n: int) -> np.ndarray:
        u = self.vectors.get(key)
        if u is None or u.shape != (n,):
            u = np.random.default_rng([self.seed, zlib.crc32(repr(key).encode())]).standard_normal(n)
            u /= np.linalg.norm(u)
        return u

    def estimate(self, key, W: np.ndarray, n_iter: int) -> float:
        """Power-iteration estimate of the top singular value of ``W``."""
        u = self._vector(key, W.shape[0])
        sigma = 0.0
        for _ in range(n_iter):
            v = W.T @ u
            nv = np.linalg.norm(v)
            if nv == 0.0:
                return 0.0
            v /= nv
            u = W @ v
            sigma = np.linalg.norm(u)
            if sigma == 0.0:
                return 0.0
            u /= sigma
        self.vectors[key] = u
        return float(sigma)


def project_spectral(constraint: SpectralConstraint, net: DenseNet, key: str = "", certify: bool = False) -> list[float]:
    """Rescale each weight matrix by ``min(1, bound / sigma_hat)``.

    With ``certify=True`` the estimate uses ``certify_iter`` iterations and
    the post-projection norm is checked against the bound.

    Returns:
        The post-projection spectral-norm estimate of each layer.
    """
    n_iter = constraint.certify_iter if certify else constraint.n_iter
    out = []
    for i, layer in enumerate(net.layers):
        if not np.any(layer.W):
            out.append(0.0)
            continue
        k = (key, i)
        sigma = constraint.estimate(k, layer.W, n_iter)
        if sigma > constraint.bound:
            layer.W *= constraint.bound / sigma
            sigma = constraint.bound
        if certify:
            sigma = constraint.estimate(k, layer.W, n_iter)
            if sigma > constraint.bound * (1.0 + 1e-3):
                raise NetError(f"layer {i} spectral norm {sigma:.6g} exceeds bound {constraint.bound:.6g}")
        out.append(sigma)
    return out


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr, tuple(betas), eps)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """In-place bias-corrected Adam update; refuses non-finite gradients."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise NetError("parameter, gradient and state lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise NetError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient; step aborted")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
