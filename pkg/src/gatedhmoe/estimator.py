"""Least-squares fitting of over-specified mixing measures.

Free parameters are packed into one flat vector::

    [ omega (H*K) | upper triangles of M[h, i], i < N-1 (H*(N-1)*T) | a (H*N*K*d) ]

with ``T = d(d+1)/2``.  The last gating matrix of each head is pinned to
zero and never appears in the vector, so every iterate satisfies the
normalization by construction.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    DimensionError,
    MixingMeasure,
    ModelSpec,
    Variant,
    eval_model,
    quad_features,
)

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Loss or gradient became non-finite during fitting."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if X.ndim != 2 or Y.ndim != 1 or X.shape[0] != Y.shape[0] or X.shape[0] < 1:
            raise DimensionError(f"X {X.shape} and Y {Y.shape} do not describe n >= 1 samples")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def save(self, path) -> None:
        np.savez(path, X=self.X, Y=self.Y, meta=json.dumps(self.meta))

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            return cls(z["X"], z["Y"], json.loads(str(z["meta"])))


@dataclass(frozen=True)
class OptimizerConfig:
    """Gradient descent with Armijo backtracking.

    ``loss_scale`` picks the objective the step size refers to: ``"sum"``
    is the raw SSE, ``"mean"`` is SSE/n.  Both have the same minimizers;
    ``grad_tol`` is always per sample (the SSE gradient norm is compared
    with ``grad_tol * n``).
    """

    eta: float = 0.05
    max_epochs: int = 1000
    beta: float = 0.5
    c1: float = 1e-4
    grad_tol: float = 1e-8
    max_backtracks: int = 30
    loss_scale: str = "sum"

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0 < self.c1 < 1:
            raise ConfigError(f"c1 must lie in (0, 1), got {self.c1}")
        if self.max_epochs < 0 or self.max_backtracks < 1 or self.grad_tol < 0:
            raise ConfigError("max_epochs >= 0, max_backtracks >= 1 and grad_tol >= 0 required")
        if self.loss_scale not in ("mean", "sum"):
            raise ConfigError(f"loss_scale must be 'mean' or 'sum', got {self.loss_scale!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "OptimizerConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown optimizer keys: {sorted(extra)}")
        return cls(**doc)


@dataclass
class FitResult:
    measure: MixingMeasure
    sse: float
    epochs: int
    trajectory: list[float]
    reason: str

    def to_dict(self) -> dict:
        return {
            "measure": self.measure.to_dict(),
            "sse": self.sse,
            "epochs": self.epochs,
            "trajectory": list(self.trajectory),
            "reason": self.reason,
        }


# ---------------------------------------------------------------------------
# parameter packing


class ParamLayout:
    """Maps between a MixingMeasure and its flat free-parameter vector."""

    def __init__(self, H: int, N: int, K: int, d: int):
        self.H, self.N, self.K, self.d = H, N, K, d
        self.T = d * (d + 1) // 2
        self.n_omega = H * K
        self.n_M = H * (N - 1) * self.T
        self.n_a = H * N * K * d
        self.size = self.n_omega + self.n_M + self.n_a
        self._iu = np.triu_indices(d)

    @classmethod
    def of(cls, G: MixingMeasure) -> "ParamLayout":
        return cls(G.H, G.N, G.K, G.d)

    def split(self, theta):
        """Views ``(omega (H,K), Mu (H,N-1,T), a (H,N,K,d))`` into ``theta``."""
        o, m = self.n_omega, self.n_omega + self.n_M
        return (
            theta[:o].reshape(self.H, self.K),
            theta[o:m].reshape(self.H, self.N - 1, self.T),
            theta[m:].reshape(self.H, self.N, self.K, self.d),
        )

    def pack(self, G: MixingMeasure) -> np.ndarray:
        iu, ju = self._iu
        return np.concatenate(
            [G.omega.ravel(), G.M[:, :-1, iu, ju].ravel(), G.a.ravel()]
        )

    def unpack(self, theta) -> MixingMeasure:
        omega, Mu, a = self.split(np.asarray(theta, dtype=float))
        iu, ju = self._iu
        M = np.zeros((self.H, self.N, self.d, self.d))
        M[:, :-1, iu, ju] = Mu
        M[:, :-1, ju, iu] = Mu
        return MixingMeasure(omega.copy(), M, a.copy())


# ---------------------------------------------------------------------------
# loss and gradient kernels


class _Block:
    """A contiguous slice of the data, laid out samples-last."""

    def __init__(self, X, Y):
        self.XT = np.ascontiguousarray(X.T)
        self.FT = np.ascontiguousarray(quad_features(X).T)
        self.Y = np.ascontiguousarray(Y)
        self.n = len(Y)


class _Problem:
    """Loss and gradient of one dataset under one model variant.

    The samples are split into a fixed sequence of blocks.  A line-search
    candidate whose running SSE over the first few blocks already exceeds
    the acceptance bound is rejected without touching the rest; since every
    residual square is nonnegative the decision is exact.
    """

    BLOCK = 2048
    MAX_BLOCKS = 12

    def __init__(self, layout: ParamLayout, data: Dataset, spec: ModelSpec):
        if data.d != layout.d:
            raise DimensionError(f"data dimension {data.d} != measure dimension {layout.d}")
        self.layout = layout
        self.variant = spec.variant
        self.phi = spec.phi
        m = max(self.BLOCK, -(-data.n // self.MAX_BLOCKS))
        self.blocks = [
            _Block(data.X[i : i + m], data.Y[i : i + m]) for i in range(0, data.n, m)
        ]

    def _forward(self, theta, b: _Block):
        L = self.layout
        H, N, K, d = L.H, L.N, L.K, L.d
        n = b.n
        omega, Mu, a = L.split(theta)
        q = np.zeros((H, N, n))
        q[:, :-1] = (Mu.reshape(H * (N - 1), L.T) @ b.FT).reshape(H, N - 1, n)
        q -= q.max(axis=1, keepdims=True)
        g = np.exp(q, out=q)
        g /= g.sum(axis=1, keepdims=True)
        z = (a.reshape(H * N * K, d) @ b.XT).reshape(H, N, K, n)
        e = self.phi(z) if self.variant is Variant.GATED_VALUE else z
        s = g[:, 0, None, :] * e[:, 0]
        for i in range(1, N):
            s += g[:, i, None, :] * e[:, i]
        comp = self.phi(s) if self.variant is Variant.GATED_SDPA else s
        r = b.Y - omega.ravel() @ comp.reshape(H * K, n)
        return (g, z, e, s, comp, r)

    def evaluate(self, theta, bound: float = np.inf):
        """SSE plus per-block caches, or ``(partial_sse, None)`` if rejected early."""
        total = 0.0
        caches = []
        for b in self.blocks:
            cache = self._forward(theta, b)
            r = cache[-1]
            total += float(r @ r)
            if not total <= bound:
                return total, None
            caches.append(cache)
        return total, caches

    def sse(self, theta) -> float:
        return self.evaluate(theta)[0]

    def gradient(self, theta, caches) -> np.ndarray:
        L = self.layout
        H, N, K, d = L.H, L.N, L.K, L.d
        omega = L.split(theta)[0]
        grad = np.zeros(L.size)
        for b, (g, z, e, s, comp, r) in zip(self.blocks, caches):
            n = b.n
            dfw = -2.0 * r  # dSSE/df
            grad_omega = comp.reshape(H * K, n) @ dfw
            W = omega[:, :, None] * dfw  # dSSE/dcomp, (H,K,n)
            if self.variant is Variant.GATED_SDPA:
                W *= self.phi(s, 1)
            # dcomp/de_i = g_i, and de/dz = phi' under GatedValue
            coef = g[:, :, None, :] * W[:, None]  # (H,N,K,n)
            if self.variant is Variant.GATED_VALUE:
                coef *= self.phi(z, 1)
            # dcomp/dq_j = g_j (e_j - s)
            dq = np.empty((H, N - 1, n))
            for j in range(N - 1):
                dq[:, j] = g[:, j] * np.sum((e[:, j] - s) * W, axis=1)
            grad_a = coef.reshape(H * N * K, n) @ b.XT.T
            grad_Mu = dq.reshape(H * (N - 1), n) @ b.FT.T
            grad += np.concatenate([grad_omega, grad_Mu.ravel(), grad_a.ravel()])
        return grad

    def sse_and_grad(self, theta):
        sse, caches = self.evaluate(theta)
        return sse, self.gradient(theta, caches)


def sse_loss(G: MixingMeasure, data: Dataset, spec: ModelSpec) -> float:
    """Sum of squared residuals of ``G`` on ``data``."""
    if data.d != G.d:
        raise DimensionError(f"data dimension {data.d} != measure dimension {G.d}")
    r = data.Y - eval_model(G, spec, data.X)
    return float(r @ r)


def loss_gradient(G: MixingMeasure, data: Dataset, spec: ModelSpec) -> MixingMeasure:
    """Gradient of the SSE with respect to the free parameters.

    Returned as a MixingMeasure-shaped object: ``omega`` and ``a`` hold the
    gradients, ``M`` holds the gradient with respect to each free
    upper-triangular entry (mirrored below the diagonal); the pinned last
    matrix of each head gets zero.
    """
    layout = ParamLayout.of(G)
    _, grad = _Problem(layout, data, spec).sse_and_grad(layout.pack(G))
    return layout.unpack(grad)


def loss_gradient_vector(G: MixingMeasure, data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Same as :func:`loss_gradient` but as a flat vector in packing order."""
    layout = ParamLayout.of(G)
    return _Problem(layout, data, spec).sse_and_grad(layout.pack(G))[1]


# ---------------------------------------------------------------------------
# optimizer


def fit(
    G0: MixingMeasure,
    data: Dataset,
    spec: ModelSpec,
    cfg: OptimizerConfig | None = None,
    freeze: tuple[str, ...] = (),
) -> FitResult:
    """Full-batch gradient descent with Armijo backtracking from ``G0``.

    Every epoch starts its line search at ``cfg.eta``; a step is accepted
    once ``obj(theta - t g) <= obj(theta) - c1 t |g|^2``.  If no step is
    accepted within ``max_backtracks`` halvings the fit stops where it is.
    Blocks named in ``freeze`` (any of "omega", "M", "a") are held fixed.
    """
    cfg = cfg or OptimizerConfig()
    layout = ParamLayout.of(G0)
    prob = _Problem(layout, data, spec)
    mask = np.ones(layout.size)
    for name, block in zip(("omega", "M", "a"), layout.split(mask)):
        if name in freeze:
            block[...] = 0.0
    n = data.n
    scale = 1.0 / n if cfg.loss_scale == "mean" else 1.0
    tol = cfg.grad_tol * n  # on the SSE gradient

    theta = layout.pack(G0.normalized() if np.any(G0.M[:, -1] != 0) else G0)
    sse, caches = prob.evaluate(theta)
    grad = prob.gradient(theta, caches) * mask
    _check_finite(sse, grad, 0)
    trajectory = [sse]
    reason = "max_epochs"
    epoch = 0
    while epoch < cfg.max_epochs:
        gnorm2 = float(grad @ grad)
        if np.sqrt(gnorm2) <= tol:
            reason = "gradient_tolerance"
            break
        # a step t on the scaled objective moves theta by t*scale*grad, and
        # its Armijo condition in SSE units reads SSE' <= SSE - c1*(t*scale)*|grad|^2
        step = cfg.eta * scale
        accepted = False
        for _ in range(cfg.max_backtracks):
            cand = theta - step * grad
            cand_sse, cand_caches = prob.evaluate(cand, bound=sse - cfg.c1 * step * gnorm2)
            if cand_caches is not None:
                accepted = True
                break
            step *= cfg.beta
        if not accepted:
            reason = "line_search_failed"
            break
        theta, sse = cand, cand_sse
        epoch += 1
        grad = prob.gradient(theta, cand_caches) * mask
        _check_finite(sse, grad, epoch)
        trajectory.append(sse)
    return FitResult(layout.unpack(theta), sse, epoch, trajectory, reason)


def _check_finite(sse, grad, epoch):
    if not np.isfinite(sse) or not np.all(np.isfinite(grad)):
        raise FitError(f"non-finite loss or gradient at epoch {epoch}")


def init_near_truth(
    Gstar: MixingMeasure,
    K_fit: int,
    n: int,
    rng: np.random.Generator,
    scale: float = 1.0,
    exponent: float = 0.083,
) -> MixingMeasure:
    """Over-specified starting point around the truth.

    Channel ``k >= K*`` copies true channel ``k mod K*``; duplicated channels
    share their true weight evenly.  Every free parameter then gets an
    independent ``U(-r, r)`` perturbation with ``r = scale * n**(-exponent)``.
    """
    Ks = Gstar.K
    if K_fit < Ks:
        raise ConfigError(f"K_fit={K_fit} is smaller than the true channel count {Ks}")
    Gstar = Gstar.normalized()
    src = np.arange(K_fit) % Ks
    counts = np.bincount(src, minlength=Ks)
    base = MixingMeasure(Gstar.omega[:, src] / counts[src], Gstar.M, Gstar.a[:, :, src, :])
    layout = ParamLayout.of(base)
    radius = scale * float(n) ** (-exponent)
    theta = layout.pack(base) + rng.uniform(-radius, radius, size=layout.size)
    return layout.unpack(theta)


def fit_result_to_json(result: FitResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict()))


def optimizer_config_dict(cfg: OptimizerConfig) -> dict:
    return asdict(cfg)
