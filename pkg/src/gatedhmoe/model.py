"""Mixing measures and the three HMoE regression functions.

A mixing measure holds, for ``H`` heads, ``K`` channels and ``N`` inner
experts per head:

* ``omega``  -- array ``(H, K)`` of channel weights,
* ``M``      -- array ``(H, N, d, d)`` of symmetric gating matrices,
* ``a``      -- array ``(H, N, K, d)`` of expert vectors.

The regression function is

    f(x) = sum_{h,k} omega[h,k] * C_{h,k}(x)

where the component ``C_{h,k}`` depends on the variant:

* MHA:         sum_i g_{h,i}(x) * (a[h,i,k] . x)
* GatedValue:  sum_i g_{h,i}(x) * phi(a[h,i,k] . x)
* GatedSDPA:   phi( sum_i g_{h,i}(x) * (a[h,i,k] . x) )

and ``g_{h,.}(x) = softmax_i(x^T M[h,i] x)``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

SYMMETRY_TOL = 1e-12


class DimensionError(ValueError):
    """Raised when array shapes do not agree."""


class Variant(str, enum.Enum):
    MHA = "MHA"
    GATED_VALUE = "GatedValue"
    GATED_SDPA = "GatedSDPA"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).replace("-", "").replace("_", "").lower()
        for v in cls:
            if v.value.lower() == key:
                return v
        aliases = {"value": cls.GATED_VALUE, "sdpa": cls.GATED_SDPA, "vanilla": cls.MHA}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown variant {value!r}")


@dataclass(frozen=True)
class Activation:
    """Scalar activation ``phi``: identity, or ``sigmoid(z + bias)``."""

    kind: str = "sigmoid"
    bias: float = 0.5

    def __post_init__(self):
        if self.kind not in ("identity", "sigmoid"):
            raise ValueError(f"unsupported activation kind {self.kind!r}")

    @classmethod
    def identity(cls) -> "Activation":
        return cls("identity", 0.0)

    @classmethod
    def sigmoid(cls, bias: float = 0.5) -> "Activation":
        return cls("sigmoid", float(bias))

    def __call__(self, z, order: int = 0):
        return activation_eval(self, z, order)


def activation_eval(act: Activation, z, order: int = 0):
    """Value or first/second derivative of the activation at ``z``.

    Works elementwise on arrays.
    """
    if order not in (0, 1, 2):
        raise ValueError(f"derivative order must be 0, 1 or 2, got {order}")
    z = np.asarray(z, dtype=float)
    if act.kind == "identity":
        if order == 0:
            out = z.copy()
        elif order == 1:
            out = np.ones_like(z)
        else:
            out = np.zeros_like(z)
    else:
        s = _sigmoid(z + act.bias)
        if order == 0:
            out = s
        elif order == 1:
            out = s * (1.0 - s)
        else:
            out = s * (1.0 - s) * (1.0 - 2.0 * s)
    return out[()] if out.ndim == 0 else out


def _sigmoid(z):
    # tanh form avoids overflow warnings for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant = Variant.GATED_VALUE
    activation: Activation = Activation()

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))

    @property
    def phi(self) -> Activation:
        """Activation in effect; MHA always uses the identity."""
        if self.variant is Variant.MHA:
            return Activation.identity()
        return self.activation


class MixingMeasure:
    """Immutable container for ``(omega, M, a)``.

    Gating matrices are symmetrized on ingest.
    """

    __slots__ = ("omega", "M", "a")

    def __init__(self, omega, M, a):
        omega = np.array(omega, dtype=float)
        M = np.array(M, dtype=float)
        a = np.array(a, dtype=float)
        if omega.ndim != 2 or M.ndim != 4 or a.ndim != 4:
            raise DimensionError(
                f"expected omega (H,K), M (H,N,d,d), a (H,N,K,d); got "
                f"{omega.shape}, {M.shape}, {a.shape}"
            )
        H, K = omega.shape
        if M.shape[0] != H or M.shape[2] != M.shape[3]:
            raise DimensionError(f"M has shape {M.shape}, expected ({H}, N, d, d)")
        N, d = M.shape[1], M.shape[2]
        if a.shape != (H, N, K, d):
            raise DimensionError(f"a has shape {a.shape}, expected {(H, N, K, d)}")
        if N < 1 or K < 1 or d < 1:
            raise DimensionError("H, N, K and d must all be positive")
        M = 0.5 * (M + M.swapaxes(-1, -2))
        for arr in (omega, M, a):
            arr.flags.writeable = False
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "a", a)

    def __setattr__(self, name, value):
        raise AttributeError("MixingMeasure is immutable")

    @property
    def H(self) -> int:
        return self.omega.shape[0]

    @property
    def K(self) -> int:
        return self.omega.shape[1]

    @property
    def N(self) -> int:
        return self.M.shape[1]

    @property
    def d(self) -> int:
        return self.M.shape[2]

    def __repr__(self):
        return f"MixingMeasure(H={self.H}, N={self.N}, K={self.K}, d={self.d})"

    def __eq__(self, other):
        if not isinstance(other, MixingMeasure):
            return NotImplemented
        return (
            np.array_equal(self.omega, other.omega)
            and np.array_equal(self.M, other.M)
            and np.array_equal(self.a, other.a)
        )

    __hash__ = None

    def replace(self, omega=None, M=None, a=None) -> "MixingMeasure":
        return MixingMeasure(
            self.omega if omega is None else omega,
            self.M if M is None else M,
            self.a if a is None else a,
        )

    def normalized(self) -> "MixingMeasure":
        """Shift every head's gating matrices so the last one is zero.

        Softmax gates are translation invariant, so the regression function
        is unchanged.
        """
        return self.replace(M=self.M - self.M[:, -1:])

    def to_dict(self) -> dict:
        return {
            "H": self.H,
            "N": self.N,
            "K": self.K,
            "d": self.d,
            "omega": self.omega.tolist(),
            "M": self.M.tolist(),
            "a": self.a.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixingMeasure":
        G = cls(doc["omega"], doc["M"], doc["a"])
        declared = {k: doc[k] for k in ("H", "N", "K", "d") if k in doc}
        actual = {"H": G.H, "N": G.N, "K": G.K, "d": G.d}
        for k, v in declared.items():
            if int(v) != actual[k]:
                raise DimensionError(f"declared {k}={v} but arrays give {k}={actual[k]}")
        return G

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path) -> "MixingMeasure":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_true_measure(normalize: bool = True) -> MixingMeasure:
    """Ground-truth measure of the synthetic benchmark (H=N=K=d=2).

    The published gating matrices do not have a zero last matrix per head;
    with ``normalize=True`` they are shifted so that they do, which leaves
    every regression function unchanged.
    """
    text = resources.files("gatedhmoe").joinpath("fixtures/true_measure.json").read_text()
    G = MixingMeasure.from_dict(json.loads(text))
    return G.normalized() if normalize else G


# ---------------------------------------------------------------------------
# gates and forward pass


def softmax_gates(M_list, x) -> np.ndarray:
    """Softmax of ``x^T M_i x`` over the list of matrices."""
    M = np.asarray(M_list, dtype=float)
    x = np.asarray(x, dtype=float)
    if M.ndim != 3 or M.shape[0] == 0:
        raise DimensionError(f"expected a nonempty stack of matrices, got shape {M.shape}")
    if x.ndim != 1 or M.shape[1:] != (x.size, x.size):
        raise DimensionError(f"matrices of shape {M.shape[1:]} do not match x of length {x.size}")
    logits = np.einsum("p,ipq,q->i", x, M, x)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def quad_features(X: np.ndarray) -> np.ndarray:
    """Products ``x_p x_q`` for ``p <= q``, off-diagonal ones doubled.

    With ``upper_triangle(M)`` this gives ``x^T M x`` as a dot product.
    """
    d = X.shape[-1]
    iu, ju = np.triu_indices(d)
    F = X[..., iu] * X[..., ju]
    F[..., iu != ju] *= 2.0
    return F


def upper_triangle(M: np.ndarray) -> np.ndarray:
    d = M.shape[-1]
    iu, ju = np.triu_indices(d)
    return M[..., iu, ju]


def gate_weights(M: np.ndarray, X: np.ndarray, F: np.ndarray | None = None) -> np.ndarray:
    """Gate values ``(n, H, N)`` for a stack of matrices ``(H, N, d, d)``."""
    H, N = M.shape[:2]
    if F is None:
        F = quad_features(X)
    q = (F @ upper_triangle(M).reshape(H * N, -1).T).reshape(-1, H, N)
    q -= q.max(axis=-1, keepdims=True)
    g = np.exp(q)
    g /= g.sum(axis=-1, keepdims=True)
    return g


class ForwardParts(NamedTuple):
    g: np.ndarray  # (n, H, N) gates
    z: np.ndarray  # (n, H, N, K) linear expert outputs a.x
    e: np.ndarray  # (n, H, N, K) expert outputs inside the mixture
    s: np.ndarray  # (n, H, K) inner mixture sum_i g e
    comp: np.ndarray  # (n, H, K) components
    f: np.ndarray  # (n,) regression function


def forward(G: MixingMeasure, spec: ModelSpec, X, F=None) -> ForwardParts:
    """Vectorized forward pass with all intermediates kept."""
    X = _as_matrix(X, G.d)
    return forward_arrays(G.omega, G.M, G.a, spec, X, F)


def forward_arrays(omega, M, a, spec: ModelSpec, X, F=None) -> ForwardParts:
    H, N, K, d = a.shape
    n = X.shape[0]
    g = gate_weights(M, X, F)
    z = (X @ a.reshape(H * N * K, d).T).reshape(n, H, N, K)
    phi = spec.phi
    if spec.variant is Variant.GATED_VALUE:
        e = phi(z)
    else:
        e = z
    s = np.einsum("nhi,nhik->nhk", g, e)
    if spec.variant is Variant.GATED_SDPA:
        comp = phi(s)
    else:
        comp = s
    f = comp.reshape(n, H * K) @ omega.reshape(H * K)
    return ForwardParts(g, z, e, s, comp, f)


def _as_matrix(X, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != d:
        raise DimensionError(f"inputs of shape {X.shape} do not match dimension d={d}")
    return X


def eval_component(G: MixingMeasure, spec: ModelSpec, h: int, k: int, x):
    """Component ``C_{h,k}`` at a point (scalar) or at rows of ``X`` (vector)."""
    if not (0 <= h < G.H and 0 <= k < G.K):
        raise IndexError(f"component ({h}, {k}) outside H={G.H}, K={G.K}")
    single = np.ndim(x) == 1
    X = _as_matrix(x, G.d)
    g = gate_weights(G.M[h : h + 1], X)[:, 0]  # (n, N)
    z = X @ G.a[h, :, k, :].T  # (n, N)
    phi = spec.phi
    if spec.variant is Variant.GATED_VALUE:
        out = np.sum(g * phi(z), axis=1)
    elif spec.variant is Variant.GATED_SDPA:
        out = phi(np.sum(g * z, axis=1))
    else:
        out = np.sum(g * z, axis=1)
    return float(out[0]) if single else out


def component_values(G: MixingMeasure, spec: ModelSpec, X) -> np.ndarray:
    """All components at once, shape ``(n, H, K)``."""
    return forward(G, spec, X).comp


def eval_model(G: MixingMeasure, spec: ModelSpec, x):
    """Regression function at a point (scalar) or at rows of ``X``."""
    single = np.ndim(x) == 1
    f = forward(G, spec, x).f
    return float(f[0]) if single else f


# ---------------------------------------------------------------------------
# assumption checks


WEIGHTS = "weights"
NORMALIZATION = "normalization"
GATING = "gating"
DISTINCT = "distinct_experts"


@dataclass(frozen=True)
class Violation:
    assumption: str
    index: tuple
    message: str


def validate_measure(G: MixingMeasure, as_ground_truth: bool = True) -> list[Violation]:
    """Report which standing assumptions ``G`` breaks.

    Codes: ``weights`` (nonnegative, not all zero), ``normalization``
    (symmetric gating matrices, last one per head zero), ``gating`` (some
    non-pinned gating matrix per head is nonzero), ``distinct_experts``.
    Normalization is checked for every measure, the rest only when
    ``as_ground_truth`` is set.
    """
    out: list[Violation] = []
    asym = np.abs(G.M - G.M.swapaxes(-1, -2))
    for h, i in zip(*np.nonzero(asym.max(axis=(-1, -2)) > SYMMETRY_TOL)):
        out.append(Violation(NORMALIZATION, (int(h), int(i)), "gating matrix is not symmetric"))
    for h in range(G.H):
        if np.any(G.M[h, -1] != 0.0):
            out.append(Violation(NORMALIZATION, (h, G.N - 1), "last gating matrix of the head is not zero"))
    if not as_ground_truth:
        return out

    for h, k in zip(*np.nonzero(G.omega < 0)):
        out.append(Violation(WEIGHTS, (int(h), int(k)), f"negative weight {G.omega[h, k]}"))
    if not np.any(G.omega > 0):
        out.append(Violation(WEIGHTS, (), "no strictly positive weight"))
    for h in range(G.H):
        if G.N < 2 or not np.any(G.M[h, :-1] != 0.0):
            out.append(Violation(GATING, (h,), "all non-pinned gating matrices are zero"))
    flat = G.a.reshape(-1, G.d)
    idx = list(np.ndindex(G.H, G.N, G.K))
    for p in range(len(flat)):
        for q in range(p + 1, len(flat)):
            if np.array_equal(flat[p], flat[q]):
                out.append(Violation(DISTINCT, (idx[p], idx[q]), "expert vectors coincide"))
    return out
