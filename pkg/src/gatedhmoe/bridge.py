"""Entries of a (gated) multi-head self-attention layer as HMoE models.

Row ``i``, column ``i'`` of the layer output is a function of ``x = vec(X)``
(rows of ``X`` stacked).  Each head is a softmax over sequence positions
``j`` with logits ``x^T J_i^T P_h J_j x``; position ``j`` contributes the
value ``(J_j^T W_V[:, k])^T x`` on channel ``k``, and channels are mixed by
column ``i'`` of ``W_O``.  That is exactly an ``(H, N, d_v)`` mixing measure
over inputs of dimension ``N d``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Activation, DimensionError, MixingMeasure, ModelSpec, Variant, eval_model


class Placement(str, enum.Enum):
    NONE = "None"
    AFTER_VALUE = "AfterValue"
    AFTER_SDPA = "AfterSDPA"

    @classmethod
    def parse(cls, value) -> "Placement":
        if isinstance(value, cls):
            return value
        key = str(value).replace("_", "").lower()
        for p in cls:
            if p.value.lower() == key:
                return p
        raise ValueError(f"unknown gate placement {value!r}")

    @property
    def variant(self) -> Variant:
        return {
            Placement.NONE: Variant.MHA,
            Placement.AFTER_VALUE: Variant.GATED_VALUE,
            Placement.AFTER_SDPA: Variant.GATED_SDPA,
        }[self]


@dataclass(frozen=True)
class AttentionWeights:
    """Per-head projections stacked on a leading head axis.

    ``W_Q``, ``W_K``, ``W_V`` have shape ``(H, d, d_v)`` and ``W_O`` has
    shape ``(H, d_v, d)``.
    """

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    N: int
    placement: Placement = Placement.NONE
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self):
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "placement", Placement.parse(self.placement))
        if self.placement is Placement.NONE:
            object.__setattr__(self, "activation", Activation.identity())
        H, d, dv = self.W_Q.shape
        if self.W_K.shape != (H, d, dv) or self.W_V.shape != (H, d, dv):
            raise DimensionError(
                f"W_Q {self.W_Q.shape}, W_K {self.W_K.shape}, W_V {self.W_V.shape} must agree"
            )
        if self.W_O.shape != (H, dv, d):
            raise DimensionError(f"W_O has shape {self.W_O.shape}, expected {(H, dv, d)}")
        if self.N < 1:
            raise DimensionError(f"sequence length must be positive, got {self.N}")

    @property
    def H(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]

    @property
    def d_v(self) -> int:
        return self.W_Q.shape[2]

    def P(self) -> np.ndarray:
        """Bilinear logit matrices ``W_Q W_K^T / sqrt(d_v)``, shape ``(H, d, d)``."""
        return self.W_Q @ self.W_K.transpose(0, 2, 1) / np.sqrt(self.d_v)

    @classmethod
    def random(cls, rng, H, N, d, d_v, placement=Placement.NONE, activation=None, scale=1.0):
        draw = lambda *s: scale * rng.standard_normal(s)
        return cls(
            draw(H, d, d_v), draw(H, d, d_v), draw(H, d, d_v), draw(H, d_v, d), N,
            placement, activation or Activation(),
        )

    def to_dict(self) -> dict:
        return {
            "H": self.H, "N": self.N, "d": self.d, "d_v": self.d_v,
            "W_Q": self.W_Q.tolist(), "W_K": self.W_K.tolist(),
            "W_V": self.W_V.tolist(), "W_O": self.W_O.tolist(),
            "placement": self.placement.value,
            "activation": {"kind": self.activation.kind, "bias": self.activation.bias},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AttentionWeights":
        act = doc.get("activation", {})
        w = cls(
            doc["W_Q"], doc["W_K"], doc["W_V"], doc["W_O"], int(doc["N"]),
            doc.get("placement", "None"),
            Activation(act.get("kind", "sigmoid"), act.get("bias", 0.5)),
        )
        for key in ("H", "d", "d_v"):
            if key in doc and doc[key] != getattr(w, key):
                raise DimensionError(f"declared {key}={doc[key]} but arrays give {getattr(w, key)}")
        return w

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path) -> "AttentionWeights":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _row_softmax(S):
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=-1, keepdims=True)


def attention_forward(w: AttentionWeights, X) -> np.ndarray:
    """Layer output of shape ``(N, d)`` with the gate at the configured placement."""
    X = np.asarray(X, dtype=float)
    if X.shape != (w.N, w.d):
        raise DimensionError(f"input of shape {X.shape}, expected {(w.N, w.d)}")
    phi = w.activation
    out = np.zeros((w.N, w.d))
    for h, P in enumerate(w.P()):
        A = _row_softmax(X @ P @ X.T)
        V = X @ w.W_V[h]
        if w.placement is Placement.AFTER_VALUE:
            head = A @ phi(V)
        elif w.placement is Placement.AFTER_SDPA:
            head = phi(A @ V)
        else:
            head = A @ V
        out += head @ w.W_O[h]
    return out


def extraction_matrix(i: int, N: int, d: int) -> np.ndarray:
    """``J_i`` with ``J_i vec(X) = X[i]`` for row-stacked ``vec``."""
    if not 0 <= i < N:
        raise IndexError(f"row {i} outside sequence length {N}")
    e = np.zeros((1, N))
    e[0, i] = 1.0
    return np.kron(e, np.eye(d))


def attention_entry_as_hmoe(w: AttentionWeights, i: int, i_out: int) -> MixingMeasure:
    """Mixing measure whose regression function at ``vec(X)`` is output entry ``(i, i_out)``.

    Heads stay heads, sequence positions become inner experts and value
    channels become channels.  Gating matrices are stored symmetrized.
    """
    if not 0 <= i < w.N:
        raise IndexError(f"row {i} outside sequence length {w.N}")
    if not 0 <= i_out < w.d:
        raise IndexError(f"output column {i_out} outside d={w.d}")
    H, N, d, dv = w.H, w.N, w.d, w.d_v
    J = [extraction_matrix(j, N, d) for j in range(N)]
    P = w.P()
    M = np.empty((H, N, N * d, N * d))
    a = np.empty((H, N, dv, N * d))
    for h in range(H):
        for j in range(N):
            B = J[i].T @ P[h] @ J[j]
            M[h, j] = 0.5 * (B + B.T)
            a[h, j] = (J[j].T @ w.W_V[h]).T
    omega = w.W_O[:, :, i_out]
    return MixingMeasure(omega, M, a)


def entry_spec(w: AttentionWeights) -> ModelSpec:
    return ModelSpec(w.placement.variant, w.activation)


def verify_equivalence(w: AttentionWeights, X) -> float:
    """Largest |direct - HMoE| over all output entries."""
    X = np.asarray(X, dtype=float)
    direct = attention_forward(w, X)
    x = X.reshape(-1)
    spec = entry_spec(w)
    worst = 0.0
    for i in range(w.N):
        for i_out in range(w.d):
            via = eval_model(attention_entry_as_hmoe(w, i, i_out), spec, x)
            worst = max(worst, abs(via - direct[i, i_out]))
    return worst
