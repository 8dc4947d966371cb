"""Numerical linear-independence checks for the derivative families.

Every family member is a product of elementary factors:

    phi^(m)(f*_{hk}(x)) / E_h(x)^p * prod_i exp(c_i x^T M_i x)
        * prod_i (a_{h,i,k}^T x)^(b_i) * f*_{hk}(x)^s * x^alpha * psi^(j)(a^T x)

so members are generated symbolically as exponent records and evaluated in
one place.  Members that reduce to the same record are the same function
and are kept once (this covers symmetric matrix indices and mixed partials
that land on the same monomial).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .model import Activation, MixingMeasure

log = logging.getLogger(__name__)

MAX_ORDER = 2


class UnsupportedOrder(ValueError):
    pass


# ---------------------------------------------------------------------------
# closed-form partials of u and u-bar


def _monomial(X, alpha) -> np.ndarray:
    out = np.ones(X.shape[:-1])
    for p, e in enumerate(alpha):
        if e:
            out = out * X[..., p] ** e
    return out


def _multi_index_exponent(t1, t2, d: int):
    t1 = np.zeros((d, d), dtype=int) if t1 is None else np.asarray(t1, dtype=int)
    t2 = np.zeros(d, dtype=int) if t2 is None else np.asarray(t2, dtype=int)
    if t1.shape != (d, d) or t2.shape != (d,):
        raise ValueError(f"multi-index shapes {t1.shape}, {t2.shape} do not match d={d}")
    if np.any(t1 < 0) or np.any(t2 < 0):
        raise ValueError("multi-indices must be nonnegative")
    if t1.sum() + t2.sum() > MAX_ORDER:
        raise UnsupportedOrder(f"derivative order {t1.sum() + t2.sum()} exceeds {MAX_ORDER}")
    alpha = t1.sum(axis=1) + t1.sum(axis=0) + t2
    return alpha, int(t2.sum())


def u_derivative(x, M, a, t1=None, t2=None, gated: bool = False, act: Activation | None = None):
    """Mixed partial of ``u = exp(x^T M x) a^T x`` (or ``exp(x^T M x) phi(a^T x)`` when gated).

    ``t1[p, q]`` counts derivatives in the entry ``M[p, q]`` taken as an
    independent coordinate, so each one brings down ``x_p x_q``; ``t2[p]``
    counts derivatives in ``a[p]``.  Works on a point or on rows of ``x``.
    """
    x = np.asarray(x, dtype=float)
    M = np.asarray(M, dtype=float)
    a = np.asarray(a, dtype=float)
    d = a.size
    alpha, j = _multi_index_exponent(t1, t2, d)
    quad = np.einsum("...p,pq,...q->...", x, M, x)
    z = x @ a
    if gated:
        inner = (act or Activation()).__call__(z, j)
    else:
        inner = z if j == 0 else (np.ones_like(z) if j == 1 else np.zeros_like(z))
    out = np.exp(quad) * _monomial(x, alpha) * inner
    return float(out) if out.ndim == 0 else out


def pde_residual(act: Activation, M, a, sample) -> float:
    """Largest ``|a . grad_a u - u|`` over the sample for ``u = exp(x^T M x) phi(a^T x)``."""
    X = np.atleast_2d(np.asarray(sample, dtype=float))
    a = np.asarray(a, dtype=float)
    d = a.size
    u = u_derivative(X, M, a, gated=True, act=act)
    directional = np.zeros(len(X))
    for p in range(d):
        t2 = np.zeros(d, dtype=int)
        t2[p] = 1
        directional += a[p] * u_derivative(X, M, a, None, t2, gated=True, act=act)
    return float(np.max(np.abs(directional - u)))


# ---------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class Member:
    """One family member.

    ``label`` names the member as constructed (base function, variables
    differentiated, component indices); the remaining fields are the
    exponent record it evaluates through.
    """

    label: str
    h: int
    k: int
    phi_order: int  # m: order of phi derivative applied to f*_{hk}; -1 for none
    e_power: int  # p: power of 1/E_h
    c: tuple  # exponent of exp(x^T M_{h,i} x) per expert i
    b: tuple  # power of (a_{h,i,k}^T x) per expert i
    s: int  # power of f*_{hk}
    alpha: tuple  # monomial exponents
    inner: tuple = ()  # ((i, j), ...): psi^(j)(a_{h,i,k}^T x) factors, psi the activation

    def key(self):
        return (self.h, self.k, self.phi_order, self.e_power, self.c, self.b, self.s, self.alpha, self.inner)


@dataclass
class FunctionFamily:
    members: list[Member]
    measure: MixingMeasure
    act: Activation
    kind: str

    def __len__(self):
        return len(self.members)

    @property
    def descriptors(self) -> list[str]:
        return [m.label for m in self.members]

    def evaluate(self, X) -> np.ndarray:
        """Evaluation matrix of shape ``(Q, len(family))``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        G = self.measure
        quad = np.einsum("np,hipq,nq->nhi", X, G.M, X)  # (Q, H, N)
        E = np.exp(quad).sum(axis=2)  # (Q, H)
        z = np.einsum("np,hikp->nhik", X, G.a)  # (Q, H, N, K)
        gates = np.exp(quad - quad.max(axis=2, keepdims=True))
        gates /= gates.sum(axis=2, keepdims=True)
        fstar = np.einsum("nhi,nhik->nhk", gates, z)
        out = np.empty((len(X), len(self.members)))
        for col, m in enumerate(self.members):
            v = _monomial(X, m.alpha)
            if m.phi_order >= 0:
                v = v * self.act(fstar[:, m.h, m.k], m.phi_order)
            if m.e_power:
                v = v / E[:, m.h] ** m.e_power
            if m.s:
                v = v * fstar[:, m.h, m.k] ** m.s
            for i, (ci, bi) in enumerate(zip(m.c, m.b)):
                if ci:
                    v = v * np.exp(ci * quad[:, m.h, i])
                if bi:
                    v = v * z[:, m.h, i, m.k] ** bi
            for i, j in m.inner:
                v = v * self.act(z[:, m.h, i, m.k], j)
            out[:, col] = v
        return out


def _variables(d: int):
    """Differentiation variables: ("M", p, q) with p <= q, then ("a", p)."""
    return [("M", p, q) for p in range(d) for q in range(p, d)] + [("a", p) for p in range(d)]


def _multisets(d: int, lo: int, hi: int, only=None):
    vs = [v for v in _variables(d) if only is None or v[0] == only]
    for order in range(lo, hi + 1):
        yield from itertools.combinations_with_replacement(vs, order)


def _split(vars_, d: int):
    """Monomial exponent and number of a-derivatives for a multiset of variables."""
    alpha = [0] * d
    j = 0
    for v in vars_:
        if v[0] == "M":
            alpha[v[1]] += 1
            alpha[v[2]] += 1
        else:
            alpha[v[1]] += 1
            j += 1
    return tuple(alpha), j


def _fmt(vars_) -> str:
    if not vars_:
        return "-"
    return ",".join(f"M{v[1]}{v[2]}" if v[0] == "M" else f"a{v[1]}" for v in vars_)


def _unit(N: int, i: int, value: int = 1) -> tuple:
    t = [0] * N
    t[i] = value
    return tuple(t)


def _dedupe(members: list[Member]) -> list[Member]:
    seen, out = set(), []
    for m in members:
        k = m.key()
        if k not in seen:
            seen.add(k)
            out.append(m)
    return out


def build_type1_family(Gstar: MixingMeasure, act: Activation) -> FunctionFamily:
    """``u-bar`` and its partials of total order 1 and 2 at every true (M, a) pair."""
    H, N, K, d = Gstar.H, Gstar.N, Gstar.K, Gstar.d
    members = []
    for h, i, k in itertools.product(range(H), range(N), range(K)):
        for vars_ in _multisets(d, 0, MAX_ORDER):
            alpha, j = _split(vars_, d)
            members.append(
                Member(
                    label=f"ubar[{_fmt(vars_)}](h={h},i={i},k={k})",
                    h=h, k=k, phi_order=-1, e_power=0,
                    c=_unit(N, i), b=(0,) * N, s=0, alpha=alpha, inner=((i, j),),
                )
            )
    return FunctionFamily(_dedupe(members), Gstar, act, "type1")


def _u_partial(vars_, i: int, N: int, d: int):
    """(c, b, alpha) record of a partial of ``u`` at expert i; None if it vanishes."""
    alpha, j = _split(vars_, d)
    if j > 1:
        return None
    return _unit(N, i), _unit(N, i, 1 - j), alpha


def build_type2_family(Gstar: MixingMeasure, act: Activation) -> FunctionFamily:
    """The five member classes built around ``phi(f*_{hk})`` for Setting II."""
    H, N, K, d = Gstar.H, Gstar.N, Gstar.K, Gstar.d
    zero = (0,) * N
    members = []
    for h, k in itertools.product(range(H), range(K)):
        tag = f"h={h},k={k}"
        members.append(
            Member(f"phi(f*)({tag})", h, k, 0, 0, zero, zero, 0, (0,) * d)
        )
        for i in range(N):
            # derivatives of v = exp(x^T M x) f* in M
            for r in _multisets(d, 1, 2, only="M"):
                alpha, _ = _split(r, d)
                members.append(
                    Member(f"dv[{_fmt(r)}]*phi'/E({tag},i={i})", h, k, 1, 1, _unit(N, i), zero, 1, alpha)
                )
            # derivatives of u with |t2| != 2
            for t in _multisets(d, 1, 2):
                rec = _u_partial(t, i, N, d)
                if rec is None:
                    continue
                c, b, alpha = rec
                members.append(Member(f"du[{_fmt(t)}]*phi'/E({tag},i={i})", h, k, 1, 1, c, b, 0, alpha))
        firsts = [v for v in _variables(d)]
        for i1, i2 in itertools.product(range(N), repeat=2):
            for v1, v2 in itertools.product(firsts, repeat=2):
                c1, b1, al1 = _u_partial((v1,), i1, N, d)
                c2, b2, al2 = _u_partial((v2,), i2, N, d)
                members.append(
                    Member(
                        f"du[{_fmt((v1,))}]@{i1}*du[{_fmt((v2,))}]@{i2}*phi''/E^2({tag})",
                        h, k, 2, 2,
                        tuple(np.add(c1, c2).tolist()), tuple(np.add(b1, b2).tolist()), 0,
                        tuple(np.add(al1, al2).tolist()),
                    )
                )
            for r1, r2 in itertools.product(_variables(d)[: d * (d + 1) // 2], repeat=2):
                al1, _ = _split((r1,), d)
                al2, _ = _split((r2,), d)
                members.append(
                    Member(
                        f"dv[{_fmt((r1,))}]@{i1}*dv[{_fmt((r2,))}]@{i2}*phi''/E^2({tag})",
                        h, k, 2, 2,
                        tuple(np.add(_unit(N, i1), _unit(N, i2)).tolist()), zero, 2,
                        tuple(np.add(al1, al2).tolist()),
                    )
                )
    return FunctionFamily(_dedupe(members), Gstar, act, "type2")


def gram_min_singular(family: FunctionFamily, sample) -> float:
    """Smallest singular value of the column-normalized evaluation matrix.

    An identically zero column is exact linear dependence and gives 0.
    """
    X = np.atleast_2d(np.asarray(sample, dtype=float))
    if len(X) < 4 * len(family):
        raise ValueError(f"need at least {4 * len(family)} sample points, got {len(X)}")
    with np.errstate(over="ignore", invalid="ignore"):
        A = family.evaluate(X)
    bad = ~np.all(np.isfinite(A), axis=0)
    if bad.any():
        raise FloatingPointError(f"non-finite values for member {family.members[int(np.argmax(bad))].label}")
    norms = np.linalg.norm(A, axis=0)
    zero = norms == 0
    if zero.any():
        log.warning("%d identically zero member(s), e.g. %s", zero.sum(), family.members[int(np.argmax(zero))].label)
        return 0.0
    return float(np.linalg.svd(A / norms, compute_uv=False)[-1])

