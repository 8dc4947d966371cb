"""Voronoi cells, expert matching and the Voronoi losses.

Fitted components (h', k') are assigned to the nearest true component
(h, k), where distance is the empirical L2 distance between component
functions on a seeded uniform grid.  Within each assignment the inner
experts are matched by the permutation minimizing total parameter distance.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .model import DimensionError, MixingMeasure, ModelSpec, component_values, eval_model

DEFAULT_Q = 4096
DEFAULT_GRID_SEED = 20240917
BRUTE_FORCE_MAX_N = 6


@dataclass(frozen=True)
class QuadratureGrid:
    points: np.ndarray
    seed: int
    Q: int

    @classmethod
    def uniform(cls, d: int, Q: int = DEFAULT_Q, seed: int = DEFAULT_GRID_SEED) -> "QuadratureGrid":
        pts = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(Q, d))
        pts.setflags(write=False)
        return cls(pts, seed, Q)


@dataclass
class VoronoiAssignment:
    """Cells keyed by true component, plus per-fitted-component permutations."""

    cells: dict[tuple[int, int], tuple[tuple[int, int], ...]]
    kappa: dict[tuple[int, int], tuple[int, ...]]
    distances: np.ndarray = field(repr=False)
    owner: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)

    def cell_size(self, hk) -> int:
        return len(self.cells[tuple(hk)])

    def to_dict(self) -> dict:
        return {
            "cells": {f"{h},{k}": [list(m) for m in mem] for (h, k), mem in self.cells.items()},
            "kappa": {f"{h},{k}": list(p) for (h, k), p in self.kappa.items()},
        }


def _check_pair(G: MixingMeasure, Gstar: MixingMeasure):
    if (G.H, G.N, G.d) != (Gstar.H, Gstar.N, Gstar.d):
        raise DimensionError(
            f"measures disagree on (H, N, d): {(G.H, G.N, G.d)} vs {(Gstar.H, Gstar.N, Gstar.d)}"
        )


def distance_matrix(G, Gstar, spec: ModelSpec, grid: QuadratureGrid) -> np.ndarray:
    """RMS distance between every fitted and every true component, shape (H*K, H*K*)."""
    _check_pair(G, Gstar)
    cf = component_values(G, spec, grid.points).reshape(grid.Q, -1)
    ct = component_values(Gstar, spec, grid.points).reshape(grid.Q, -1)
    diff = cf[:, :, None] - ct[:, None, :]
    return np.sqrt(np.mean(diff * diff, axis=0))


def component_distance(G, Gstar, hk_fit, hk_true, spec: ModelSpec, grid: QuadratureGrid) -> float:
    (hf, kf), (ht, kt) = hk_fit, hk_true
    cf = component_values(G, spec, grid.points)[:, hf, kf]
    ct = component_values(Gstar, spec, grid.points)[:, ht, kt]
    return float(np.sqrt(np.mean((cf - ct) ** 2)))


def regression_distance(G, Gstar, spec: ModelSpec, grid: QuadratureGrid) -> float:
    """Grid L2 distance between the two regression functions."""
    diff = eval_model(G, spec, grid.points) - eval_model(Gstar, spec, grid.points)
    return float(np.sqrt(np.mean(diff * diff)))


def _expert_costs(G, Gstar, hk_fit, hk_true) -> np.ndarray:
    """cost[j, i] = |theta_{h',j,k'} - theta*_{h,i,k}| with theta = (M, a)."""
    (hf, kf), (ht, kt) = hk_fit, hk_true
    dM = G.M[hf][:, None] - Gstar.M[ht][None, :]
    da = G.a[hf, :, kf][:, None] - Gstar.a[ht, :, kt][None, :]
    return np.sqrt(np.sum(dM * dM, axis=(2, 3)) + np.sum(da * da, axis=2))


def match_experts(G, Gstar, hk_fit, hk_true) -> tuple[int, ...]:
    """Permutation kappa with kappa[i] the fitted expert matched to true expert i."""
    cost = _expert_costs(G, Gstar, hk_fit, hk_true)
    N = cost.shape[0]
    if N > BRUTE_FORCE_MAX_N:
        from scipy.optimize import linear_sum_assignment

        rows, cols = linear_sum_assignment(cost.T)
        return tuple(int(c) for c in cols[np.argsort(rows)])
    best, best_cost = None, np.inf
    idx = np.arange(N)
    for perm in itertools.permutations(range(N)):
        c = cost[list(perm), idx].sum()
        if c < best_cost:
            best, best_cost = perm, c
    return tuple(best)


def assign_cells(G, Gstar, spec: ModelSpec, grid: QuadratureGrid) -> VoronoiAssignment:
    D = distance_matrix(G, Gstar, spec, grid)
    Ks = Gstar.K
    cells = {(h, k): [] for h in range(Gstar.H) for k in range(Ks)}
    kappa, owner = {}, {}
    # argmin returns the first minimizer, i.e. the lexicographically smallest (h, k)
    for j, t in enumerate(np.argmin(D, axis=1)):
        fit_hk = divmod(j, G.K)
        true_hk = divmod(int(t), Ks)
        cells[true_hk].append(fit_hk)
        owner[fit_hk] = true_hk
        kappa[fit_hk] = match_experts(G, Gstar, fit_hk, true_hk)
    return VoronoiAssignment({c: tuple(m) for c, m in cells.items()}, kappa, D, owner)


def _discrepancy(G, Gstar, fit_hk, true_hk, perm, r: float) -> float:
    (hf, kf), (ht, kt) = fit_hk, true_hk
    total = 0.0
    for i, j in enumerate(perm):
        dM = np.linalg.norm(G.M[hf, j] - Gstar.M[ht, i])
        da = np.linalg.norm(G.a[hf, j, kf] - Gstar.a[ht, i, kt])
        total += dM**r + da**r
    return total


def _loss(G, Gstar, assignment: VoronoiAssignment, power) -> float:
    weight_term = 0.0
    expert_term = 0.0
    for true_hk, members in assignment.cells.items():
        w = sum(G.omega[m] for m in members)
        weight_term += abs(w - Gstar.omega[true_hk])
        r = power(len(members))
        for m in members:
            expert_term += G.omega[m] * _discrepancy(G, Gstar, m, true_hk, assignment.kappa[m], r)
    return float(weight_term + expert_term)


def loss_L1(G, Gstar, r: float, spec: ModelSpec, grid: QuadratureGrid, assignment=None) -> float:
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    assignment = assignment or assign_cells(G, Gstar, spec, grid)
    return _loss(G, Gstar, assignment, lambda size: r)


def loss_L2(G, Gstar, spec: ModelSpec, grid: QuadratureGrid, assignment=None) -> float:
    """First powers on singleton cells, squares on cells holding several components."""
    assignment = assignment or assign_cells(G, Gstar, spec, grid)
    return _loss(G, Gstar, assignment, lambda size: 1 if size == 1 else 2)


def adversarial_sequence(Gstar: MixingMeasure, n: int, r: float) -> MixingMeasure:
    """Split the first channel of every head into two copies pushed apart by 2/n along e1.

    The copies carry half the true weight plus ``1/(2 n^(r+1))`` each; the
    remaining channels are shifted up by one.  Gating matrices are unchanged.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    H, N, Ks, d = Gstar.H, Gstar.N, Gstar.K, Gstar.d
    omega = np.empty((H, Ks + 1))
    omega[:, :2] = (0.5 * Gstar.omega[:, :1]) + 0.5 / n ** (r + 1)
    omega[:, 2:] = Gstar.omega[:, 1:]
    a = np.empty((H, N, Ks + 1, d))
    e1 = np.zeros(d)
    e1[0] = 1.0 / n
    a[:, :, 0] = Gstar.a[:, :, 0] + e1
    a[:, :, 1] = Gstar.a[:, :, 0] - e1
    a[:, :, 2:] = Gstar.a[:, :, 1:]
    return MixingMeasure(omega, Gstar.M.copy(), a)
