"""Meyer-Zheng distance for right-continuous step paths.

``d_MZ(f, g) = int_0^T min(1, |f - g|) dt + |f(T) - g(T)|``

A path is stored by its breakpoints in ``[0, T)``, the value on each
segment, and a separate terminal value ``f(T)``; the path may jump at ``T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .market import GbmSpec, ScenarioTree, build_binomial
from .utility import UtilitySpec
from .wealth import FrictionParams, GridStrategy, _cumulate

__all__ = [
    "MzPath",
    "MzEstimate",
    "d_mz",
    "path_from_strategy",
    "strategy_distance",
    "coupled_leaf_paths",
    "lattice_ids",
    "coupled_mz_distance",
]


@dataclass(frozen=True, eq=False)
class MzPath:
    T: float
    breakpoints: np.ndarray
    values: np.ndarray
    terminal: float

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if len(bp) == 0 or bp[0] != 0.0:
            raise ValueError("first breakpoint must be 0")
        if len(bp) != len(vals):
            raise ValueError("one value per breakpoint is required")
        if np.any(np.diff(bp) <= 0) or bp[-1] >= self.T:
            raise ValueError("breakpoints must be strictly increasing in [0, T)")

    @classmethod
    def constant(cls, T: float, value: float) -> "MzPath":
        return cls(T, np.zeros(1), np.array([value]), value)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        i = np.searchsorted(self.breakpoints, t, side="right") - 1
        out = self.values[np.clip(i, 0, None)]
        return np.where(t >= self.T, self.terminal, out)

    def with_breakpoints(self, extra) -> "MzPath":
        """Same function with redundant breakpoints inserted."""
        extra = np.asarray(extra, dtype=float)
        bp = np.union1d(self.breakpoints, extra[(extra >= 0) & (extra < self.T)])
        return MzPath(self.T, bp, self(bp), self.terminal)


def d_mz(f: MzPath, g: MzPath) -> float:
    if f.T != g.T:
        raise ValueError(f"horizon mismatch: {f.T} vs {g.T}")
    bp = np.union1d(f.breakpoints, g.breakpoints)
    fv, gv = f(bp), g(bp)
    # canonical partition: redundant breakpoints must not change the rounding
    keep = np.ones(len(bp), dtype=bool)
    keep[1:] = (fv[1:] != fv[:-1]) | (gv[1:] != gv[:-1])
    bp, fv, gv = bp[keep], fv[keep], gv[keep]
    seg = np.diff(np.append(bp, f.T))
    integrand = np.minimum(1.0, np.abs(fv - gv))
    return float(np.sum(seg * integrand) + abs(f.terminal - g.terminal))


def path_from_strategy(tree: ScenarioTree, strategy: GridStrategy, leaf: int) -> MzPath:
    if len(tree.children[leaf]) != 0:
        raise ValueError(f"node {leaf} is not a leaf")
    nodes = tree.path_to(leaf)
    bp = tree.dt * np.arange(tree.n_steps)
    return MzPath(tree.T, bp, strategy.gamma[nodes[:-1]], float(strategy.gamma[leaf]))


def strategy_distance(tree: ScenarioTree, gamma_a, gamma_b) -> float:
    """Expected Meyer-Zheng distance between two node-indexed strategies."""
    ga = np.asarray(getattr(gamma_a, "gamma", gamma_a), dtype=float)
    gb = np.asarray(getattr(gamma_b, "gamma", gamma_b), dtype=float)
    diff = np.abs(ga - gb)
    internal = tree.time_index < tree.n_steps
    term = np.where(internal, tree.dt * np.minimum(1.0, diff), diff)
    cum = _cumulate(tree, term)
    leaves = tree.leaves
    return float(np.dot(tree.node_prob[leaves], cum[leaves]))


@dataclass(frozen=True)
class MzEstimate:
    mean: float
    stderr: float
    n: int
    seeds: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n, "seeds": self.seeds}


def lattice_ids(downs: np.ndarray) -> np.ndarray:
    """Node ids of recombining binomial paths from cumulative down counts."""
    k = np.arange(downs.shape[1])
    return k * (k + 1) // 2 + downs


def coupled_leaf_paths(n: int, p_coarse: float, p_fine: float, z: np.ndarray):
    """Couple paths of the n-step and 2n-step binomial lattices.

    ``z`` holds standard normal increments of shape ``(m, 2n)``.  A fine
    step goes up when its increment exceeds ``ndtri(1 - p_fine)``; a coarse
    step goes up when the normalized sum of its pair of increments exceeds
    ``ndtri(1 - p_coarse)`` (an exact tie is decided by the second
    increment).  Each lattice therefore sees its own up-probability.
    Returns node-id arrays of shapes ``(m, n+1)`` and ``(m, 2n+1)``.
    """
    m = z.shape[0]
    th_f = ndtri(1.0 - p_fine)
    th_c = ndtri(1.0 - p_coarse)
    fine_up = z > th_f
    pair = (z[:, 0::2] + z[:, 1::2]) / np.sqrt(2.0)
    coarse_up = np.where(pair == th_c, z[:, 1::2] > th_f, pair > th_c)
    zero = np.zeros((m, 1), dtype=int)
    d_f = np.hstack([zero, np.cumsum(~fine_up, axis=1)])
    d_c = np.hstack([zero, np.cumsum(~coarse_up, axis=1)])
    return lattice_ids(d_c), lattice_ids(d_f)


def _paths_mz(T: float, g_coarse: np.ndarray, g_fine: np.ndarray) -> np.ndarray:
    """Row-wise d_MZ between holdings sampled on grids of n and 2n steps."""
    n = g_coarse.shape[1] - 1
    # coarse holdings on the fine grid: each coarse interval spans two fine ones
    gc = np.repeat(g_coarse[:, :-1], 2, axis=1)
    dt = T / (2 * n)
    integral = dt * np.minimum(1.0, np.abs(gc - g_fine[:, :-1])).sum(axis=1)
    return integral + np.abs(g_coarse[:, -1] - g_fine[:, -1])


def coupled_mz_distance(
    spec: GbmSpec,
    utility: UtilitySpec,
    x: float,
    params: FrictionParams,
    n: int,
    seeds: int,
    grid=None,
    seed: int = 0,
    solutions=None,
    suboptimality: float = 0.0,
    return_samples: bool = False,
):
    """Mean and standard error of ``d_MZ(gamma^n, gamma^2n)`` over coupled paths.

    Both levels are solved on recombining lattices (or taken from
    ``solutions``) and their optimal holdings are followed along paths
    driven by the same Gaussian increments.  Sample ``i`` uses the
    generator ``default_rng([seed, i])``, so results do not depend on how
    samples are batched.
    """
    from .dp import simulate_paths, solve, widen_policy

    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if seeds < 2:
        raise ValueError("at least two seeds are needed for a standard error")
    if solutions is None:
        trees = [build_binomial(spec, n, recombine=True), build_binomial(spec, 2 * n, recombine=True)]
        solutions = [solve(t, utility, x, params, grid) for t in trees]
    sol_c, sol_f = solutions
    if suboptimality:
        sol_c, sol_f = widen_policy(sol_c, suboptimality), widen_policy(sol_f, suboptimality)
    z = np.vstack([np.random.default_rng([seed, i]).standard_normal(2 * n) for i in range(seeds)])
    paths_c, paths_f = coupled_leaf_paths(n, sol_c.tree.meta["p"], sol_f.tree.meta["p"], z)
    g_c = simulate_paths(sol_c, paths_c, x)
    g_f = simulate_paths(sol_f, paths_f, x)
    d = _paths_mz(spec.T, g_c, g_f)
    est = MzEstimate(float(d.mean()), float(d.std(ddof=1) / np.sqrt(seeds)), n, seeds)
    if return_samples:
        return est, d
    return est
