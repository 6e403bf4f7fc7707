"""Consistent price systems on finite trees.

A consistent price system for an effective cost rate ``kappa_eff`` is a
process ``M`` with ``|M - S| <= kappa_eff * S`` at every node which is a
martingale under some measure ``Q`` equivalent to the tree measure.  On a
finite tree equivalence is enforced quantitatively: every conditional
probability of ``Q`` is at least ``q_min``.

Feasibility is decided by propagating intervals backwards: a node's
feasible values are its own band intersected with the values reachable as
``sum q_c m_c`` with ``q_c >= q_min`` and ``m_c`` feasible for child ``c``.

With ``q_min > 0`` fixed, the density of the tree measure with respect to
``Q`` is bounded by ``(1/q_min)**n_steps``, so contiguity along a
refinement family is not an issue on any single tree and is not checked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import ScenarioTree

__all__ = [
    "CpsBand",
    "CpsSystem",
    "MartingaleReport",
    "CpsConstructionError",
    "propagate_bands",
    "extract_cps",
    "verify_martingale",
    "lp_feasible",
    "grid_feasible",
    "critical_kappa",
    "binomial_threshold",
    "Q_MIN",
]

Q_MIN = 1e-6


class CpsConstructionError(RuntimeError):
    """Bands were reported feasible but no weights could be constructed."""


@dataclass(frozen=True, eq=False)
class CpsBand:
    kappa_eff: float
    q_min: float
    raw_lo: np.ndarray
    raw_hi: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    feasible: bool
    witness: int | None

    @property
    def empty(self) -> np.ndarray:
        return self.lo > self.hi


def _reach(lo: np.ndarray, hi: np.ndarray, q_min: float) -> tuple[float, float]:
    """Range of ``sum q_c m_c`` over ``q_c >= q_min``, ``sum q = 1``, ``m_c in [lo_c, hi_c]``."""
    k = len(lo)
    free = 1.0 - k * q_min
    return q_min * lo.sum() + free * lo.min(), q_min * hi.sum() + free * hi.max()


def propagate_bands(tree: ScenarioTree, kappa_eff: float, q_min: float = Q_MIN) -> CpsBand:
    """Backward interval propagation of the feasible martingale values.

    Infeasibility is a result: ``feasible`` is False and ``witness`` is the
    earliest node whose own children are all feasible while it is not, i.e.
    where the price is forced to drift out of the band.
    """
    if not 0.0 <= kappa_eff <= 1.0:
        raise ValueError(f"kappa_eff must lie in [0, 1], got {kappa_eff}")
    if not 0.0 <= q_min * max(len(c) for c in tree.children) <= 1.0:
        raise ValueError("q_min too large for the branching factor")
    S = tree.S
    raw_lo = (1.0 - kappa_eff) * S
    raw_hi = (1.0 + kappa_eff) * S
    lo = raw_lo.copy()
    hi = raw_hi.copy()
    origin = np.zeros(tree.n_nodes, dtype=bool)
    for layer in reversed(tree.layers[:-1]):
        for v in layer:
            ch = tree.children[v]
            if np.any(lo[ch] > hi[ch]):
                lo[v], hi[v] = np.inf, -np.inf
                continue
            a, b = _reach(lo[ch], hi[ch], q_min)
            lo[v] = max(raw_lo[v], a)
            hi[v] = min(raw_hi[v], b)
            origin[v] = lo[v] > hi[v]
    witness = None
    if lo[0] > hi[0]:
        cand = np.flatnonzero(origin)
        witness = int(cand[np.lexsort((cand, tree.time_index[cand]))[0]])
    return CpsBand(kappa_eff, q_min, raw_lo, raw_hi, lo, hi, witness is None, witness)


@dataclass(frozen=True, eq=False)
class CpsSystem:
    M: np.ndarray
    q: tuple
    kappa_eff: float
    q_min: float

    def to_dict(self) -> dict:
        return {
            "kappa_eff": self.kappa_eff,
            "q_min": self.q_min,
            "M": [float(m) for m in self.M],
            "Q": {str(v): [float(p) for p in qs] for v, qs in enumerate(self.q) if len(qs)},
        }


def _weights(m_lo: np.ndarray, m_hi: np.ndarray, M: float, q_min: float):
    """Weights ``q >= q_min`` and child values with ``sum q m = M``.

    Mixes the weight vectors attaining the lowest and highest reachable
    values, then places every child at the same relative position in its
    interval.  Returns None when ``M`` is not reachable.
    """
    k = len(m_lo)
    L, H = _reach(m_lo, m_hi, q_min)
    tol = 1e-12 * max(1.0, abs(M))
    if M < L - tol or M > H + tol:
        return None
    if H - L <= tol:
        return np.full(k, 1.0 / k), m_lo.copy()
    qL = np.full(k, q_min)
    qL[np.argmin(m_lo)] += 1.0 - k * q_min
    qH = np.full(k, q_min)
    qH[np.argmax(m_hi)] += 1.0 - k * q_min
    t = min(max((M - L) / (H - L), 0.0), 1.0)
    q = (1.0 - t) * qL + t * qH
    base = np.dot(q, m_lo)
    span = np.dot(q, m_hi - m_lo)
    theta = 0.0 if span <= 0 else min(max((M - base) / span, 0.0), 1.0)
    return q, m_lo + theta * (m_hi - m_lo)


def extract_cps(tree: ScenarioTree, bands: CpsBand, anchor: str = "mid") -> CpsSystem:
    """Construct ``(M, Q)`` inside feasible bands.

    ``anchor="mid"`` starts from the midpoint of the root interval and lets
    children follow the construction of :func:`_weights`.  ``anchor="price"``
    tries to keep ``M = S`` wherever the bands allow it (on a binomial tree
    this recovers the risk-neutral weights).  On recombining lattices ``M``
    must be a function of the node, so node-local values are used and only
    the weights are solved for.
    """
    if not bands.feasible:
        raise ValueError("bands are infeasible; no consistent price system exists")
    if anchor not in ("mid", "price"):
        raise ValueError(f"unknown anchor {anchor!r}")
    q_min = bands.q_min
    lo, hi = bands.lo, bands.hi
    S = tree.S
    n = tree.n_nodes
    M = np.full(n, np.nan)
    q = [np.zeros(0)] * n

    def local(v):
        return min(max(S[v], lo[v]), hi[v]) if anchor == "price" else 0.5 * (lo[v] + hi[v])

    if tree.recombining:
        for v in range(n):
            M[v] = local(v)
        for v in range(n):
            ch = tree.children[v]
            if len(ch) == 0:
                continue
            w = _weights(M[ch], M[ch], M[v], q_min)
            if w is None:
                raise CpsConstructionError(f"node-local martingale values fail at node {v}")
            q[v] = w[0]
        return CpsSystem(M, tuple(q), bands.kappa_eff, q_min)

    M[0] = local(0)
    for layer in tree.layers[:-1]:
        for v in layer:
            ch = tree.children[v]
            w = None
            if anchor == "price":
                m_fix = np.clip(S[ch], lo[ch], hi[ch])
                w = _weights(m_fix, m_fix, M[v], q_min)
            if w is None:
                w = _weights(lo[ch], hi[ch], M[v], q_min)
            if w is None:
                raise CpsConstructionError(f"weights cannot be constructed at node {v}")
            q[v], M[ch] = w
    return CpsSystem(M, tuple(q), bands.kappa_eff, q_min)


@dataclass(frozen=True)
class MartingaleReport:
    max_residual: float
    max_band_violation: float
    min_q: float
    max_prob_error: float

    def ok(self, tol: float, q_min: float = 0.0) -> bool:
        return (
            self.max_residual <= tol
            and self.max_band_violation <= tol
            and self.min_q >= q_min * (1.0 - 1e-9)
            and self.max_prob_error <= 1e-12
        )

    def to_dict(self) -> dict:
        return {
            "max_residual": self.max_residual,
            "max_band_violation": self.max_band_violation,
            "min_q": self.min_q,
            "max_prob_error": self.max_prob_error,
        }


def verify_martingale(tree: ScenarioTree, system: CpsSystem, kappa_eff: float) -> MartingaleReport:
    S = tree.S
    M = system.M
    res = 0.0
    min_q = np.inf
    perr = 0.0
    for v in range(tree.n_nodes):
        ch = tree.children[v]
        if len(ch) == 0:
            continue
        qv = system.q[v]
        res = max(res, abs(M[v] - float(np.dot(qv, M[ch]))))
        min_q = min(min_q, float(qv.min()))
        perr = max(perr, abs(qv.sum() - 1.0))
    viol = np.maximum(0.0, np.maximum((1.0 - kappa_eff) * S - M, M - (1.0 + kappa_eff) * S))
    return MartingaleReport(float(res), float(viol.max()), float(min_q), float(perr))


def lp_feasible(tree: ScenarioTree, kappa_eff: float, q_min: float = Q_MIN) -> bool | None:
    """Independent feasibility check as one linear program.

    Unknowns are the unconditional ``Q``-mass of every node and the product
    ``Z = mass * M``; martingale, band and ``q >= q_min`` constraints are
    all linear in these.  The smallest node mass is maximized to keep the
    solution well conditioned, and a reported solution is only accepted if
    the recovered conditional system passes :func:`verify_martingale`.
    Returns None when the solver cannot decide, which happens close to the
    feasibility boundary where node masses fall to ``q_min**depth``.
    """
    from scipy.optimize import linprog
    from scipy.sparse import lil_matrix

    n = tree.n_nodes
    S = tree.S / tree.S[0]
    nv = 2 * n + 1  # masses, products, min-mass slack
    t_idx = 2 * n
    eq_rows, ub_rows = [], []
    for v in range(n):
        ch = tree.children[v]
        if len(ch) == 0:
            continue
        eq_rows.append(([v] + list(ch), [-1.0] + [1.0] * len(ch)))
        eq_rows.append(([n + v] + [n + c for c in ch], [-1.0] + [1.0] * len(ch)))
        for c in ch:
            ub_rows.append(([v, c], [q_min, -1.0]))
    for v in range(n):
        ub_rows.append(([v, n + v], [(1.0 - kappa_eff) * S[v], -1.0]))
        ub_rows.append(([n + v, v], [1.0, -(1.0 + kappa_eff) * S[v]]))
    for v in tree.leaves:
        ub_rows.append(([t_idx, int(v)], [1.0, -1.0]))

    def build(rows):
        A = lil_matrix((len(rows), nv))
        for i, (cols, vals) in enumerate(rows):
            for c, val in zip(cols, vals):
                A[i, c] += val
        return A.tocsr()

    A_eq = build(eq_rows + [([0], [1.0])])
    b_eq = np.zeros(A_eq.shape[0])
    b_eq[-1] = 1.0
    A_ub = build(ub_rows)
    b_ub = np.zeros(A_ub.shape[0])
    cost = np.zeros(nv)
    cost[t_idx] = -1.0
    bounds = [(0, None)] * n + [(None, None)] * n + [(0, 1)]
    for method in ("highs-ds", "highs-ipm"):
        res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method=method)
        if res.status in (0, 2):
            break
    if res.status == 2:
        return False
    if res.status != 0:
        # extreme weights near the feasibility boundary defeat the solver
        return None
    mass = res.x[:n]
    if np.any(mass <= 0):
        return False
    M = res.x[n : 2 * n] / mass
    q = tuple(
        mass[tree.children[v]] / mass[v] if len(tree.children[v]) else np.zeros(0) for v in range(n)
    )
    report = verify_martingale(tree, CpsSystem(M * tree.S[0], q, kappa_eff, q_min), kappa_eff)
    return report.ok(1e-7 * tree.S[0], q_min * (1.0 - 1e-6))


def grid_feasible(
    tree: ScenarioTree, kappa_eff: float, q_min: float = Q_MIN, n_grid: int = 50
) -> bool:
    """Brute-force feasibility with every ``M`` restricted to a grid.

    Each node's band is cut into ``n_grid`` equally spaced candidate values.
    A candidate is kept when some choice of kept candidates at the children
    reaches it with weights ``q >= q_min``; for fixed child values the
    reachable set is an interval, so this is exhaustive over child choices.
    Restricting ``M`` to a grid can only lose feasibility, so this check
    errs towards "infeasible" within one grid spacing of the boundary.
    """
    S = tree.S
    n = tree.n_nodes
    cand: list = [None] * n
    for layer in reversed(tree.layers):
        for v in layer:
            pts = np.linspace((1.0 - kappa_eff) * S[v], (1.0 + kappa_eff) * S[v], n_grid)
            ch = tree.children[v]
            if len(ch) == 0:
                cand[v] = pts
                continue
            sets = [cand[c] for c in ch]
            if any(len(f) == 0 for f in sets):
                cand[v] = pts[:0]
                continue
            combos = np.stack([g.ravel() for g in np.meshgrid(*sets, indexing="ij")])
            k = len(ch)
            tot = combos.sum(axis=0)
            lo = q_min * tot + (1.0 - k * q_min) * combos.min(axis=0)
            hi = q_min * tot + (1.0 - k * q_min) * combos.max(axis=0)
            order = np.argsort(lo)
            lo, hi = lo[order], np.maximum.accumulate(hi[order])
            tol = 1e-12 * S[v]
            j = np.searchsorted(lo, pts + tol, side="right") - 1
            keep = (j >= 0) & (hi[np.clip(j, 0, None)] >= pts - tol)
            cand[v] = pts[keep]
    return len(cand[0]) > 0


def critical_kappa(tree: ScenarioTree, q_min: float = Q_MIN, tol: float = 1e-10) -> float:
    """Smallest effective cost rate with a consistent price system (bisection)."""
    if propagate_bands(tree, 0.0, q_min).feasible:
        return 0.0
    a, b = 0.0, 1.0
    if not propagate_bands(tree, b, q_min).feasible:
        return float("inf")
    while b - a > tol:
        m = 0.5 * (a + b)
        if propagate_bands(tree, m, q_min).feasible:
            b = m
        else:
            a = m
    return b


def binomial_threshold(spec, kappa_eff: float, n_max: int = 64, q_min: float = Q_MIN) -> dict:
    """Smallest step count from which binomial lattices stay feasible up to ``n_max``."""
    from .market import build_binomial

    feas = {
        n: propagate_bands(build_binomial(spec, n, recombine=True), kappa_eff, q_min).feasible
        for n in range(1, n_max + 1)
    }
    threshold = None
    for n in range(n_max, 0, -1):
        if not feas[n]:
            break
        threshold = n
    return {"kappa_eff": kappa_eff, "threshold": threshold, "n_max": n_max, "feasible": feas}
