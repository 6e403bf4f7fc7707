"""Backward induction for CRRA utility under proportional costs.

State reduction
---------------
With cash ``b`` and ``gamma`` shares at price ``S`` the liquidation wealth is
``w = b + S*gamma - kappa*S*|gamma|`` and the stock fraction is
``pi = S*gamma / w``.  CRRA homogeneity gives

* power: ``J(node, b, gamma) = w**p * h(node, pi)`` with ``h(leaf) = 1/p``;
* log:   ``J(node, b, gamma) = log(w) + h(node, pi)`` with ``h(leaf) = 0``.

Buying keeps ``b + (1+kappa) S gamma`` fixed and selling keeps
``b + (1-kappa) S gamma`` fixed, so the post-trade wealth factor splits into a
function of the start fraction times a function of the target fraction.  The
buy target is therefore independent of where the trade starts, and each
node has a no-trade interval ``[pi_buy, pi_sell]``:

* ``pi < pi_buy``: buy up to ``pi_buy``;
* ``pi > pi_sell``: sell down to ``pi_sell``;
* otherwise hold, and ``h = G`` where ``G`` is the continuation value of
  holding the post-trade fraction into the next period.

Both boundaries are found by golden-section search on the direct ``G``
(evaluated from the children's tables).  ``G`` is then tabulated on the
no-trade interval by piecewise cubic splines whose pieces are cut at ``0``
and at the fractions that map onto the children's boundaries, where ``G``
loses smoothness.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, PPoly

from .market import ScenarioTree
from .utility import UtilitySpec
from .wealth import FrictionParams, GridStrategy, liquidation_value, is_admissible

__all__ = [
    "GridSpec",
    "DpSolution",
    "GridTooCoarse",
    "ForwardPass",
    "ShadowPrices",
    "solve",
    "extract_strategy",
    "extract_shadow_price",
    "forward_pass",
    "simulate_path",
    "simulate_paths",
    "path_shadow_prices",
    "widen_policy",
    "expected_utility",
]

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class GridTooCoarse(RuntimeError):
    """Raised when the tabulation is not fine enough for a consistent policy."""


@dataclass(frozen=True)
class GridSpec:
    """Numerical settings of the solver.

    ``n_points`` knots tabulate the continuation value on each node's
    no-trade interval; ``[pi_min, pi_max]`` bounds the post-trade stock
    fraction searched by the optimizer.
    """

    n_points: int = 65
    pi_min: float = -0.5
    pi_max: float = 3.0
    tol: float = 1e-10
    max_breaks: int = 16
    prescan: int = 129

    def __post_init__(self):
        if self.n_points < 33:
            raise ValueError(f"n_points must be >= 33, got {self.n_points}")
        if not self.pi_min <= 0.0 <= self.pi_max or self.pi_min >= self.pi_max:
            raise ValueError("position range must contain 0")
        if self.prescan < 8:
            raise ValueError("prescan must be >= 8")


def _a_buy(pi, k):
    return 1.0 + k * pi + k * np.abs(pi)


def _a_sell(pi, k):
    return 1.0 - k * pi + k * np.abs(pi)


def _golden_max(f, a: float, b: float, tol: float) -> float:
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


@dataclass(eq=False)
class DpSolution:
    tree: ScenarioTree
    utility: UtilitySpec
    x: float
    kappa: float
    grid: GridSpec
    pi_buy: np.ndarray
    pi_sell: np.ndarray
    G_buy: np.ndarray
    G_sell: np.ndarray
    tables: list
    breaks: list
    value: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def leaf_h(self) -> float:
        return 0.0 if self.utility.is_log else 1.0 / self.utility.p

    def value_at(self, x: float) -> float:
        """Optimal expected utility from cash ``x`` and no shares."""
        h0 = float(self.h(0, np.zeros(1))[0])
        if self.utility.is_log:
            return math.log(x) + h0
        return x**self.utility.p * h0

    def no_trade_interval(self, v: int) -> tuple[float, float]:
        return float(self.pi_buy[v]), float(self.pi_sell[v])

    # -- value functions in reduced coordinates -------------------------

    def h(self, v: int, pi) -> np.ndarray:
        """Reduced value at node ``v`` before trading, stock fraction ``pi``."""
        pi = np.asarray(pi, dtype=float)
        if len(self.tree.children[v]) == 0:
            return np.full(pi.shape, self.leaf_h)
        k = self.kappa
        pb, ps = self.pi_buy[v], self.pi_sell[v]
        out = np.empty(pi.shape)
        buy = pi < pb
        sell = pi > ps
        mid = ~(buy | sell)
        if self.utility.is_log:
            if buy.any():
                out[buy] = np.log(_a_buy(pi[buy], k) / _a_buy(pb, k)) + self.G_buy[v]
            if sell.any():
                out[sell] = np.log(_a_sell(pi[sell], k) / _a_sell(ps, k)) + self.G_sell[v]
        else:
            p = self.utility.p
            if buy.any():
                out[buy] = (_a_buy(pi[buy], k) / _a_buy(pb, k)) ** p * self.G_buy[v]
            if sell.any():
                out[sell] = (_a_sell(pi[sell], k) / _a_sell(ps, k)) ** p * self.G_sell[v]
        if mid.any():
            tab = self.tables[v]
            if tab is None:
                out[mid] = self.G_buy[v] if ps <= pb else (
                    self.G_buy[v] + (pi[mid] - pb) * (self.G_sell[v] - self.G_buy[v]) / (ps - pb)
                )
            else:
                out[mid] = tab(pi[mid])
        return out

    def G(self, v: int, pi) -> np.ndarray:
        """Continuation value of holding post-trade fraction ``pi`` at ``v``."""
        pi = np.asarray(pi, dtype=float)
        k = self.kappa
        S = self.tree.S
        eff = pi - k * np.abs(pi)
        log = self.utility.is_log
        p = self.utility.p
        acc = np.zeros(pi.shape)
        bad = np.zeros(pi.shape, dtype=bool)
        for c, q in zip(self.tree.children[v], self.tree.probs[v]):
            R = S[c] / S[v]
            g = 1.0 + (R - 1.0) * eff
            bad |= g <= 0.0
            gs = np.where(g > 0.0, g, 1.0)
            hc = self.h(c, R * pi / gs)
            if log:
                acc += q * (np.log(gs) + hc)
            else:
                acc += q * gs**p * hc
        if bad.any():
            acc[bad] = -np.inf
        return acc

    def admissible_range(self, v: int) -> tuple[float, float]:
        """Post-trade fractions keeping every child's wealth positive."""
        k = self.kappa
        S = self.tree.S
        lo, hi = -np.inf, np.inf
        for c in self.tree.children[v]:
            R = S[c] / S[v]
            if R < 1.0:
                hi = min(hi, 1.0 / ((1.0 - R) * (1.0 - k)))
            elif R > 1.0:
                lo = max(lo, -1.0 / ((R - 1.0) * (1.0 + k)))
        lo = max(self.grid.pi_min, lo * (1.0 - 1e-9))
        hi = min(self.grid.pi_max, hi * (1.0 - 1e-9))
        return lo, hi

    def shadow_ratio(self, v: int, pi: float, gamma_sign: float | None = None, side: int = 0) -> float:
        """Shadow price divided by ``S`` at post-trade fraction ``pi``.

        Marginal rate of substitution between shares and cash, from central
        differences of the continuation value.  At ``pi == 0`` the value has
        a kink; the one-sided rates bracket the admissible shadow prices and
        the one closest to the traded price (ask after a purchase, bid after
        a sale, ``S`` without a trade) is returned.
        """
        if len(self.tree.children[v]) == 0:
            s = 0.0 if gamma_sign is None else float(np.sign(gamma_sign))
            return 1.0 - self.kappa * s
        return float(self.shadow_ratios(v, np.array([pi]), np.array([side]))[0])

    def shadow_ratios(self, v: int, pi, side) -> np.ndarray:
        """Vectorized :meth:`shadow_ratio` over states of one non-terminal node."""
        pi = np.asarray(pi, dtype=float)
        side = np.asarray(side, dtype=float)
        k = self.kappa
        e = 1e-6 * np.maximum(1.0, np.abs(pi))
        g0, gm, gp = self.G(v, np.concatenate([pi, pi - e, pi + e])).reshape(3, -1)
        P = np.ones_like(pi) if self.utility.is_log else self.utility.p * g0

        def ratio(dG, s):
            return (P * (1.0 - k * s) + dG * (1.0 - pi * (1.0 - k * s))) / (P - pi * dG)

        out = ratio((gp - gm) / (2.0 * e), np.sign(pi))
        kink = pi == 0.0
        if kink.any():
            r_long = ratio((gp - g0) / e, 1.0)[kink]
            r_short = ratio((g0 - gm) / e, -1.0)[kink]
            lo = np.maximum(np.minimum(r_long, r_short), 1.0 - k)
            hi = np.minimum(np.maximum(r_long, r_short), 1.0 + k)
            pick = np.minimum(np.maximum(1.0 + k * side[kink], lo), hi)
            out[kink] = np.where(lo > hi, 0.5 * (r_long + r_short), pick)
        return out


class _NodeSolver:
    def __init__(self, sol: DpSolution):
        self.sol = sol
        self.k = sol.kappa
        self.log = sol.utility.is_log
        self.p = sol.utility.p

    def objective(self, v: int, side: int):
        k, log, p = self.k, self.log, self.p
        a = _a_buy if side > 0 else _a_sell
        G = self.sol.G

        def f(pi):
            pi = np.asarray(pi, dtype=float)
            g = G(v, pi)
            if log:
                return g - np.log(a(pi, k))
            return g * a(pi, k) ** (-p)

        return f

    def argmax(self, v: int, side: int, lo: float, hi: float) -> float:
        grid = self.sol.grid
        f = self.objective(v, side)
        xs = np.linspace(lo, hi, grid.prescan)
        if lo < 0.0 < hi:
            xs = np.sort(np.append(xs, 0.0))
        fx = f(xs)
        # ties toward less trading: leftmost argmax when buying, rightmost when selling
        i = int(np.argmax(fx)) if side > 0 else len(fx) - 1 - int(np.argmax(fx[::-1]))
        a = xs[max(i - 1, 0)]
        b = xs[min(i + 1, len(xs) - 1)]
        fs = lambda t: float(f(np.array([t]))[0])  # noqa: E731
        best = _golden_max(fs, a, b, grid.tol)
        cands = [best, xs[i]]
        if a <= 0.0 <= b:
            cands.append(0.0)
        vals = [fs(c) for c in cands]
        j = int(np.argmax(vals))
        if a <= 0.0 <= b and vals[2] >= vals[j] - 1e-15 * max(1.0, abs(vals[j])):
            j = 2
        return float(cands[j])

    def map_to_parent(self, v: int, c: int, beta: np.ndarray) -> np.ndarray:
        """Parent fractions whose holding lands on child fraction ``beta``."""
        k = self.k
        R = self.sol.tree.S[c] / self.sol.tree.S[v]
        s = np.sign(beta)
        den = R - beta * (R - 1.0) * (1.0 - k * s)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(den > 0, beta / den, np.nan)
        return out[np.isfinite(out)]

    def tabulate(self, v: int):
        sol = self.sol
        grid = sol.grid
        pb, ps = sol.pi_buy[v], sol.pi_sell[v]
        W = ps - pb
        if W <= 1e-9:
            return None, np.zeros(0)
        cand = [np.array([0.0])]
        deep = []
        for c in sol.tree.children[v]:
            if len(sol.tree.children[c]) == 0:
                continue
            cand.append(self.map_to_parent(v, c, np.array([sol.pi_buy[c], sol.pi_sell[c], 0.0])))
            deep.append(self.map_to_parent(v, c, sol.breaks[c]))
        sep = max(1e-9, 1e-6 * W)
        kept: list[float] = []
        for arr in cand + deep:
            for b in arr:
                if len(kept) >= grid.max_breaks:
                    break
                if pb + sep < b < ps - sep and all(abs(b - q) > sep for q in kept):
                    kept.append(float(b))
        kept.sort()
        edges = np.array([pb, *kept, ps])
        knots = []
        for a, b in zip(edges[:-1], edges[1:]):
            m = max(4, int(math.ceil(grid.n_points * (b - a) / W)) + 1)
            knots.append(np.linspace(a, b, m))
        allx = np.concatenate(knots)
        ally = sol.G(v, allx)
        if not np.all(np.isfinite(ally)):
            raise GridTooCoarse(f"non-finite continuation value on the no-trade interval of node {v}")
        xs, cs = [knots[0][:1]], []
        off = 0
        for kn in knots:
            y = ally[off : off + len(kn)]
            off += len(kn)
            cs.append(CubicSpline(kn, y).c)
            xs.append(kn[1:])
        return PPoly(np.hstack(cs), np.concatenate(xs)), np.array(kept)

    def solve_node(self, v: int, policy=None):
        sol = self.sol
        lo, hi = sol.admissible_range(v)
        if not lo < hi:
            raise GridTooCoarse(f"empty admissible position range at node {v}")
        if policy is None:
            pb = self.argmax(v, +1, lo, hi)
            ps = self.argmax(v, -1, lo, hi)
        else:
            pb = min(max(float(policy[0][v]), lo), hi)
            ps = min(max(float(policy[1][v]), lo), hi)
        if pb > ps:
            if pb - ps > 1e-7:
                raise GridTooCoarse(
                    f"non-monotone no-trade boundaries at node {v}: buy {pb:.6g} > sell {ps:.6g}"
                )
            pb = ps = 0.5 * (pb + ps)
        sol.pi_buy[v], sol.pi_sell[v] = pb, ps
        gb, gs = sol.G(v, np.array([pb, ps]))
        sol.G_buy[v], sol.G_sell[v] = gb, gs
        sol.tables[v], sol.breaks[v] = self.tabulate(v)


def solve(
    tree: ScenarioTree,
    utility: UtilitySpec,
    x: float,
    params: FrictionParams,
    grid: GridSpec | None = None,
    policy=None,
) -> DpSolution:
    """Optimal expected utility of terminal liquidation wealth on ``tree``.

    Works on explicit trees and recombining lattices.  The returned
    solution holds the per-node no-trade intervals and the tabulated
    continuation values; ``solution.value`` is the optimum from cash ``x``.

    Passing ``policy=(pi_buy, pi_sell)`` skips the optimization and
    evaluates that fixed no-trade-interval policy instead.
    """
    if not x > 0:
        raise ValueError(f"initial capital must be positive, got {x}")
    grid = grid or GridSpec()
    n = tree.n_nodes
    sol = DpSolution(
        tree=tree,
        utility=utility,
        x=float(x),
        kappa=params.kappa,
        grid=grid,
        pi_buy=np.full(n, np.nan),
        pi_sell=np.full(n, np.nan),
        G_buy=np.full(n, np.nan),
        G_sell=np.full(n, np.nan),
        tables=[None] * n,
        breaks=[np.zeros(0)] * n,
    )
    ns = _NodeSolver(sol)
    for layer in reversed(tree.layers[:-1]):
        for v in layer:
            ns.solve_node(int(v), policy)
    sol.value = sol.value_at(x)
    if not math.isfinite(sol.value):
        raise GridTooCoarse("optimal value is not finite")
    return sol


@dataclass(frozen=True, eq=False)
class ForwardPass:
    gamma_pre: np.ndarray
    gamma: np.ndarray
    cash: np.ndarray
    wealth: np.ndarray
    pi: np.ndarray
    side: np.ndarray


def _trade(sol: DpSolution, v, S, b, g):
    """Apply the no-trade rule of node(s) ``v``; vectorized over arrays."""
    k = sol.kappa
    w = b + S * g - k * S * np.abs(g)
    pi = S * g / w
    pb, ps = sol.pi_buy[v], sol.pi_sell[v]
    buy = pi < pb
    sell = pi > ps
    target = np.where(buy, pb, np.where(sell, ps, pi))
    factor = np.where(
        buy, _a_buy(pi, k) / _a_buy(pb, k), np.where(sell, _a_sell(pi, k) / _a_sell(ps, k), 1.0)
    )
    w2 = w * factor
    g2 = np.where(buy | sell, target * w2 / S, g)
    dg = g2 - g
    b2 = b - S * dg - k * S * np.abs(dg)
    side = np.where(buy, 1, np.where(sell, -1, 0))
    return g2, b2, w2, target, side


def forward_pass(solution: DpSolution, tree: ScenarioTree, x: float) -> ForwardPass:
    """Realize the optimal policy on every node of an explicit tree."""
    tree._require_explicit("forward_pass")
    if tree is not solution.tree and tree.n_nodes != solution.tree.n_nodes:
        raise ValueError("solution was computed on a different tree")
    n = tree.n_nodes
    k = solution.kappa
    S = tree.S
    g_pre = np.zeros(n)
    b_pre = np.zeros(n)
    g_post = np.zeros(n)
    b_post = np.zeros(n)
    w_post = np.zeros(n)
    pi_post = np.zeros(n)
    side = np.zeros(n, dtype=int)
    b_pre[0] = x
    for layer in tree.layers:
        if layer[0] != 0:
            par = tree.parent[layer]
            g_pre[layer] = g_post[par]
            b_pre[layer] = b_post[par]
        if len(tree.children[layer[0]]) == 0:
            g = g_pre[layer]
            b_post[layer] = b_pre[layer] + (1.0 - k) * S[layer] * np.maximum(g, 0) - (
                1.0 + k
            ) * S[layer] * np.maximum(-g, 0)
            w_post[layer] = b_post[layer]
            side[layer] = -np.sign(g).astype(int)
            continue
        g2, b2, w2, pi2, sd = _trade(solution, layer, S[layer], b_pre[layer], g_pre[layer])
        g_post[layer], b_post[layer], w_post[layer], pi_post[layer], side[layer] = g2, b2, w2, pi2, sd
    return ForwardPass(g_pre, g_post, b_post, w_post, pi_post, side)


def expected_utility(tree: ScenarioTree, strategy: GridStrategy, utility: UtilitySpec,
                     params: FrictionParams, x: float) -> float:
    ledger = liquidation_value(tree, strategy, params, x)
    leaves = tree.leaves
    return float(np.dot(tree.node_prob[leaves], utility(x + ledger.V[leaves])))


def extract_strategy(
    solution: DpSolution, tree: ScenarioTree, x: float | None = None, rtol: float | None = 1e-6
) -> GridStrategy:
    """Holdings of the optimal policy from cash ``x`` and no shares.

    The strategy is replayed through the liquidation value; if the replayed
    expected utility differs from the solver's value by more than ``rtol``
    (relative, absolute for values below one in size) the tabulation is
    considered too coarse.
    """
    x = solution.x if x is None else float(x)
    fp = forward_pass(solution, tree, x)
    strat = GridStrategy(np.where(tree.time_index == tree.n_steps, 0.0, fp.gamma)).check(tree)
    params = FrictionParams(solution.kappa)
    ok, bad = is_admissible(liquidation_value(tree, strat, params, x), x)
    if not ok:
        raise GridTooCoarse(f"extracted strategy is not admissible at node {bad}")
    if rtol is not None:
        replay = expected_utility(tree, strat, solution.utility, params, x)
        target = solution.value_at(x)
        if abs(replay - target) > rtol * max(1.0, abs(target)):
            raise GridTooCoarse(
                f"replayed value {replay:.12g} drifts from solver value {target:.12g}"
            )
    return strat


@dataclass(frozen=True, eq=False)
class ShadowPrices:
    price: np.ndarray
    side: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    flagged: np.ndarray

    @property
    def in_band(self) -> bool:
        return len(self.flagged) == 0


def extract_shadow_price(solution: DpSolution, tree: ScenarioTree, x: float | None = None,
                         rtol: float = 1e-8) -> ShadowPrices:
    """Shadow price at the realized post-trade state of every node.

    Values outside ``[(1-kappa) S, (1+kappa) S]`` by more than ``rtol``
    (relative) are reported unchanged and listed in ``flagged``.  At
    leaves the position is liquidated, so the price is the bid for a long
    position, the ask for a short one and ``S`` when flat.
    """
    x = solution.x if x is None else float(x)
    fp = forward_pass(solution, tree, x)
    k = solution.kappa
    S = tree.S
    ratio = np.empty(tree.n_nodes)
    for v in range(tree.n_nodes):
        if len(tree.children[v]) == 0:
            ratio[v] = solution.shadow_ratio(v, 0.0, fp.gamma_pre[v])
        else:
            ratio[v] = solution.shadow_ratio(v, float(fp.pi[v]), side=int(fp.side[v]))
    if not np.all(np.isfinite(ratio)):
        raise GridTooCoarse("non-finite shadow price; widen the position range")
    price = ratio * S
    lower, upper = (1.0 - k) * S, (1.0 + k) * S
    flagged = np.flatnonzero((price < lower * (1.0 - rtol)) | (price > upper * (1.0 + rtol)))
    return ShadowPrices(price, fp.side, lower, upper, flagged)


def simulate_path(solution: DpSolution, path, x: float | None = None) -> np.ndarray:
    """Post-trade holdings along one root-to-leaf node sequence.

    Works on recombining lattices where holdings depend on the path, not
    just the node.  The last entry (the leaf) is always 0.
    """
    x = solution.x if x is None else float(x)
    tree = solution.tree
    path = [int(v) for v in path]
    if path[0] != 0 or len(path) != tree.n_steps + 1:
        raise ValueError("path must run from the root to a leaf")
    b, g = float(x), 0.0
    out = np.zeros(len(path))
    for i, v in enumerate(path[:-1]):
        if path[i + 1] not in tree.children[v]:
            raise ValueError(f"node {path[i + 1]} is not a child of {v}")
        g2, b2, _, _, _ = _trade(solution, v, tree.S[v], np.array(b), np.array(g))
        g, b = float(g2), float(b2)
        out[i] = g
    return out


def simulate_paths(solution: DpSolution, paths, x: float | None = None) -> np.ndarray:
    """Vectorized :func:`simulate_path` over rows of node ids, shape ``(m, n+1)``."""
    x = solution.x if x is None else float(x)
    paths = np.asarray(paths, dtype=int)
    tree = solution.tree
    m, n1 = paths.shape
    if n1 != tree.n_steps + 1 or np.any(tree.time_index[paths] != np.arange(n1)):
        raise ValueError("paths must list one node per time step")
    b = np.full(m, x)
    g = np.zeros(m)
    out = np.zeros((m, n1))
    for i in range(n1 - 1):
        v = paths[:, i]
        g, b, _, _, _ = _trade(solution, v, tree.S[v], b, g)
        out[:, i] = g
    return out


def path_shadow_prices(solution: DpSolution, paths, x: float | None = None):
    """Shadow prices at the post-trade states visited along lattice paths.

    Returns ``(price, side, S)`` of shape ``(m, n)`` for the non-terminal
    steps of each path; ``side`` is +1 for a purchase, -1 for a sale.
    """
    x = solution.x if x is None else float(x)
    paths = np.asarray(paths, dtype=int)
    tree = solution.tree
    m, n1 = paths.shape
    b = np.full(m, x)
    g = np.zeros(m)
    price = np.zeros((m, n1 - 1))
    side = np.zeros((m, n1 - 1), dtype=int)
    for i in range(n1 - 1):
        v = paths[:, i]
        g, b, _, pi, side[:, i] = _trade(solution, v, tree.S[v], b, g)
        for u in np.unique(v):
            at = v == u
            price[at, i] = solution.shadow_ratios(int(u), pi[at], side[at, i]) * tree.S[u]
    return price, side, tree.S[paths[:, :-1]]


def widen_policy(solution: DpSolution, amount: float) -> DpSolution:
    """Evaluate the policy whose no-trade intervals are widened by ``amount``.

    The result is a deliberately suboptimal solution; its ``value`` is the
    exact (up to tabulation) expected utility of the widened policy.
    """
    if amount < 0:
        raise ValueError("amount must be non-negative")
    policy = (solution.pi_buy - amount, solution.pi_sell + amount)
    sol = solve(solution.tree, solution.utility, solution.x, FrictionParams(solution.kappa),
                solution.grid, policy=policy)
    sol.meta["suboptimality"] = amount
    sol.meta["value_slack"] = solution.value - sol.value
    return sol
