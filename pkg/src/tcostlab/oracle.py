"""Ground-truth solvers for small explicit trees.

Two independent routes check the backward induction:

* :func:`enumerate_optimal` tries every strategy whose per-node trades come
  from a finite symmetric set, and returns the exact best value of that
  restricted class together with all (near-)maximizers;
* :func:`solve_continuous` is the limit of ever finer trade sets.  It
  optimizes the buy/sell amounts of every node jointly as one concave
  program (conic solver), with no state reduction and no interpolation.

:func:`uniqueness_probe` uses the enumeration to measure how spread out the
near-optimal strategies are in the Meyer-Zheng distance.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .market import ScenarioTree
from .mz import strategy_distance
from .utility import UtilitySpec
from .wealth import FrictionParams, GridStrategy, is_admissible, liquidation_value

__all__ = [
    "TradeGrid",
    "EnumerationResult",
    "UniquenessReport",
    "BudgetExceeded",
    "enumerate_optimal",
    "solve_continuous",
    "uniqueness_probe",
]

ENUMERATION_BUDGET = 10**8


class BudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class TradeGrid:
    """Per-node trade increments ``k * delta / refine`` shares, ``|k| <= 2*refine``.

    ``delta`` is given as a fraction of ``x / S0``.  Refining by an integer
    factor keeps every coarser increment, so values can only improve.
    ``jitter`` perturbs the non-zero increments (relative size), with an
    independent draw per node, to break ties created by symmetry.
    """

    delta: float = 0.25
    refine: int = 1
    levels: int = 2
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0 or self.refine < 1 or self.levels < 0:
            raise ValueError("invalid trade grid")

    def increments(self, x: float, S0: float, node: int = 0) -> np.ndarray:
        if self.delta == 0 or self.levels == 0:
            return np.zeros(1)
        m = self.levels * self.refine
        ks = np.arange(-m, m + 1, dtype=float)
        inc = ks * self.delta / self.refine * x / S0
        if self.jitter:
            rng = np.random.default_rng([self.seed, node])
            inc = inc * (1.0 + self.jitter * rng.uniform(-1.0, 1.0, len(inc)))
            inc[m] = 0.0
        return inc

    @property
    def max_increment_units(self) -> float:
        """Largest increment as a multiple of ``x / S0``."""
        return self.levels * self.delta


@dataclass(eq=False)
class EnumerationResult:
    best: float
    argmax: list
    values: np.ndarray
    strategies: np.ndarray
    increments: np.ndarray
    n_admissible: int
    n_total: int


def _internal_order(tree: ScenarioTree) -> np.ndarray:
    return np.concatenate(tree.layers[:-1])


def enumerate_optimal(
    tree: ScenarioTree,
    utility: UtilitySpec,
    x: float,
    params: FrictionParams,
    grid: TradeGrid | None = None,
    tol: float = 1e-12,
    budget: int = ENUMERATION_BUDGET,
    keep_all: bool = True,
) -> EnumerationResult:
    """Best expected utility over all strategies with trades on ``grid``.

    Leaves always liquidate.  Inadmissible strategies are dropped.  The
    argmax set holds every strategy within ``tol * max(1, |best|)`` of the
    best value.  Enumeration is vectorized one tree layer at a time.
    """
    tree._require_explicit("enumerate_optimal")
    grid = grid or TradeGrid()
    internal = _internal_order(tree)
    incs = {int(v): grid.increments(x, float(tree.S[0]), int(v)) for v in internal}
    inc = grid.increments(x, float(tree.S[0]))
    n_total = len(inc) ** len(internal)
    if n_total > budget:
        raise BudgetExceeded(f"{n_total} strategies exceed the enumeration budget {budget}")
    k = params.kappa
    S = tree.S
    pos = {int(v): i for i, v in enumerate(internal)}

    # all assignments of an increment index to every internal node
    choice = np.array(list(itertools.product(range(len(inc)), repeat=len(internal))), dtype=np.int32)
    if len(internal) == 0:
        choice = np.zeros((1, 0), dtype=np.int32)
    m = len(choice)
    gamma = np.zeros((m, tree.n_nodes))
    cash = np.zeros((m, tree.n_nodes))
    ok = np.ones(m, dtype=bool)
    for layer in tree.layers:
        for v in layer:
            v = int(v)
            par = tree.parent[v]
            g_prev = gamma[:, par] if par >= 0 else np.zeros(m)
            c_prev = cash[:, par] if par >= 0 else np.zeros(m)
            if v in pos:
                g = g_prev + incs[v][choice[:, pos[v]]]
            else:
                g = np.zeros(m)
            dg = g - g_prev
            c = c_prev - S[v] * dg - k * S[v] * np.abs(dg)
            gamma[:, v] = g
            cash[:, v] = c
            V = c + (1.0 - k) * S[v] * np.maximum(g, 0) - (1.0 + k) * S[v] * np.maximum(-g, 0)
            ok &= x + V >= -1e-12 * x
    all_inc = np.concatenate(list(incs.values())) if incs else inc
    leaves = tree.leaves
    prob = tree.node_prob[leaves]
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = utility(x + cash[:, leaves]) @ prob
    vals = np.where(ok, vals, -np.inf)
    best = float(np.max(vals))
    thr = best - tol * max(1.0, abs(best))
    arg = np.flatnonzero(vals >= thr)
    if not keep_all:
        gamma = gamma[arg]
        vals_kept = vals[arg]
        arg = np.arange(len(arg))
        return EnumerationResult(best, arg.tolist(), vals_kept, gamma, all_inc, int(ok.sum()), m)
    return EnumerationResult(best, arg.tolist(), vals, gamma, all_inc, int(ok.sum()), m)


def solve_continuous(
    tree: ScenarioTree,
    utility: UtilitySpec,
    x: float,
    params: FrictionParams,
    position_range: tuple[float, float] | None = None,
    solver: str = "CLARABEL",
) -> tuple[float, GridStrategy]:
    """Optimal value over all real-valued strategies, as one concave program.

    Variables are the shares bought and sold at every non-terminal node;
    leaves sell everything.  Terminal wealth is affine in these variables,
    and admissibility at each node is a convex constraint.  With
    ``position_range=(lo, hi)`` the post-trade stock value at every
    non-terminal node is kept within ``[lo, hi]`` times the liquidation
    wealth, matching the position range of the backward induction.
    """
    import cvxpy as cp

    tree._require_explicit("solve_continuous")
    k = params.kappa
    S = tree.S
    internal = _internal_order(tree)
    idx = {int(v): i for i, v in enumerate(internal)}
    n = len(internal)
    buy = cp.Variable(n, nonneg=True)
    sell = cp.Variable(n, nonneg=True)
    # holdings and cash as affine maps of (buy, sell), built along the tree
    gamma_expr: dict = {}
    cash_expr: dict = {}
    constraints = []
    leaf_wealth = []
    for layer in tree.layers:
        for v in layer:
            v = int(v)
            par = int(tree.parent[v])
            g_prev = gamma_expr[par] if par >= 0 else 0.0
            c_prev = cash_expr[par] if par >= 0 else 0.0
            if v in idx:
                i = idx[v]
                g = g_prev + buy[i] - sell[i]
                c = c_prev - (1.0 + k) * S[v] * buy[i] + (1.0 - k) * S[v] * sell[i]
                gamma_expr[v], cash_expr[v] = g, c
                # liquidation value is concave in the holdings
                V = c + S[v] * g - k * S[v] * cp.abs(g)
                constraints.append(x + V >= 0)
                if position_range is not None:
                    lo, hi = position_range
                    constraints.append(S[v] * g <= hi * (x + V))
                    constraints.append(S[v] * g - lo * (x + V) >= 0)
            else:
                V = c_prev + S[v] * g_prev - k * S[v] * cp.abs(g_prev)
                leaf_wealth.append(x + V)
    leaves = tree.leaves
    prob = tree.node_prob[leaves]
    W = cp.hstack(leaf_wealth)
    if utility.is_log:
        obj = prob @ cp.log(W)
    else:
        obj = prob @ cp.power(W, utility.p) / utility.p
    problem = cp.Problem(cp.Maximize(obj), constraints)
    opts = {"tol_gap_abs": 1e-10, "tol_gap_rel": 1e-10, "tol_feas": 1e-10} if solver == "CLARABEL" else {}
    with warnings.catch_warnings():
        # "optimal_inaccurate" is accepted below; the replayed value is exact
        warnings.simplefilter("ignore", UserWarning)
        problem.solve(solver=solver, **opts)
    if problem.status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"conic solver failed: {problem.status}")
    gamma = np.zeros(tree.n_nodes)
    for v, i in idx.items():
        gamma[v] = float(gamma_expr[v].value)
    strat = GridStrategy(gamma)
    ledger = liquidation_value(tree, strat, params, x)
    value = float(prob @ utility(x + ledger.V[leaves]))
    return value, strat


@dataclass(eq=False)
class UniquenessReport:
    best: float
    optimal: list
    unique: bool
    epsilons: np.ndarray
    diameters: np.ndarray
    radii: np.ndarray
    gaps: np.ndarray
    max_increment: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "best": self.best,
            "unique": self.unique,
            "n_optimal": len(self.optimal),
            "optimal": [g.tolist() for g in self.optimal],
            "epsilons": self.epsilons.tolist(),
            "diameters": self.diameters.tolist(),
            "radii": self.radii.tolist(),
            "gaps": self.gaps.tolist(),
            "max_increment": self.max_increment,
        }


def uniqueness_probe(
    tree: ScenarioTree,
    utility: UtilitySpec,
    x: float,
    params: FrictionParams,
    grid: TradeGrid | None = None,
    radii=(0.05, 0.1, 0.25, 0.5),
    epsilons=None,
    tie_tol: float = 1e-12,
) -> UniquenessReport:
    """Spread of near-optimal strategies on a fixed trade grid.

    Distances between strategies are expected Meyer-Zheng distances of their
    holding paths.  ``diameters[i]`` is the largest pairwise distance among
    strategies within ``epsilons[i]`` of the best value; ``gaps[j]`` is the
    value lost by the best strategy at distance ``>= radii[j]`` from the
    argmax (``inf`` when there is none).
    """
    grid = grid or TradeGrid()
    res = enumerate_optimal(tree, utility, x, params, grid, tol=tie_tol)
    best = res.best
    scale = max(abs(best), 1e-300)
    if epsilons is None:
        epsilons = scale * np.array([1e-6, 1e-4, 1e-3, 1e-2])
    epsilons = np.sort(np.asarray(epsilons, dtype=float))
    finite = np.isfinite(res.values)
    order = np.argsort(-np.where(finite, res.values, -np.inf))
    top = res.argmax[0]
    cand_mask = res.values >= best - epsilons.max()
    cand = np.flatnonzero(cand_mask)
    G = res.strategies[cand]
    dist = np.array([[strategy_distance(tree, a, b) for b in G] for a in G]) if len(cand) else np.zeros((0, 0))
    diam = []
    for eps in epsilons:
        sel = res.values[cand] >= best - eps
        d = dist[np.ix_(sel, sel)]
        diam.append(float(d.max()) if d.size else 0.0)
    radii = np.asarray(radii, dtype=float)
    gaps = np.full(len(radii), np.inf)
    g_top = res.strategies[top]
    # scan strategies in decreasing value until every radius has a witness
    for i in order:
        if not np.isfinite(res.values[i]):
            break
        d = strategy_distance(tree, g_top, res.strategies[i])
        hit = (d >= radii) & np.isinf(gaps)
        gaps[hit] = best - res.values[i]
        if not np.isinf(gaps).any():
            break
    optimal = [res.strategies[i].copy() for i in res.argmax]
    return UniquenessReport(
        best=best,
        optimal=optimal,
        unique=len(optimal) == 1,
        epsilons=epsilons,
        diameters=np.array(diam),
        radii=radii,
        gaps=gaps,
        max_increment=float(np.max(np.abs(res.increments))),
    )


def richardson(values, ratio: float = 2.0, order: float = 2.0) -> float:
    """Richardson extrapolation of the last two refinement values."""
    a, b = values[-2], values[-1]
    r = ratio**order
    return b + (b - a) / (r - 1.0)


def is_admissible_strategy(tree, gamma, params, x) -> bool:
    return is_admissible(liquidation_value(tree, GridStrategy(gamma), params, x), x)[0]

