"""Estimator-style wrappers around the solver and the price-system certifier.

Both follow the scikit-learn conventions for parameters (``get_params``,
``set_params``, ``clone``) and fitted attributes (trailing underscore).
The "data" is a :class:`~tcostlab.market.ScenarioTree`, not a feature
matrix, so these are not meant for use inside sklearn pipelines.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cps import Q_MIN, extract_cps, propagate_bands, verify_martingale
from .dp import GridSpec, extract_strategy, simulate_paths, solve
from .market import ScenarioTree
from .utility import UtilitySpec
from .wealth import FrictionParams

__all__ = ["TransactionCostOptimizer", "CpsCertifier", "check_tree", "check_kappa", "check_wealth"]


def check_tree(tree) -> ScenarioTree:
    if isinstance(tree, dict):
        tree = ScenarioTree.from_dict(tree)
    elif isinstance(tree, str):
        tree = ScenarioTree.from_json(tree)
    if not isinstance(tree, ScenarioTree):
        raise TypeError(f"expected a ScenarioTree, got {type(tree).__name__}")
    return tree


def check_kappa(kappa) -> float:
    kappa = float(kappa)
    if not 0.0 < kappa < 1.0:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    return kappa


def check_wealth(x) -> float:
    x = float(x)
    if not (np.isfinite(x) and x > 0):
        raise ValueError(f"initial wealth must be positive, got {x}")
    return x


class TransactionCostOptimizer(BaseEstimator):
    """Optimal investment under proportional costs on a fitted tree.

    ``fit`` runs the backward induction; ``predict`` returns optimal
    holdings, node-indexed for explicit trees or along node paths of shape
    ``(m, n_steps + 1)``; ``score`` returns the optimal expected utility.
    """

    def __init__(self, utility="log", kappa=0.01, x=1.0, n_points=65, pi_min=-0.5, pi_max=3.0):
        self.utility = utility
        self.kappa = kappa
        self.x = x
        self.n_points = n_points
        self.pi_min = pi_min
        self.pi_max = pi_max

    def fit(self, tree, y=None):
        tree = check_tree(tree)
        utility = UtilitySpec.parse(self.utility) if isinstance(self.utility, str) else self.utility
        grid = GridSpec(n_points=self.n_points, pi_min=self.pi_min, pi_max=self.pi_max)
        params = FrictionParams(check_kappa(self.kappa))
        self.solution_ = solve(tree, utility, check_wealth(self.x), params, grid)
        self.value_ = self.solution_.value_at(self.x)
        self.no_trade_ = np.column_stack([self.solution_.pi_buy, self.solution_.pi_sell])
        return self

    def predict(self, paths=None):
        check_is_fitted(self, "solution_")
        sol = self.solution_
        if paths is None:
            return extract_strategy(sol, sol.tree, self.x).gamma
        return simulate_paths(sol, np.atleast_2d(paths), self.x)

    def score(self, tree=None, y=None) -> float:
        check_is_fitted(self, "solution_")
        return float(self.value_)


class CpsCertifier(BaseEstimator):
    """Consistent price system for the band ``kappa - eps``."""

    def __init__(self, kappa=0.01, eps=None, q_min=Q_MIN, anchor="mid"):
        self.kappa = kappa
        self.eps = eps
        self.q_min = q_min
        self.anchor = anchor

    def fit(self, tree, y=None):
        tree = check_tree(tree)
        kappa = check_kappa(self.kappa)
        eps = kappa / 2.0 if self.eps is None else float(self.eps)
        if not 0.0 < eps < kappa:
            raise ValueError(f"eps must lie in (0, kappa), got {eps}")
        self.kappa_eff_ = kappa - eps
        self.bands_ = propagate_bands(tree, self.kappa_eff_, self.q_min)
        self.feasible_ = self.bands_.feasible
        self.system_ = extract_cps(tree, self.bands_, self.anchor) if self.feasible_ else None
        self.report_ = verify_martingale(tree, self.system_, self.kappa_eff_) if self.feasible_ else None
        self.tree_ = tree
        return self

    def transform(self, tree=None):
        """Martingale values ``M`` per node; NaN when no system exists."""
        check_is_fitted(self, "bands_")
        if self.system_ is None:
            return np.full(self.tree_.n_nodes, np.nan)
        return self.system_.M.copy()
