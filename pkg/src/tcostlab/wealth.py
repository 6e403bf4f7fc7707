"""Trading strategies on explicit trees and their liquidation value.

Trades execute at the node price on arrival.  The convention that the
position before the root is zero means the root trade is charged at the
root price; leaves must hold no shares (terminal liquidation).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .market import ScenarioTree

__all__ = [
    "FrictionParams",
    "GridStrategy",
    "WealthLedger",
    "JordanParts",
    "jordan_decompose",
    "liquidation_value",
    "is_admissible",
    "frictionless_pnl",
]


@dataclass(frozen=True)
class FrictionParams:
    kappa: float

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ValueError(f"kappa must lie in (0, 1), got {self.kappa}")

    @property
    def bid_factor(self) -> float:
        return 1.0 - self.kappa

    @property
    def ask_factor(self) -> float:
        return 1.0 + self.kappa


@dataclass(frozen=True, eq=False)
class GridStrategy:
    """Share holdings per node of an explicit tree."""

    gamma: np.ndarray

    @classmethod
    def zeros(cls, tree: ScenarioTree) -> "GridStrategy":
        return cls(np.zeros(tree.n_nodes))

    def check(self, tree: ScenarioTree) -> "GridStrategy":
        if tree.recombining:
            raise ValueError("node-indexed strategies need an explicit tree")
        if len(self.gamma) != tree.n_nodes:
            raise ValueError(
                f"strategy defines {len(self.gamma)} values for a tree with {tree.n_nodes} nodes"
            )
        if not np.all(np.isfinite(self.gamma)):
            raise ValueError("strategy contains non-finite holdings")
        if np.any(self.gamma[tree.leaves] != 0.0):
            raise ValueError("strategy must liquidate at every leaf")
        return self

    def to_dict(self) -> dict:
        return {str(v): float(g) for v, g in enumerate(self.gamma)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict, tree: ScenarioTree) -> "GridStrategy":
        gamma = np.full(tree.n_nodes, np.nan)
        for k, g in d.items():
            gamma[int(k)] = float(g)
        if np.any(np.isnan(gamma)):
            missing = np.flatnonzero(np.isnan(gamma))[:5].tolist()
            raise ValueError(f"strategy misses node values, e.g. {missing}")
        return cls(gamma).check(tree)


def _increments(tree: ScenarioTree, gamma: np.ndarray) -> np.ndarray:
    prev = np.where(tree.parent >= 0, gamma[np.maximum(tree.parent, 0)], 0.0)
    return gamma - prev


def _cumulate(tree: ScenarioTree, term: np.ndarray) -> np.ndarray:
    """Sum ``term`` along the root-to-node path of every node."""
    out = np.array(term, dtype=float)
    for layer in tree.layers[1:]:
        out[layer] += out[tree.parent[layer]]
    return out


class JordanParts(NamedTuple):
    increasing: np.ndarray
    decreasing: np.ndarray

    def along(self, path) -> tuple[np.ndarray, np.ndarray]:
        return self.increasing[path], self.decreasing[path]


def jordan_decompose(strategy: GridStrategy, tree: ScenarioTree) -> JordanParts:
    """Cumulative positive and negative variation of the holdings.

    Both parts are indexed by node and accumulate along the root-to-node
    path, starting from a zero position before the root.
    """
    if len(strategy.gamma) != tree.n_nodes or np.any(np.isnan(strategy.gamma)):
        raise ValueError("strategy must define a value for every node")
    tree._require_explicit("jordan_decompose")
    dg = _increments(tree, strategy.gamma)
    return JordanParts(_cumulate(tree, np.maximum(dg, 0.0)), _cumulate(tree, np.maximum(-dg, 0.0)))


@dataclass(frozen=True, eq=False)
class WealthLedger:
    tree: ScenarioTree
    gamma: np.ndarray
    delta_gamma: np.ndarray
    cash: np.ndarray
    V: np.ndarray
    kappa: float
    x: float

    @property
    def terminal_value(self) -> np.ndarray:
        return self.V[self.tree.leaves]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node_id", "time_index", "S", "gamma", "delta_gamma", "cash", "V"])
        t = self.tree
        for v in range(t.n_nodes):
            w.writerow(
                [v, int(t.time_index[v]), repr(float(t.S[v])), repr(float(self.gamma[v])),
                 repr(float(self.delta_gamma[v])), repr(float(self.cash[v])), repr(float(self.V[v]))]
            )
        return buf.getvalue()


def liquidation_value(
    tree: ScenarioTree,
    strategy: GridStrategy,
    params: FrictionParams,
    x: float,
    check: bool = False,
) -> WealthLedger:
    """Cash account and liquidation value at every node.

    The cash account buys at the ask ``(1+kappa) S`` and sells at the bid
    ``(1-kappa) S``; the liquidation value closes the current position at
    bid/ask.  With ``check=True`` the value is recomputed in the rearranged
    form ``gamma S - int S dgamma - kappa |gamma| S - kappa int S |dgamma|``
    and both forms must agree to 1e-10 relative.
    """
    if not x > 0:
        raise ValueError(f"initial capital must be positive, got {x}")
    strategy.check(tree)
    k = params.kappa
    S = tree.S
    g = strategy.gamma
    dg = _increments(tree, g)
    buys = np.maximum(dg, 0.0)
    sells = np.maximum(-dg, 0.0)
    cash = _cumulate(tree, (1.0 - k) * S * sells - (1.0 + k) * S * buys)
    V = cash + (1.0 - k) * S * np.maximum(g, 0.0) - (1.0 + k) * S * np.maximum(-g, 0.0)
    if check:
        V2 = g * S - _cumulate(tree, S * dg) - k * np.abs(g) * S - k * _cumulate(tree, S * np.abs(dg))
        scale = np.maximum(np.abs(V), _cumulate(tree, S * np.abs(dg)) + np.abs(g) * S)
        scale = np.maximum(scale, 1e-300)
        err = np.max(np.abs(V - V2) / scale)
        if err > 1e-10:
            raise AssertionError(f"liquidation value forms disagree: relative error {err:.3e}")
    return WealthLedger(tree, g, dg, cash, V, k, float(x))


def is_admissible(ledger: WealthLedger, x: float) -> tuple[bool, int | None]:
    """``x + V >= -1e-12 x`` at every node; returns the earliest violating node."""
    bad = np.flatnonzero(x + ledger.V < -1e-12 * x)
    if len(bad) == 0:
        return True, None
    ti = ledger.tree.time_index[bad]
    first = bad[np.lexsort((bad, ti))[0]]
    return False, int(first)


def frictionless_pnl(tree: ScenarioTree, strategy: GridStrategy) -> np.ndarray:
    """Cumulative ``sum gamma_prev * dS`` at every node (no costs)."""
    g = strategy.gamma
    par = np.maximum(tree.parent, 0)
    term = np.where(tree.parent >= 0, g[par] * (tree.S - tree.S[par]), 0.0)
    return _cumulate(tree, term)
