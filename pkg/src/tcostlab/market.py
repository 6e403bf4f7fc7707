"""Finite scenario-tree market models.

A :class:`ScenarioTree` stores a finite adapted price model node by node.
Every node carries its price and time index; every non-terminal node lists
its children together with the conditional branch probabilities.

Two storage layouts share the same class:

* explicit trees, where each non-root node has exactly one parent (the
  layout used for serialization, brute-force checks and per-node strategies);
* recombining lattices (``recombining=True``), where binomial nodes with
  equal up/down counts are merged.  The backward induction of
  :mod:`tcostlab.dp` only looks at the future of a node, so it runs on both
  layouts; a binomial lattice with 64 steps has 2145 nodes instead of 2**65.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtri

__all__ = [
    "ScenarioTree",
    "GbmSpec",
    "FbmSpec",
    "build_binomial",
    "build_fbm_tree",
    "build_random_tree",
    "refine",
    "NodeBudgetExceeded",
    "DEFAULT_NODE_BUDGET",
]

DEFAULT_NODE_BUDGET = 10**6
PROB_CLAMP = 1e-9
PROB_TOL = 1e-12


class NodeBudgetExceeded(ValueError):
    """Raised when a requested tree would exceed the node budget."""


@dataclass(frozen=True)
class GbmSpec:
    S0: float
    mu: float
    sigma: float
    T: float

    def __post_init__(self):
        if not self.S0 > 0:
            raise ValueError(f"S0 must be positive, got {self.S0}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")

    def to_dict(self) -> dict:
        return {"kind": "gbm", "S0": self.S0, "mu": self.mu, "sigma": self.sigma, "T": self.T}


@dataclass(frozen=True)
class FbmSpec:
    S0: float
    hurst: float
    scale: float
    T: float
    branching: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.hurst < 1.0:
            raise ValueError(f"hurst must lie in (0, 1), got {self.hurst}")
        if self.branching < 2:
            raise ValueError(f"branching must be >= 2, got {self.branching}")
        if not self.S0 > 0 or not self.T > 0 or not self.scale > 0:
            raise ValueError("S0, T and scale must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": "fbm",
            "S0": self.S0,
            "hurst": self.hurst,
            "scale": self.scale,
            "T": self.T,
            "branching": self.branching,
            "seed": self.seed,
        }


def spec_from_dict(d: dict) -> GbmSpec | FbmSpec:
    d = dict(d)
    kind = d.pop("kind", "gbm")
    if kind == "gbm":
        return GbmSpec(**d)
    if kind == "fbm":
        return FbmSpec(**d)
    raise ValueError(f"unknown market kind {kind!r}")


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Finite adapted market.

    Parameters
    ----------
    n_steps : int
        Depth of the tree.
    T : float
        Horizon in years.
    S : ndarray of shape (n_nodes,)
        Node prices, all strictly positive.
    time_index : ndarray of shape (n_nodes,)
        Time step of each node, ``0..n_steps``.
    parent : ndarray of shape (n_nodes,)
        Parent id, ``-1`` for the root.  For recombining lattices this is
        one of possibly several parents.
    children, probs : list of ndarray
        Child ids and conditional probabilities; empty arrays at leaves.
    recombining : bool
        True if nodes may be shared between several parents.
    """

    n_steps: int
    T: float
    S: np.ndarray
    time_index: np.ndarray
    parent: np.ndarray
    children: tuple
    probs: tuple
    recombining: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.S)

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @cached_property
    def layers(self) -> list[np.ndarray]:
        order = np.argsort(self.time_index, kind="stable")
        counts = np.bincount(self.time_index, minlength=self.n_steps + 1)
        return np.split(order, np.cumsum(counts)[:-1])

    @cached_property
    def leaves(self) -> np.ndarray:
        return self.layers[-1]

    def is_leaf(self, node: int) -> bool:
        return len(self.children[node]) == 0

    def path_to(self, node: int) -> list[int]:
        """Root-to-node path (explicit trees only)."""
        self._require_explicit("path_to")
        path = [int(node)]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
        return path[::-1]

    @cached_property
    def node_prob(self) -> np.ndarray:
        """Unconditional probability of every node."""
        if self.recombining:
            prob = np.zeros(self.n_nodes)
            prob[0] = 1.0
            for layer in self.layers[:-1]:
                for v in layer:
                    prob[self.children[v]] += prob[v] * self.probs[v]
            return prob
        prob = np.ones(self.n_nodes)
        for layer in self.layers[1:]:
            for v in layer:
                par = self.parent[v]
                k = int(np.flatnonzero(self.children[par] == v)[0])
                prob[v] = prob[par] * self.probs[par][k]
        return prob

    def _require_explicit(self, what: str):
        if self.recombining:
            raise ValueError(f"{what} requires an explicit (non-recombining) tree")

    def validate(self) -> "ScenarioTree":
        """Check the structural invariants; return self or raise ValueError."""
        n = self.n_nodes
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not (len(self.time_index) == len(self.parent) == len(self.children) == len(self.probs) == n):
            raise ValueError("node arrays have inconsistent lengths")
        if not np.all(np.isfinite(self.S)) or np.any(self.S <= 0):
            raise ValueError("all prices must be finite and strictly positive")
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1 or roots[0] != 0 or self.time_index[0] != 0:
            raise ValueError("tree must have a unique root with id 0 at time 0")
        n_parents = np.zeros(n, dtype=int)
        for v in range(n):
            ch, pr = self.children[v], self.probs[v]
            if len(ch) != len(pr):
                raise ValueError(f"node {v}: children/probability length mismatch")
            if len(ch) == 0:
                if self.time_index[v] != self.n_steps:
                    raise ValueError(f"leaf {v} is not at the terminal time")
                continue
            if np.any(pr <= 0) or abs(pr.sum() - 1.0) > PROB_TOL:
                raise ValueError(f"node {v}: branch probabilities must be positive and sum to 1")
            if np.any(self.time_index[ch] != self.time_index[v] + 1):
                raise ValueError(f"node {v}: child time index must be parent's + 1")
            n_parents[ch] += 1
            if not self.recombining and np.any(self.parent[ch] != v):
                raise ValueError(f"node {v}: child parent pointers are inconsistent")
        if np.any(n_parents[1:] == 0):
            raise ValueError("every non-root node needs a parent")
        if not self.recombining and np.any(n_parents[1:] != 1):
            raise ValueError("explicit tree node with several parents")
        return self

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        nodes = [
            {
                "id": v,
                "parent_id": None if self.parent[v] < 0 else int(self.parent[v]),
                "time_index": int(self.time_index[v]),
                "S": float(self.S[v]),
            }
            for v in range(self.n_nodes)
        ]
        branches = {
            str(v): [[int(c), float(p)] for c, p in zip(self.children[v], self.probs[v])]
            for v in range(self.n_nodes)
            if len(self.children[v])
        }
        return {
            "n_steps": self.n_steps,
            "T": float(self.T),
            "dt": float(self.dt),
            "recombining": self.recombining,
            "nodes": nodes,
            "branches": branches,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioTree":
        nodes = sorted(d["nodes"], key=lambda nd: nd["id"])
        if [nd["id"] for nd in nodes] != list(range(len(nodes))):
            raise ValueError("node ids must be dense integers 0..N-1")
        n = len(nodes)
        S = np.array([nd["S"] for nd in nodes], dtype=float)
        ti = np.array([nd["time_index"] for nd in nodes], dtype=int)
        parent = np.array([-1 if nd["parent_id"] is None else nd["parent_id"] for nd in nodes], dtype=int)
        children = [np.zeros(0, dtype=int)] * n
        probs = [np.zeros(0)] * n
        for key, br in d.get("branches", {}).items():
            v = int(key)
            children[v] = np.array([c for c, _ in br], dtype=int)
            probs[v] = np.array([p for _, p in br], dtype=float)
        tree = cls(
            n_steps=int(d["n_steps"]),
            T=float(d["T"]),
            S=S,
            time_index=ti,
            parent=parent,
            children=tuple(children),
            probs=tuple(probs),
            recombining=bool(d.get("recombining", False)),
        )
        return tree.validate()

    @classmethod
    def from_json(cls, text: str) -> "ScenarioTree":
        return cls.from_dict(json.loads(text))


def _heap_tree(n_steps: int, b: int, S: np.ndarray, probs_per_node, T: float, meta=None) -> ScenarioTree:
    """Assemble a full b-ary explicit tree stored in heap order."""
    n = len(S)
    n_internal = (b**n_steps - 1) // (b - 1)
    ti = np.empty(n, dtype=int)
    off = 0
    for k in range(n_steps + 1):
        ti[off : off + b**k] = k
        off += b**k
    parent = np.empty(n, dtype=int)
    parent[0] = -1
    parent[1:] = (np.arange(1, n) - 1) // b
    leaf_c = np.zeros(0, dtype=int)
    leaf_p = np.zeros(0)
    children = [np.arange(b * v + 1, b * v + b + 1) for v in range(n_internal)] + [leaf_c] * (n - n_internal)
    probs = [probs_per_node(v) for v in range(n_internal)] + [leaf_p] * (n - n_internal)
    return ScenarioTree(n_steps, T, S, ti, parent, tuple(children), tuple(probs), False, meta or {})


def _binomial_params(spec: GbmSpec, n_steps: int) -> tuple[float, float, float]:
    dt = spec.T / n_steps
    u = math.exp(spec.sigma * math.sqrt(dt))
    d = 1.0 / u
    p = (math.exp(spec.mu * dt) - d) / (u - d)
    if p < -0.1 or p > 1.1:
        raise ValueError(
            f"up-probability {p:.4f} is far outside (0, 1): drift too large for {n_steps} steps"
        )
    p = min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return u, d, p


def build_binomial(
    spec: GbmSpec,
    n_steps: int,
    recombine: bool = False,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> ScenarioTree:
    """Binomial (CRR) tree for geometric Brownian motion.

    Up factor ``exp(sigma*sqrt(dt))``, down factor its reciprocal, and
    up-probability ``(exp(mu*dt) - d) / (u - d)`` clamped to
    ``[1e-9, 1 - 1e-9]``.  With ``recombine=True`` a lattice with
    ``(n+1)(n+2)/2`` nodes is returned instead of the full binary tree.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    u, d, p = _binomial_params(spec, n_steps)
    pr = np.array([p, 1.0 - p])
    pr = pr / pr.sum()
    meta = {"market": spec.to_dict(), "u": u, "d": d, "p": p}

    if recombine:
        n = (n_steps + 1) * (n_steps + 2) // 2
        if n > node_budget:
            raise NodeBudgetExceeded(f"{n} nodes exceed budget {node_budget}")
        ti = np.empty(n, dtype=int)
        downs = np.empty(n, dtype=int)
        for k in range(n_steps + 1):
            base = k * (k + 1) // 2
            ti[base : base + k + 1] = k
            downs[base : base + k + 1] = np.arange(k + 1)
        ups = ti - downs
        S = spec.S0 * u ** ups.astype(float) * d ** downs.astype(float)
        parent = np.where(ti == 0, -1, (ti - 1) * ti // 2 + np.maximum(downs - 1, 0))
        parent[0] = -1
        children, probs = [], []
        for v in range(n):
            k, j = ti[v], downs[v]
            if k == n_steps:
                children.append(np.zeros(0, dtype=int))
                probs.append(np.zeros(0))
            else:
                base = (k + 1) * (k + 2) // 2
                children.append(np.array([base + j, base + j + 1]))
                probs.append(pr)
        tree = ScenarioTree(n_steps, spec.T, S, ti, parent, tuple(children), tuple(probs), True, meta)
        return tree.validate()

    n = 2 ** (n_steps + 1) - 1
    if n > node_budget:
        raise NodeBudgetExceeded(f"{n} nodes exceed budget {node_budget}")
    # heap order: child 2v+1 is the up move, 2v+2 the down move
    ups = np.zeros(n)
    downs = np.zeros(n)
    idx = np.arange(1, n)
    is_up = (idx % 2) == 1
    par = (idx - 1) // 2
    for v in range(1, n):  # parents precede children in heap order
        ups[v] = ups[par[v - 1]] + is_up[v - 1]
        downs[v] = downs[par[v - 1]] + (not is_up[v - 1])
    S = spec.S0 * u**ups * d**downs
    tree = _heap_tree(n_steps, 2, S, lambda v: pr, spec.T, meta)
    return tree.validate()


def fbm_covariance(times: np.ndarray, hurst: float) -> np.ndarray:
    s = times[:, None]
    t = times[None, :]
    h2 = 2.0 * hurst
    return 0.5 * (s**h2 + t**h2 - np.abs(t - s) ** h2)


def _cholesky_with_jitter(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(cov + 1e-12 * np.eye(len(cov)))
    except np.linalg.LinAlgError as exc:
        raise ValueError("fBm covariance is not positive definite; hurst too extreme for grid") from exc


def build_fbm_tree(
    spec: FbmSpec, n_steps: int, node_budget: int = DEFAULT_NODE_BUDGET
) -> ScenarioTree:
    """b-ary tree of exponential fractional Brownian motion.

    The log-price path is ``scale * B^H`` on the grid ``k*T/n``.  It is
    written as ``L @ z`` with ``L`` the Cholesky factor of the fBm covariance
    and ``z`` i.i.d. standard normal innovations, so the conditional law of
    the next value given the past is exact.  Each node draws its ``b`` next
    innovations by stratified sampling of N(0, 1) (one draw per
    probability stratum), giving equal branch probabilities ``1/b``.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    b = spec.branching
    n = (b ** (n_steps + 1) - 1) // (b - 1)
    if b**n_steps > node_budget or n > node_budget:
        raise NodeBudgetExceeded(f"{n} nodes exceed budget {node_budget}")
    times = spec.T * np.arange(1, n_steps + 1) / n_steps
    L = _cholesky_with_jitter(fbm_covariance(times, spec.hurst))
    rng = np.random.default_rng(spec.seed)

    logS = np.zeros(n)
    z = np.zeros((1, 0))
    off = 1
    for k in range(n_steps):
        m = z.shape[0]
        u = (np.arange(b)[None, :] + rng.random((m, b))) / b
        innov = ndtri(u).reshape(-1, 1)
        z = np.hstack([np.repeat(z, b, axis=0), innov])
        x = spec.scale * (z @ L[k, : k + 1])
        logS[off : off + m * b] = x
        off += m * b
    S = spec.S0 * np.exp(logS)
    pr = np.full(b, 1.0 / b)
    tree = _heap_tree(n_steps, b, S, lambda v: pr, spec.T, {"market": spec.to_dict()})
    return tree.validate()


def refine(spec: GbmSpec, levels: Sequence[int], recombine: bool = False) -> list[ScenarioTree]:
    levels = list(levels)
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"levels must be non-empty and strictly increasing, got {levels}")
    return [build_binomial(spec, n, recombine=recombine) for n in levels]


def _tilted_probs(R: np.ndarray, w: np.ndarray, mean: float) -> np.ndarray:
    """Exponentially tilt weights ``w`` so that the mean of ``R`` is ``mean``."""
    from scipy.optimize import brentq

    def f(theta):
        e = w * np.exp(theta * (R - 1.0))
        return np.dot(e, R) / e.sum() - mean

    theta = brentq(f, -400.0, 400.0)
    p = w * np.exp(theta * (R - 1.0))
    return p / p.sum()


def build_random_tree(
    rng: np.random.Generator,
    n_steps: int,
    max_branch: int = 3,
    S0: float = 100.0,
    move: float = 0.15,
    drift: tuple[float, float] = (-0.005, 0.01),
    T: float = 1.0,
    min_prob: float = 0.02,
    one_sided: float = 0.0,
) -> ScenarioTree:
    """Random explicit tree, by default without frictionless arbitrage.

    Every non-terminal node gets between 2 and ``max_branch`` children with
    at least one price above and one below the parent price, log-returns
    between ``0.2*move`` and ``move`` in absolute value, and branch
    probabilities tilted so that the one-step expected return is drawn
    from ``drift``.  Nodes whose tilted probabilities fall below
    ``min_prob`` are redrawn.

    With probability ``one_sided`` a node instead gets children that all
    move the same way (random sign, untilted weights); such nodes carry
    frictionless arbitrage and are meant for feasibility tests.
    """
    S = [S0]
    ti = [0]
    parent = [-1]
    children: dict = {}
    probs: dict = {}
    frontier = [0]
    for k in range(n_steps):
        nxt = []
        for v in frontier:
            while True:
                nb = int(rng.integers(2, max_branch + 1))
                r = rng.uniform(0.2, 1.0, nb) * move
                if one_sided and rng.uniform() < one_sided:
                    R = np.exp(r * rng.choice([-1.0, 1.0]) * rng.uniform(0.01, 0.2))
                    p = rng.uniform(0.5, 1.0, nb)
                    p /= p.sum()
                    break
                r[1::2] *= -1.0
                R = np.exp(r)
                mean = 1.0 + rng.uniform(*drift)
                if not R.min() < mean < R.max():
                    continue
                p = _tilted_probs(R, rng.uniform(0.5, 1.0, nb), mean)
                if p.min() >= min_prob:
                    break
            ids = list(range(len(S), len(S) + nb))
            for j in range(nb):
                S.append(S[v] * R[j])
                ti.append(k + 1)
                parent.append(v)
            children[v] = np.array(ids)
            probs[v] = p
            nxt.extend(ids)
        frontier = nxt
    n = len(S)
    empty_c, empty_p = np.zeros(0, dtype=int), np.zeros(0)
    tree = ScenarioTree(
        n_steps,
        T,
        np.array(S),
        np.array(ti),
        np.array(parent),
        tuple(children.get(v, empty_c) for v in range(n)),
        tuple(probs.get(v, empty_p) for v in range(n)),
    )
    return tree.validate()


def iter_leaf_paths(tree: ScenarioTree) -> Iterable[tuple[int, list[int]]]:
    for leaf in tree.leaves:
        yield int(leaf), tree.path_to(int(leaf))
