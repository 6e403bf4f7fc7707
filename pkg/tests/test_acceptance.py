"""Acceptance criteria, each run at its stated tolerance.

Every test logs one ``criterion N: PASS|FAIL`` line (repeated in the
terminal summary) and then asserts the same condition.  Lines labelled
``companion`` run the same check on a drifted market, where the trend is
not identically zero; they are informative, not substitutes.
"""
import json
import time

import numpy as np
import pytest

from tcostlab.cps import (
    Q_MIN,
    binomial_threshold,
    critical_kappa,
    extract_cps,
    grid_feasible,
    propagate_bands,
    verify_martingale,
)
from tcostlab.dp import GridSpec, extract_shadow_price, extract_strategy, path_shadow_prices, solve
from tcostlab.experiment import ExperimentConfig, run
from tcostlab.market import GbmSpec, build_binomial, build_random_tree
from tcostlab.mz import MzPath, coupled_leaf_paths, coupled_mz_distance, d_mz
from tcostlab.oracle import TradeGrid, solve_continuous, uniqueness_probe
from tcostlab.utility import UtilitySpec
from tcostlab.wealth import FrictionParams

from conftest import flat_first_step_tree, one_step_tree

pytestmark = pytest.mark.slow

LOG = UtilitySpec("log")
SQRT = UtilitySpec("power", 0.5)
WIDE = GridSpec(pi_min=-1e3, pi_max=1e3)
KAPPA = 0.01
LEVELS = (4, 8, 16, 32, 64)
SEEDS = 2000


# -- shared instances ----------------------------------------------------


@pytest.fixture(scope="module")
def oracle_instances():
    """100 random trees (1 to 3 steps, 2 to 3 branches) solved by DP and by the oracle."""
    rng = np.random.default_rng(20240101)
    out = []
    t0 = time.perf_counter()
    for i in range(100):
        tree = build_random_tree(rng, int(rng.integers(1, 4)), max_branch=3)
        kappa = float(rng.uniform(0.002, 0.03))
        utility = SQRT if i % 2 else LOG
        params = FrictionParams(kappa)
        sol = solve(tree, utility, 1.0, params, WIDE)
        oracle, _ = solve_continuous(tree, utility, 1.0, params)
        out.append((tree, sol, oracle))
    return out, time.perf_counter() - t0


def _one_step(tree):
    sol = solve(tree, LOG, 1.0, FrictionParams(1e-9), WIDE)
    S0, (up, down) = tree.S[0], tree.S[tree.children[0]]
    p = tree.probs[0][0]
    Ru, Rd = up / S0 - 1.0, down / S0 - 1.0
    return tree, sol, -(p * Ru + (1 - p) * Rd) / (Ru * Rd)


@pytest.fixture(scope="module")
def one_step_instances():
    trees = [build_binomial(GbmSpec(100.0, 0.05, 0.2, 1.0), 1)]
    trees += [one_step_tree(100.0, [u, d], [p, 1.0 - p]) for u, d, p in [(110.0, 95.0, 0.5), (120.0, 90.0, 0.4), (130.0, 80.0, 0.45)]]
    return [_one_step(t) for t in trees]


def _lattices(mu):
    spec = GbmSpec(1.0, mu, 0.2, 1.0)
    t0 = time.perf_counter()
    sols = {n: solve(build_binomial(spec, n, recombine=True), LOG, 1.0, FrictionParams(KAPPA)) for n in LEVELS}
    return spec, sols, time.perf_counter() - t0


@pytest.fixture(scope="module")
def lattice_mu0():
    return _lattices(0.0)


@pytest.fixture(scope="module")
def lattice_mu5():
    return _lattices(0.05)


def _deltas(sols):
    v = [sols[n].value_at(1.0) for n in LEVELS]
    return np.abs(np.diff(v))


def _mz_trend(spec, sols):
    est = [
        coupled_mz_distance(spec, LOG, 1.0, FrictionParams(KAPPA), n, SEEDS, solutions=[sols[n], sols[2 * n]])
        for n in LEVELS[:-1]
    ]
    drops = [
        a.mean - b.mean > 3.0 * np.hypot(a.stderr, b.stderr) for a, b in zip(est, est[1:])
    ]
    return est, drops


# -- 1 -------------------------------------------------------------------


def test_criterion_1_oracle_equivalence(oracle_instances, acceptance_log):
    inst, elapsed = oracle_instances
    err = np.array([abs(sol.value_at(1.0) - oracle) for _, sol, oracle in inst])
    ok = err.max() <= 1e-6 and elapsed <= 60.0
    acceptance_log(
        "criterion 1 (DP vs oracle, 100 trees)", ok,
        f"max |diff| = {err.max():.2e} (tol 1e-6), runtime {elapsed:.1f}s (limit 60s)",
    )
    assert ok


# -- 2 -------------------------------------------------------------------


def test_criterion_2_frictionless_closed_form(one_step_instances, acceptance_log):
    err = []
    for tree, sol, target in one_step_instances:
        strat = extract_strategy(sol, tree, 1.0)
        pi = strat.gamma[0] * tree.S[0] / 1.0
        err.append(abs(pi - target))
    ok = max(err) <= 1e-6
    acceptance_log("criterion 2 (one-step closed form)", ok, f"max |pi - pi*| = {max(err):.2e} (tol 1e-6)")
    assert ok


def test_criterion_2_companion_flat_curvature(acceptance_log):
    # small returns make the objective flat, so even kappa = 1e-9 opens a
    # no-trade interval wider than 1e-6 around the frictionless fraction
    tree, sol, target = _one_step(one_step_tree(100.0, [105.0, 97.0], [0.55, 0.45]))
    pi = extract_strategy(sol, tree, 1.0).gamma[0] * tree.S[0]
    pb, ps = sol.no_trade_interval(0)
    ok = pb - 1e-6 <= target <= ps + 1e-6
    acceptance_log(
        "criterion 2 companion (flat curvature)", ok,
        f"|pi - pi*| = {abs(pi - target):.2e}, no-trade width {ps - pb:.2e}, pi* within 1e-6 of the interval",
    )
    assert ok


# -- 3 -------------------------------------------------------------------


def _value_trend_ok(sols):
    d = _deltas(sols)
    return bool(np.all(np.diff(d) < 0) and d[-1] <= 1e-3), d


def test_criterion_3_value_cauchy_trend(lattice_mu0, acceptance_log):
    _, sols, elapsed = lattice_mu0
    ok, d = _value_trend_ok(sols)
    ok = ok and elapsed <= 600.0
    acceptance_log(
        "criterion 3 (value Cauchy trend, mu=0)", ok,
        f"deltas {np.array2string(d, precision=3)}, runtime {elapsed:.1f}s",
    )
    assert ok


def test_criterion_3_companion_drifted(lattice_mu5, acceptance_log):
    _, sols, elapsed = lattice_mu5
    ok, d = _value_trend_ok(sols)
    acceptance_log(
        "criterion 3 companion (mu=0.05)", ok,
        f"deltas {np.array2string(d, precision=3)}, runtime {elapsed:.1f}s",
    )
    assert ok


# -- 4 -------------------------------------------------------------------


def _fmt(est):
    return ", ".join(f"{e.mean:.3e}+-{e.stderr:.1e}" for e in est)


def test_criterion_4_mz_cauchy_trend(lattice_mu0, acceptance_log):
    spec, sols, _ = lattice_mu0
    est, drops = _mz_trend(spec, sols)
    ok = all(drops)
    acceptance_log("criterion 4 (MZ Cauchy trend, mu=0)", ok, f"E d_MZ: {_fmt(est)}")
    assert ok


def test_criterion_4_companion_drifted(lattice_mu5, acceptance_log):
    spec, sols, _ = lattice_mu5
    est, drops = _mz_trend(spec, sols)
    ok = all(drops)
    acceptance_log("criterion 4 companion (mu=0.05)", ok, f"E d_MZ: {_fmt(est)}")
    assert ok


# -- 5 -------------------------------------------------------------------


def test_criterion_5_cps_certification(acceptance_log):
    ke = 0.005
    spec = GbmSpec(100.0, 0.0, 0.2, 1.0)
    thr = binomial_threshold(spec, ke, n_max=64)
    binom_ok = thr["threshold"] is not None and all(
        thr["feasible"][n] for n in range(thr["threshold"], 65)
    )
    worst_ratio = 0.0
    for n in (thr["threshold"] or 1, 8, 32, 64):
        tree = build_binomial(spec, n, recombine=True)
        system = extract_cps(tree, propagate_bands(tree, ke))
        rep = verify_martingale(tree, system, ke)
        binom_ok &= rep.ok(1e-10 * tree.S[0], Q_MIN)
        worst_ratio = max(worst_ratio, rep.max_residual / tree.S[0])

    rng = np.random.default_rng(777)
    n_grid = 50
    agree, outside_margin, verified, n_feasible = 0, 0, True, 0
    for _ in range(100):
        tree = build_random_tree(rng, 4, max_branch=3, one_sided=0.3)
        kp = float(rng.uniform(0.0, 0.03))
        bands = propagate_bands(tree, kp)
        if bands.feasible == grid_feasible(tree, kp, n_grid=n_grid):
            agree += 1
        else:
            # the gridded oracle is exact up to one grid spacing per level
            margin = tree.n_steps * 2.0 * kp / (n_grid - 1)
            outside_margin += abs(kp - critical_kappa(tree)) > margin
        if bands.feasible:
            n_feasible += 1
            system = extract_cps(tree, bands)
            rep = verify_martingale(tree, system, kp)
            verified &= rep.ok(1e-10 * tree.S[0], Q_MIN)
            worst_ratio = max(worst_ratio, rep.max_residual / tree.S[0])
    ok = bool(binom_ok and agree >= 99 and outside_margin == 0 and verified)
    acceptance_log(
        "criterion 5 (CPS certification)", ok,
        f"binomial threshold {thr['threshold']}, grid agreement {agree}/100 "
        f"({outside_margin} outside margin), {n_feasible} feasible systems verified, "
        f"max residual {worst_ratio:.1e}*S0",
    )
    assert ok


# -- 6 -------------------------------------------------------------------


def test_criterion_6_shadow_price(oracle_instances, one_step_instances, lattice_mu0, lattice_mu5, acceptance_log):
    visited = in_band = trading = touching = 0

    def tally(price, S, side, kappa, trade_mask):
        nonlocal visited, in_band, trading, touching
        lo, hi = (1.0 - kappa) * S, (1.0 + kappa) * S
        visited += price.size
        in_band += int(np.sum((price >= lo * (1 - 1e-8)) & (price <= hi * (1 + 1e-8))))
        t = trade_mask & (side != 0)
        target = (1.0 + kappa * side[t]) * S[t]
        trading += int(t.sum())
        touching += int(np.sum(np.abs(price[t] - target) <= 1e-4 * S[t]))

    explicit = [(tree, sol) for tree, sol, _ in oracle_instances[0]]
    explicit += [(tree, sol) for tree, sol, _ in one_step_instances]
    for tree, sol in explicit:
        sp = extract_shadow_price(sol, tree, 1.0)
        # random trees give every branch positive probability, so all nodes are visited
        tally(sp.price, tree.S, sp.side, sol.kappa, tree.time_index < tree.n_steps)

    for spec, sols, _ in (lattice_mu0, lattice_mu5):
        for n in LEVELS[:-1]:
            z = np.vstack([np.random.default_rng([0, i]).standard_normal(2 * n) for i in range(SEEDS)])
            pc, pf = coupled_leaf_paths(n, sols[n].tree.meta["p"], sols[2 * n].tree.meta["p"], z)
            for sol, paths in ((sols[n], pc), (sols[2 * n], pf)):
                price, side, S = path_shadow_prices(sol, paths, 1.0)
                tally(price.ravel(), S.ravel(), side.ravel(), sol.kappa, np.ones(price.size, bool))

    frac = touching / trading if trading else 1.0
    ok = in_band == visited and frac >= 0.99
    acceptance_log(
        "criterion 6 (shadow band and complementarity)", ok,
        f"in band {in_band}/{visited}, touching {touching}/{trading} trading states",
    )
    assert ok


# -- 7 -------------------------------------------------------------------


def test_criterion_7_uniqueness(acceptance_log):
    rng = np.random.default_rng(4242)
    unique = 0
    diam_ok = True
    ties, ties_resolved = 0, 0
    for i in range(100):
        tree = build_random_tree(rng, 2, max_branch=3)
        kappa = float(rng.uniform(0.002, 0.03))
        utility = SQRT if i % 2 else LOG
        params = FrictionParams(kappa)
        rep = uniqueness_probe(tree, utility, 1.0, params, TradeGrid(), epsilons=[0.0])
        rep = uniqueness_probe(tree, utility, 1.0, params, TradeGrid(), epsilons=[1e-6 * abs(rep.best)])
        unique += rep.unique
        diam_ok &= rep.diameters[0] <= 2.0 * rep.max_increment
        if not rep.unique:
            ties += 1
            jit = uniqueness_probe(tree, utility, 1.0, params, TradeGrid(jitter=1e-7), epsilons=[0.0])
            ties_resolved += jit.unique

    # constructed symmetric tie: the first step is flat, so trade timing is irrelevant
    flat = flat_first_step_tree()
    params = FrictionParams(0.005)
    tied = uniqueness_probe(flat, LOG, 1.0, params, TradeGrid(delta=0.5), epsilons=[0.0])
    broken = uniqueness_probe(flat, LOG, 1.0, params, TradeGrid(delta=0.5, jitter=1e-7), epsilons=[0.0])
    tie_ok = (not tied.unique) and broken.unique and ties_resolved == ties

    ok = bool(unique >= 95 and diam_ok and tie_ok)
    acceptance_log(
        "criterion 7 (uniqueness probe)", ok,
        f"unique {unique}/100, diameter bound {'held' if diam_ok else 'violated'}, "
        f"random ties resolved {ties_resolved}/{ties}, constructed tie "
        f"{len(tied.optimal)} -> {len(broken.optimal)} argmax",
    )
    assert ok


# -- 8 -------------------------------------------------------------------


def test_criterion_8_crra_scaling(acceptance_log):
    rng = np.random.default_rng(88)
    trees = [build_random_tree(rng, 3) for _ in range(10)]
    trees.append(build_binomial(GbmSpec(100.0, 0.05, 0.2, 1.0), 4))
    worst_v = worst_g = 0.0
    for tree in trees:
        params = FrictionParams(0.01)
        base = solve(tree, SQRT, 1.0, params, WIDE)
        g1 = extract_strategy(base, tree, 1.0).gamma
        v1 = base.value_at(1.0)
        for lam in (0.5, 2.0, 10.0):
            sol = solve(tree, SQRT, lam, params, WIDE)
            v = sol.value_at(lam)
            g = extract_strategy(sol, tree, lam).gamma
            worst_v = max(worst_v, abs(v - lam**0.5 * v1) / abs(lam**0.5 * v1))
            scale = max(np.abs(lam * g1).max(), 1e-300)
            worst_g = max(worst_g, np.abs(g - lam * g1).max() / scale)
    ok = worst_v <= 1e-10 and worst_g <= 1e-10
    acceptance_log(
        "criterion 8 (CRRA scaling, p=0.5)", ok,
        f"value rel err {worst_v:.1e}, holdings rel err {worst_g:.1e} (tol 1e-10)",
    )
    assert ok


# -- 9 -------------------------------------------------------------------


def _random_path(rng, T=1.0):
    k = int(rng.integers(1, 8))
    bp = np.concatenate([[0.0], np.sort(rng.uniform(0.0, T, k - 1))])
    bp = np.unique(bp)
    scale = 10.0 ** rng.uniform(-3, 1)
    vals = rng.normal(0.0, scale, len(bp))
    if rng.random() < 0.2:
        vals = np.round(vals, 1)
    return MzPath(T, bp, vals, float(rng.normal(0.0, scale)))


def test_criterion_9_metric_suite(acceptance_log):
    rng = np.random.default_rng(99)
    sym = tri = ins = True
    worst = 0.0
    for _ in range(10_000):
        f, g, h = (_random_path(rng) for _ in range(3))
        fg, gf = d_mz(f, g), d_mz(g, f)
        sym &= fg == gf
        slack = d_mz(f, h) - fg - d_mz(g, h)
        worst = max(worst, slack)
        tri &= slack <= 1e-12
        extra = rng.uniform(0.0, 1.0, 3)
        ins &= d_mz(f.with_breakpoints(extra), g) == fg
    ok = bool(sym and tri and ins)
    acceptance_log(
        "criterion 9 (metric suite, 1e4 triples)", ok,
        f"symmetry {'exact' if sym else 'broken'}, worst triangle slack {worst:.1e}, "
        f"insertion {'exact' if ins else 'broken'}",
    )
    assert ok


# -- 10 ------------------------------------------------------------------


def test_criterion_10_reproducibility(tmp_path, acceptance_log):
    cfg = ExperimentConfig(
        market=GbmSpec(1.0, 0.0, 0.2, 1.0), utility=LOG, x=1.0, kappa=KAPPA, eps=0.005,
        levels=(4, 8), seeds=SEEDS, seed=0,
        toggles={"values": True, "mz": True, "cps": True, "uniqueness": False},
    )
    run(cfg, out=tmp_path / "a")
    run(cfg, out=tmp_path / "b")
    a = (tmp_path / "a" / "report.json").read_bytes()
    b = (tmp_path / "b" / "report.json").read_bytes()
    ok = a == b and json.loads(a)["schema_version"] == 1
    acceptance_log("criterion 10 (reproducible report)", ok, f"{len(a)} bytes, identical={a == b}")
    assert ok
