"""Config-driven refinement studies and their on-disk reports.

A run solves the optimal investment problem on a sequence of refined
markets and records, per level, the value, the no-trade interval at the
root, the shadow-price checks and the consistent-price-system certificate;
per adjacent pair of levels it records the value difference and the
coupled Meyer-Zheng distance between the optimal holdings.

``report.json`` is fully deterministic for a fixed config and seed.  Wall
times live in ``MANIFEST`` so that reports can be compared byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cps import Q_MIN, critical_kappa, extract_cps, propagate_bands, verify_martingale
from .dp import (
    GridSpec,
    extract_shadow_price,
    extract_strategy,
    path_shadow_prices,
    solve,
)
from .market import FbmSpec, GbmSpec, build_binomial, build_fbm_tree, spec_from_dict
from .mz import coupled_mz_distance, lattice_ids
from .oracle import TradeGrid, uniqueness_probe
from .utility import UtilitySpec
from .wealth import FrictionParams

__all__ = [
    "SCHEMA_VERSION",
    "ExperimentConfig",
    "ExperimentError",
    "SchemaMismatch",
    "run",
    "diff_reports",
    "config_template",
]

SCHEMA_VERSION = 1
SEED_ENV = "TCOST_LAB_SEED"
TOGGLES = ("values", "mz", "cps", "uniqueness")
# paths sampled per lattice for the shadow-price checks
SHADOW_PATHS = 200
# explicit trees up to this depth are small enough for the uniqueness probe
UNIQUENESS_MAX_STEPS = 3


class ExperimentError(RuntimeError):
    """A stage failed; ``stage`` names it and partial outputs are on disk."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class SchemaMismatch(ValueError):
    pass


@dataclass
class ExperimentConfig:
    market: GbmSpec | FbmSpec
    utility: UtilitySpec
    x: float
    kappa: float
    levels: tuple
    eps: float | None = None
    seeds: int = 2000
    seed: int = 0
    out: str | None = None
    toggles: dict = field(default_factory=lambda: {"values": True, "mz": True, "cps": True, "uniqueness": False})
    suboptimality: float = 0.0
    grid_points: int = 65
    pi_min: float = -0.5
    pi_max: float = 3.0
    q_min: float = Q_MIN
    save_trees: bool = False

    def __post_init__(self):
        if isinstance(self.market, dict):
            self.market = spec_from_dict(self.market)
        if isinstance(self.utility, str):
            self.utility = UtilitySpec.parse(self.utility)
        self.levels = tuple(int(n) for n in self.levels)
        if self.eps is None:
            self.eps = self.kappa / 2.0
        toggles = {t: False for t in TOGGLES}
        unknown = set(self.toggles) - set(TOGGLES)
        if unknown:
            raise ValueError(f"unknown toggles {sorted(unknown)}")
        toggles.update({k: bool(v) for k, v in self.toggles.items()})
        self.toggles = toggles
        self.validate()

    def validate(self) -> "ExperimentConfig":
        lv = self.levels
        if not lv or any(n < 1 for n in lv) or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError(f"levels must be positive and strictly increasing, got {list(lv)}")
        if not (self.x > 0 and math.isfinite(self.x)):
            raise ValueError(f"x must be positive, got {self.x}")
        if not 0.0 < self.kappa < 1.0:
            raise ValueError(f"kappa must lie in (0, 1), got {self.kappa}")
        if not 0.0 < self.eps < self.kappa:
            raise ValueError(f"eps must lie in (0, kappa), got {self.eps}")
        if self.seeds < 2:
            raise ValueError("at least two Monte-Carlo seeds are required")
        if self.suboptimality < 0:
            raise ValueError("suboptimality must be non-negative")
        if self.toggles["mz"]:
            if not isinstance(self.market, GbmSpec):
                raise ValueError("coupled Meyer-Zheng distances need a binomial (gbm) market")
            if any(b != 2 * a for a, b in zip(lv, lv[1:])):
                raise ValueError("coupled Meyer-Zheng distances need doubling levels")
        return self

    @property
    def kappa_eff(self) -> float:
        return self.kappa - self.eps

    def to_dict(self) -> dict:
        return {
            "market": self.market.to_dict(),
            "utility": str(self.utility),
            "x": self.x,
            "kappa": self.kappa,
            "eps": self.eps,
            "levels": list(self.levels),
            "seeds": self.seeds,
            "seed": self.seed,
            "toggles": dict(self.toggles),
            "suboptimality": self.suboptimality,
            "grid_points": self.grid_points,
            "pi_min": self.pi_min,
            "pi_max": self.pi_max,
            "q_min": self.q_min,
            "save_trees": self.save_trees,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- per-level work ----------------------------------------------------


def _build(cfg: ExperimentConfig, n: int):
    if isinstance(cfg.market, GbmSpec):
        return build_binomial(cfg.market, n, recombine=True)
    return build_fbm_tree(cfg.market, n)


def _shadow_checks(cfg, sol, tree, n):
    """Band and complementarity statistics of the shadow prices."""
    k = cfg.kappa
    if tree.recombining:
        m = min(cfg.seeds, SHADOW_PATHS)
        u = np.vstack([np.random.default_rng([cfg.seed, i]).uniform(size=n) for i in range(m)])
        downs = np.hstack([np.zeros((m, 1), dtype=int), np.cumsum(u >= tree.meta["p"], axis=1)])
        paths = lattice_ids(downs)
        price, side, S = path_shadow_prices(sol, paths, cfg.x)
        price, side, S = price.ravel(), side.ravel(), S.ravel()
    else:
        extract_strategy(sol, tree, cfg.x)
        sp = extract_shadow_price(sol, tree, cfg.x)
        internal = tree.time_index < tree.n_steps
        price, side, S = sp.price[internal], sp.side[internal], tree.S[internal]
    r = price / S
    in_band = (r >= (1.0 - k) * (1.0 - 1e-8)) & (r <= (1.0 + k) * (1.0 + 1e-8))
    trading = side != 0
    touch = np.abs(r - (1.0 + k * side)) <= 1e-4
    return {
        "n": n,
        "visited": int(len(r)),
        "in_band_fraction": float(in_band.mean()),
        "trading": int(trading.sum()),
        "touch_fraction": float(touch[trading].mean()) if trading.any() else 1.0,
    }


def _level(cfg: ExperimentConfig, n: int) -> dict:
    """Everything that only needs one level; picklable result."""
    out: dict = {"n": n, "timings": {}}
    stage = "build"
    try:
        t0 = time.perf_counter()
        tree = _build(cfg, n)
        out["tree"] = tree
        out["timings"]["build"] = time.perf_counter() - t0
        params = FrictionParams(cfg.kappa)
        if cfg.toggles["values"] or cfg.toggles["mz"]:
            stage = "solve"
            t0 = time.perf_counter()
            sol = solve(tree, cfg.utility, cfg.x, params, GridSpec(n_points=cfg.grid_points, pi_min=cfg.pi_min, pi_max=cfg.pi_max))
            out["solution"] = sol
            pb, ps = sol.no_trade_interval(0)
            out["value"] = {
                "n": n,
                "n_nodes": tree.n_nodes,
                "u": sol.value_at(cfg.x),
                "pi_buy": pb,
                "pi_sell": ps,
            }
            out["timings"]["solve"] = time.perf_counter() - t0
            stage = "shadow_price"
            t0 = time.perf_counter()
            out["shadow"] = _shadow_checks(cfg, sol, tree, n)
            out["timings"]["shadow_price"] = time.perf_counter() - t0
        if cfg.toggles["cps"]:
            stage = "cps"
            t0 = time.perf_counter()
            ke = cfg.kappa_eff
            bands = propagate_bands(tree, ke, cfg.q_min)
            row = {
                "n": n,
                "kappa_eff": ke,
                "feasible": bands.feasible,
                "witness": bands.witness,
                "critical_kappa": critical_kappa(tree, cfg.q_min, tol=1e-9),
                "residual": None,
                "band_violation": None,
            }
            if bands.feasible:
                rep = verify_martingale(tree, extract_cps(tree, bands), ke)
                row["residual"] = rep.max_residual
                row["band_violation"] = rep.max_band_violation
                row["min_q"] = rep.min_q
            out["cps"] = row
            out["timings"]["cps"] = time.perf_counter() - t0
        if cfg.toggles["uniqueness"] and n <= UNIQUENESS_MAX_STEPS and isinstance(cfg.market, GbmSpec):
            stage = "uniqueness"
            t0 = time.perf_counter()
            explicit = build_binomial(cfg.market, n)
            rep = uniqueness_probe(explicit, cfg.utility, cfg.x, params, TradeGrid())
            out["uniqueness"] = {
                "n": n,
                "unique": rep.unique,
                "n_optimal": len(rep.optimal),
                "diameters": rep.diameters.tolist(),
                "epsilons": rep.epsilons.tolist(),
                "max_increment": rep.max_increment,
            }
            out["timings"]["uniqueness"] = time.perf_counter() - t0
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        out["error"] = (f"{stage}[n={n}]", exc)
    return out


# -- assembly ------------------------------------------------------------


def _finite(x) -> bool:
    return x is None or (isinstance(x, (bool, int, str))) or math.isfinite(x)


def _invariants(report: dict, cfg: ExperimentConfig) -> dict:
    inv = {}
    rows = report.get("values", []) + report.get("deltas", []) + report.get("mz", []) + report.get("cps", [])
    inv["finite"] = all(_finite(v) for r in rows for v in r.values())
    if "shadow" in report:
        inv["shadow_in_band"] = all(r["in_band_fraction"] == 1.0 for r in report["shadow"])
        inv["shadow_touch"] = all(r["touch_fraction"] >= 0.99 for r in report["shadow"])
    if "cps" in report:
        tol = 1e-10 * float(cfg.market.S0)
        inv["cps_certificates"] = all(
            (not r["feasible"]) or (r["residual"] <= tol and r["band_violation"] <= tol)
            for r in report["cps"]
        )
    return inv


def _write_csv(path: Path, rows: list, columns: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _emit(out_dir: Path, report: dict, manifest: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    (out_dir / "report.json").write_text(_dump(report))
    files["report.json"] = report
    if report.get("values"):
        deltas = {r["n"]: r["delta"] for r in report.get("deltas", [])}
        rows = [dict(r, delta=deltas.get(r["n"])) for r in report["values"]]
        _write_csv(out_dir / "values.csv", rows, ["n", "n_nodes", "u", "delta", "pi_buy", "pi_sell"])
    if report.get("mz"):
        _write_csv(out_dir / "mz.csv", report["mz"], ["n", "n_next", "mean", "stderr", "seeds"])
    if report.get("cps"):
        cols = ["n", "kappa_eff", "feasible", "witness", "critical_kappa", "residual", "band_violation"]
        _write_csv(out_dir / "cps.csv", report["cps"], cols)
    digests = {}
    for name in sorted(p.name for p in out_dir.iterdir()):
        if name == "MANIFEST" or not (out_dir / name).is_file():
            continue
        digests[name] = hashlib.sha256((out_dir / name).read_bytes()).hexdigest()
    manifest = dict(manifest, files=digests)
    (out_dir / "MANIFEST").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def run(config: ExperimentConfig, out: str | os.PathLike | None = None, jobs: int = 1) -> dict:
    """Run a refinement study and write its artifacts.

    Returns the report dictionary; ``report["ok"]`` is True iff every
    invariant holds.  Raises :class:`ExperimentError` after writing the
    partial outputs and an incomplete ``MANIFEST`` when a stage fails.
    """
    cfg = config
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and env_seed != "":
        cfg = ExperimentConfig.from_dict(dict(cfg.to_dict(), seed=int(env_seed)))
    out_dir = Path(out if out is not None else (cfg.out or "tcost-lab-out"))
    started = time.perf_counter()
    report: dict = {
        "schema": "tcost-lab/report",
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
    }
    timings: dict = {}
    failure = None

    if jobs > 1 and len(cfg.levels) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_level, [cfg] * len(cfg.levels), cfg.levels))
    else:
        results = []
        for n in cfg.levels:
            results.append(_level(cfg, n))
            if "error" in results[-1]:
                break
    done = []
    for res in results:
        timings[f"n={res['n']}"] = res["timings"]
        if "error" in res:
            failure = res["error"]
            break
        done.append(res)

    if cfg.toggles["values"]:
        report["values"] = [r["value"] for r in done]
        report["deltas"] = [
            {"n": a["n"], "n_next": b["n"], "delta": abs(b["value"]["u"] - a["value"]["u"])}
            for a, b in zip(done, done[1:])
        ]
        report["shadow"] = [r["shadow"] for r in done]
    if cfg.toggles["cps"]:
        report["cps"] = [r["cps"] for r in done]
    if cfg.toggles["uniqueness"]:
        report["uniqueness"] = [r["uniqueness"] for r in done if "uniqueness" in r]
    if cfg.toggles["mz"] and failure is None:
        report["mz"] = []
        params = FrictionParams(cfg.kappa)
        for a, b in zip(done, done[1:]):
            t0 = time.perf_counter()
            try:
                est = coupled_mz_distance(
                    cfg.market,
                    cfg.utility,
                    cfg.x,
                    params,
                    a["n"],
                    cfg.seeds,
                    seed=cfg.seed,
                    solutions=(a["solution"], b["solution"]),
                    suboptimality=cfg.suboptimality,
                )
            except Exception as exc:  # noqa: BLE001
                failure = (f"mz[n={a['n']}]", exc)
                break
            report["mz"].append(dict(est.to_dict(), n_next=b["n"]))
            timings[f"mz n={a['n']}"] = time.perf_counter() - t0

    if cfg.save_trees:
        tree_dir = out_dir / "trees"
        tree_dir.mkdir(parents=True, exist_ok=True)
        for r in done:
            (tree_dir / f"tree_{r['n']}.json").write_text(r["tree"].to_json())

    report["invariants"] = _invariants(report, cfg)
    report["ok"] = failure is None and all(report["invariants"].values())
    report["status"] = "complete" if failure is None else "incomplete"
    manifest = {
        "status": report["status"],
        "wall_time": time.perf_counter() - started,
        "timings": timings,
        "jobs": jobs,
    }
    if failure is not None:
        report["failed_stage"] = failure[0]
        manifest["failed_stage"] = failure[0]
        manifest["error"] = f"{type(failure[1]).__name__}: {failure[1]}"
    _emit(out_dir, report, manifest)
    if failure is not None:
        raise ExperimentError(*failure)
    return report


# -- regression diffs ----------------------------------------------------

MC_FIELDS = {"mean"}
SKIP_FIELDS = {"config", "invariants", "ok", "status"}


def diff_reports(a: dict, b: dict, rtol: float = 1e-9, n_se: float = 3.0) -> list:
    """Cells that differ between two reports.

    Deterministic numbers are compared at ``rtol`` relative difference;
    Monte-Carlo means at ``n_se`` combined standard errors.  Rows are
    matched by position within each table.
    """
    for r in (a, b):
        if r.get("schema_version") != SCHEMA_VERSION:
            raise SchemaMismatch(f"unsupported schema version {r.get('schema_version')!r}")
    diffs = []

    def cell(path, x, y, tol_abs=None):
        if isinstance(x, bool) or isinstance(y, bool) or not isinstance(x, (int, float)) or not isinstance(y, (int, float)):
            if x != y:
                diffs.append({"path": path, "a": x, "b": y, "kind": "changed"})
            return
        if tol_abs is not None:
            if abs(x - y) > tol_abs:
                diffs.append({"path": path, "a": x, "b": y, "kind": "monte_carlo", "abs": abs(x - y)})
            return
        scale = max(abs(x), abs(y))
        rel = 0.0 if scale == 0 else abs(x - y) / scale
        if rel > rtol:
            diffs.append({"path": path, "a": x, "b": y, "kind": "deterministic", "rel": rel})

    for table in sorted((set(a) | set(b)) - SKIP_FIELDS):
        ta, tb = a.get(table), b.get(table)
        if not isinstance(ta, list) or not isinstance(tb, list):
            if ta != tb:
                diffs.append({"path": table, "a": ta, "b": tb, "kind": "changed"})
            continue
        if len(ta) != len(tb):
            diffs.append({"path": table, "a": len(ta), "b": len(tb), "kind": "rows"})
        for i, (ra, rb) in enumerate(zip(ta, tb)):
            for key in sorted(set(ra) | set(rb)):
                path = f"{table}[{i}].{key}"
                x, y = ra.get(key), rb.get(key)
                if key in MC_FIELDS and "stderr" in ra and "stderr" in rb:
                    se = math.hypot(ra["stderr"], rb["stderr"])
                    cell(path, x, y, tol_abs=n_se * se)
                elif key == "stderr":
                    continue
                elif isinstance(x, list) or isinstance(y, list):
                    if x is None or y is None or len(x) != len(y):
                        diffs.append({"path": path, "a": x, "b": y, "kind": "changed"})
                    else:
                        for j, (u, v) in enumerate(zip(x, y)):
                            cell(f"{path}[{j}]", u, v)
                else:
                    cell(path, x, y)
    return diffs


def config_template() -> dict:
    """A small runnable config, useful as a starting point."""
    cfg = ExperimentConfig(
        market=GbmSpec(S0=1.0, mu=0.05, sigma=0.2, T=1.0),
        utility=UtilitySpec.parse("log"),
        x=1.0,
        kappa=0.01,
        eps=0.005,
        levels=(4, 8, 16),
        seeds=2000,
    )
    return cfg.to_dict()

