import json

import pytest

from tcostlab.dp import solve
from tcostlab.experiment import (
    ExperimentConfig,
    ExperimentError,
    SchemaMismatch,
    config_template,
    diff_reports,
    run,
)
from tcostlab.market import ScenarioTree
from tcostlab.utility import UtilitySpec
from tcostlab.wealth import FrictionParams


def small_config(**kw):
    base = dict(config_template(), levels=[2, 4], seeds=50)
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(eps=0.01)
    with pytest.raises(ValueError):
        small_config(levels=[4, 2])
    with pytest.raises(ValueError):
        small_config(x=0.0)
    with pytest.raises(ValueError):
        small_config(levels=[2, 5])
    with pytest.raises(ValueError):
        small_config(color="blue")
    assert small_config(eps=None).eps == pytest.approx(0.005)


def test_values_only(tmp_path):
    cfg = small_config(toggles={"values": True})
    rep = run(cfg, out=tmp_path)
    assert "values" in rep and "mz" not in rep and "cps" not in rep
    assert len(rep["values"]) == 2 and len(rep["deltas"]) == 1
    assert sorted(p.name for p in tmp_path.iterdir()) == ["MANIFEST", "report.json", "values.csv"]


def test_full_run_outputs(tmp_path):
    cfg = small_config(levels=[2, 4, 8], toggles={"values": True, "mz": True, "cps": True, "uniqueness": True})
    rep = run(cfg, out=tmp_path)
    assert rep["ok"] and rep["status"] == "complete"
    assert len(rep["values"]) == 3 and len(rep["deltas"]) == 2 and len(rep["mz"]) == 2
    assert [r["n"] for r in rep["uniqueness"]] == [2]
    for name in ("report.json", "values.csv", "mz.csv", "cps.csv", "MANIFEST"):
        assert (tmp_path / name).is_file()
    manifest = json.loads((tmp_path / "MANIFEST").read_text())
    assert manifest["status"] == "complete" and "report.json" in manifest["files"]


def test_reproducible_and_self_consistent(tmp_path):
    cfg = small_config(save_trees=True)
    a = run(cfg, out=tmp_path / "a")
    run(cfg, out=tmp_path / "b", jobs=2)
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    for row in a["values"]:
        tree = ScenarioTree.from_json((tmp_path / "a" / "trees" / f"tree_{row['n']}.json").read_text())
        u = solve(tree, UtilitySpec.parse("log"), 1.0, FrictionParams(0.01)).value_at(1.0)
        assert abs(u - row["u"]) <= 1e-12


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("TCOST_LAB_SEED", "17")
    rep = run(small_config(), out=tmp_path)
    assert rep["config"]["seed"] == 17


def test_failure_writes_incomplete_manifest(tmp_path):
    # a drift far too large for a 2-step lattice fails when the tree is built
    cfg = small_config(market={"kind": "gbm", "S0": 1.0, "mu": 3.0, "sigma": 0.05, "T": 1.0})
    with pytest.raises(ExperimentError) as info:
        run(cfg, out=tmp_path)
    assert info.value.stage.startswith("build")
    manifest = json.loads((tmp_path / "MANIFEST").read_text())
    assert manifest["status"] == "incomplete" and manifest["failed_stage"].startswith("build")
    assert json.loads((tmp_path / "report.json").read_text())["status"] == "incomplete"


def test_diff_reports_rules(tmp_path):
    rep = run(small_config(), out=tmp_path)
    a = json.loads(json.dumps(rep))
    assert diff_reports(a, a) == []
    b = json.loads(json.dumps(rep))
    b["values"][0]["u"] *= 1 + 1e-7
    flagged = diff_reports(a, b)
    assert [d["path"] for d in flagged] == ["values[0].u"]
    c = json.loads(json.dumps(rep))
    c["mz"][0]["stderr"] = a["mz"][0]["stderr"] = 0.01
    c["mz"][0]["mean"] += 0.02
    assert diff_reports(a, c) == []
    c["mz"][0]["mean"] += 0.05
    assert [d["path"] for d in diff_reports(a, c)] == ["mz[0].mean"]
    with pytest.raises(SchemaMismatch):
        diff_reports(a, dict(a, schema_version=2))


def test_fbm_market_values_and_cps(tmp_path):
    cfg = ExperimentConfig.from_dict(
        dict(
            config_template(),
            market={"kind": "fbm", "S0": 1.0, "hurst": 0.6, "scale": 0.2, "T": 1.0, "branching": 3, "seed": 3},
            levels=[2, 4],
            toggles={"values": True, "cps": True},
            pi_min=-1e3,
            pi_max=1e3,
        )
    )
    rep = run(cfg, out=tmp_path)
    assert rep["ok"] and len(rep["cps"]) == 2


def test_shadow_invariant_fails_without_robust_no_arbitrage(tmp_path):
    # strong memory: some nodes move up on every branch
    cfg = ExperimentConfig.from_dict(
        dict(
            config_template(),
            market={"kind": "fbm", "S0": 1.0, "hurst": 0.7, "scale": 0.2, "T": 1.0, "branching": 3, "seed": 3},
            levels=[4],
            toggles={"values": True, "cps": True},
            pi_min=-1e3,
            pi_max=1e3,
        )
    )
    rep = run(cfg, out=tmp_path)
    assert not rep["cps"][0]["feasible"]
    assert not rep["invariants"]["shadow_in_band"] and not rep["ok"]
