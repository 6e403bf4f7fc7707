import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tcostlab.estimators import CpsCertifier, TransactionCostOptimizer, check_kappa, check_tree
from tcostlab.market import GbmSpec, build_binomial, build_random_tree
from tcostlab.mz import lattice_ids


def test_params_round_trip():
    est = TransactionCostOptimizer(utility="power:0.5", kappa=0.02)
    assert est.get_params()["kappa"] == 0.02
    c = clone(est).set_params(kappa=0.03)
    assert c.kappa == 0.03 and est.kappa == 0.02


def test_optimizer_explicit_tree(rng):
    tree = build_random_tree(rng, 2)
    est = TransactionCostOptimizer(kappa=0.01).fit(tree.to_dict())
    g = est.predict()
    assert g.shape == (tree.n_nodes,) and not g[tree.leaves].any()
    assert est.score() == est.value_
    with pytest.raises(NotFittedError):
        TransactionCostOptimizer().predict()


def test_optimizer_lattice_paths():
    lat = build_binomial(GbmSpec(1.0, 0.05, 0.2, 1.0), 4, recombine=True)
    est = TransactionCostOptimizer(kappa=0.01).fit(lat)
    paths = lattice_ids(np.array([[0, 0, 1, 1, 2], [0, 1, 2, 3, 4]]))
    assert est.predict(paths).shape == (2, 5)


def test_certifier():
    tree = build_binomial(GbmSpec(100.0, 0.0, 0.2, 1.0), 3)
    cert = CpsCertifier(kappa=0.01).fit(tree)
    assert cert.feasible_ and cert.kappa_eff_ == 0.005
    assert cert.report_.ok(1e-8, 1e-6)
    M = cert.transform()
    assert np.all(np.abs(M - tree.S) <= 0.005 * tree.S + 1e-12)


def test_validation_helpers():
    with pytest.raises(ValueError):
        check_kappa(1.5)
    with pytest.raises(TypeError):
        check_tree(3)
    with pytest.raises(ValueError):
        CpsCertifier(kappa=0.01, eps=0.02).fit(build_binomial(GbmSpec(1.0, 0.0, 0.2, 1.0), 1))
