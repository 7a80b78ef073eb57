import math

import numpy as np
import pytest

import cprf


def test_forest_fit_and_predict():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(500, 2))
    y = np.sin(2 * math.pi * x[:, 0]) / 10 + rng.normal(size=500)
    forest = cprf.fit_forest(x, y, kind="ehrenfest", k=4, trees=20, rn=300, seed=3, workers=1)
    assert forest.tree_count == 20
    grid = cprf.sup_grid(2, 2)
    assert grid.shape == (64, 2)
    pred = forest.predict(grid)
    assert pred.shape == (64,)
    again = cprf.fit_forest(x, y, kind="ehrenfest", k=4, trees=20, rn=300, seed=3, workers=2)
    assert np.array_equal(pred, again.predict(grid))
    assert forest.fine_cells().shape == (256,)


def test_covariance_and_quantiles():
    table = cprf.approximate_covariance("uniform", k=1, p=2, pairs=100000, seed=1, workers=1)
    assert abs(table.v_cap - 0.375) < 3 * 0.125 / math.sqrt(100000)
    assert table.psi == pytest.approx(4 * table.v_cap)
    m = cprf.covariance_matrix(table, 1)
    assert m.shape == (4, 4)
    assert np.all(np.diag(m) == 1.0)
    betas, q = cprf.sup_quantiles(table, n_sup=20000, seed=2, workers=1)
    assert betas == [0.1, 0.05, 0.01]
    assert q[0] < q[1] < q[2]


def test_sigma_and_errors():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(2000, 2))
    y = rng.normal(size=2000)
    assert 0.9 < cprf.sigma2_shen(x, y) < 1.1
    with pytest.raises(cprf.CprfError):
        cprf.fit_forest(x, y, k=3, trees=5, rn=5000)
    with pytest.raises(cprf.CprfError):
        cprf.sup_grid(2, 2, eps=0.3)


def test_regression_and_experiment():
    vals = cprf.regression_value("m2", np.array([[0.25, 0.5]]))
    assert vals[0] == pytest.approx(0.15)
    r = cprf.run_experiment(
        seed=4, k=3, n=300, rn=200, trees=5, reps=5, cov_pairs=2000, n_sup=2000, workers=1
    )
    assert r["replications"] == 5
    assert len(r["coverage"]) == 3
    assert r["radius"][0] < r["radius"][2]
