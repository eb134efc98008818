import numpy as np
import pytest
import scipy.interpolate
import scipy.special

from spectf.simulation import (BenchmarkConfig, ScenarioSpec, bspline_basis, clamped_knots,
                               covariate_basis, gen_functional_covariates, gen_scenario, mise,
                               native_grid, run_table1, target_function)


def test_basis_partition_of_unity():
    B = covariate_basis(100)
    assert B.shape == (100, 14)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-10)


def test_basis_matches_scipy():
    t = clamped_knots(np.linspace(0, 1, 12)[1:-1])
    x = np.linspace(0, 1, 77)
    for i in range(14):
        c = np.zeros(14)
        c[i] = 1.0
        ref = scipy.interpolate.BSpline(t, c, 3, extrapolate=False)(x)
        ref[-1] = 1.0 if i == 13 else 0.0   # scipy leaves the closed right end undefined
        np.testing.assert_allclose(bspline_basis(x, t)[:, i], ref, atol=1e-12)


def test_covariates_deterministic_and_low_rank():
    X = gen_functional_covariates(250, 100, 3)
    np.testing.assert_array_equal(X, gen_functional_covariates(250, 100, 3))
    assert not np.array_equal(X, gen_functional_covariates(250, 100, 4))
    assert np.linalg.matrix_rank(X) == 14
    with pytest.raises(ValueError):
        gen_functional_covariates(0, 10, 1)


def test_zero_coefficients_give_zero_curve():
    assert np.all(np.zeros(14) @ covariate_basis(50).T == 0)


def test_target_values():
    p = 101   # puts omega = 0 and +-1 on the [-5, 5] grid
    w = native_grid("f2", p)
    f2 = target_function("f2", p)
    assert f2[np.argmin(np.abs(w))] == pytest.approx(1.0)
    assert f2[np.argmin(np.abs(w - 1))] == pytest.approx(0.0, abs=1e-12)
    assert f2[np.argmin(np.abs(w + 1))] == pytest.approx(0.0, abs=1e-12)
    f3 = target_function("f3", p)
    assert f3[np.argmin(np.abs(w))] == 0.5
    assert f3.min() >= -0.3 and f3.max() <= 0.5
    assert np.any(f3 == -0.3)
    f1 = target_function("f1", p)
    assert f1.shape == (p,) and np.all(np.isfinite(f1))
    with pytest.raises(ValueError):
        target_function("f2", 7)
    with pytest.raises(ValueError):
        target_function("f4", 50)


def test_noiseless_and_snr():
    X = gen_functional_covariates(250, 100, 1)
    d = gen_scenario(ScenarioSpec("a", "f2", noiseless=True), X)
    np.testing.assert_array_equal(d.y, X @ d.f_true)
    ratios = []
    for seed in range(40):
        d = gen_scenario(ScenarioSpec("a", "f2", seed=seed), X)
        ratios.append(np.std(d.mu_true) / np.std(d.y - d.mu_true))
    assert abs(np.mean(ratios) / 4.0 - 1.0) < 0.05


def test_scenario_b_scalars_are_independent_standard_normal():
    n = 100000
    X = np.zeros((n, 10))
    d = gen_scenario(ScenarioSpec("b", "f2", n=n, p=10, seed=2), X)
    C = np.cov(d.Z, rowvar=False)
    np.testing.assert_allclose(np.diag(C), 1.0, atol=0.02)
    np.testing.assert_allclose(C - np.diag(np.diag(C)), 0.0, atol=0.015)
    np.testing.assert_allclose(d.Z.mean(axis=0), 0.0, atol=0.015)


def test_scenario_c_bernoulli_mean():
    X = gen_functional_covariates(20000, 100, 5)
    d = gen_scenario(ScenarioSpec("c", "f2", n=20000, seed=3), X)
    pbar = scipy.special.expit(d.mu_true)
    se = np.sqrt(np.mean(pbar * (1 - pbar)) / d.y.size)
    assert set(np.unique(d.y)) <= {0.0, 1.0}
    assert abs(d.y.mean() - pbar.mean()) <= 3 * se


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec("d")
    with pytest.raises(ValueError):
        ScenarioSpec("b", gamma=(1.0,))
    with pytest.raises(ValueError):
        ScenarioSpec(snr=0)


def test_mise():
    f = np.sin(np.linspace(0, 3, 50))
    assert mise(f, f) == 0.0
    assert mise(f + 1e-3, f) > 0
    g = np.linspace(0, 1, 200)
    # every point carries weight h = 1/(p-1), so the edge excess is exactly 1/(p-1)
    assert abs(mise(np.ones(200), np.zeros(200), g) - 1.0) <= 1 / 199 + 1e-12
    assert mise(f + 1, f) == 50.0
    with pytest.raises(ValueError):
        mise(f, f[:-1])
    with pytest.raises(ValueError):
        mise(f, f, np.r_[0.0, np.cumsum(np.arange(1.0, 50.0))])


def test_mise_refinement():
    def err(p):
        g = np.linspace(0, 1, p)
        return mise(np.sin(3 * g) + g ** 2, np.cos(2 * g), g)
    assert err(400) == pytest.approx(err(800), rel=0.01)


def test_benchmark_small_run_is_thread_invariant():
    kw = dict(n=60, p=30, cells=(("a", "f2", ("TF-4", "TF-1", "SPL")), ("c", "f1", ("TF-1",))),
              n_lambda=8, n_lambda_spline=8)
    a = run_table1(reps=10, seed=3, threads=1, **kw)
    b = run_table1(reps=10, seed=3, threads=3, **kw)
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == "scenario,function,estimator,mean_mise,se_mise,reps,seed"
    assert len(lines) == 5
    row = a.lookup("a", "f2", "TF-4")
    assert row["reps"] == 10 and row["mean_mise"] > 0
    assert np.isclose(row["se_mise"], np.std(a.mise[("a", "f2", "TF-4")], ddof=1) / np.sqrt(10))
    with pytest.raises(ValueError):
        run_table1(reps=5)


def test_cell_results_do_not_depend_on_other_cells():
    kw = dict(n=60, p=30, n_lambda=8)
    one = run_table1(reps=10, seed=1, cells=(("a", "f3", ("TF-4",)),), **kw)
    two = run_table1(reps=10, seed=1, cells=(("b", "f1", ("TF-1",)), ("a", "f3", ("TF-4", "TF-1"))),
                     **kw)
    np.testing.assert_array_equal(one.mise[("a", "f3", "TF-4")], two.mise[("a", "f3", "TF-4")])


def test_full_product_cells():
    cfg = BenchmarkConfig()
    assert len(cfg.cell_list()) == 9
    assert sum(len(c[2]) for c in cfg.cell_list()) == 36
