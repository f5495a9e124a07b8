"""Regression engine against independent brute-force oracles."""

import numpy as np
import pytest

from rdagg.errors import ConfigurationError, ConvergenceError
from rdagg.regress import (
    RegressionProblem,
    absorb_fixed_effects,
    fixed_effect_dof,
    hc1_cov,
    residualize,
    tsls_fit,
    wls_fit,
)


def normal_equations(y, X, w):
    """Oracle: solve (X'WX) b = X'W y directly."""
    A = (X * w[:, None]).T @ X
    return np.linalg.solve(A, (X * w[:, None]).T @ y)


def random_problem(rng, n=50, p=4):
    X = rng.normal(size=(n, p))
    X[:, 0] = 1.0
    y = rng.normal(size=n)
    w = rng.uniform(0.1, 3.0, size=n)
    return y, X, w


def make(y, X, w, labels=None, **kw):
    labels = labels or [f"x{j}" for j in range(X.shape[1])]
    return RegressionProblem(y, X, labels, w, **kw)


class TestWls:
    def test_intercept_only_is_weighted_mean(self):
        fit = wls_fit(make(np.array([1.0, 2.0, 3.0]), np.ones((3, 1)), np.ones(3)))
        assert fit.coefficients["x0"] == pytest.approx(2.0, abs=1e-14)

    def test_exact_line(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        y = 2.0 * x
        X = np.column_stack([np.ones(4), x])
        fit = wls_fit(make(y, X, np.ones(4), labels=["const", "x"]))
        assert fit.coefficients["x"] == pytest.approx(2.0, abs=1e-12)
        assert fit.coefficients["const"] == pytest.approx(0.0, abs=1e-12)
        assert np.max(np.abs(fit.residuals)) < 1e-12
        assert all(se == pytest.approx(0.0, abs=1e-12) for se in fit.robust_se.values())

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            y, X, w = random_problem(rng)
            fit = wls_fit(make(y, X, w))
            expected = normal_equations(y, X, w)
            got = np.array([fit.coefficients[f"x{j}"] for j in range(4)])
            np.testing.assert_allclose(got, expected, rtol=1e-10)

    def test_residuals_weight_orthogonal(self):
        rng = np.random.default_rng(1)
        y, X, w = random_problem(rng)
        fit = wls_fit(make(y, X, w))
        for j in range(X.shape[1]):
            scale = np.linalg.norm(X[:, j])
            assert abs(np.sum(w * fit.residuals * X[:, j])) <= 1e-8 * scale

    def test_collinear_column_dropped_in_order(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=30)
        X = np.column_stack([np.ones(30), x, 2 * x])
        fit = wls_fit(make(rng.normal(size=30), X, np.ones(30), labels=["c", "x", "x2"]))
        assert fit.dropped_columns == ["x2"]
        assert np.isnan(fit.coefficients["x2"])

    def test_weight_scale_invariance(self):
        rng = np.random.default_rng(3)
        y, X, w = random_problem(rng)
        a = wls_fit(make(y, X, w))
        b = wls_fit(make(y, X, 17.5 * w))
        for lab in a.coefficients:
            assert a.coefficients[lab] == pytest.approx(b.coefficients[lab], rel=1e-10)
            assert a.robust_se[lab] == pytest.approx(b.robust_se[lab], rel=1e-10)

    def test_zero_weight_rows_ignored(self):
        rng = np.random.default_rng(4)
        y, X, w = random_problem(rng, n=60)
        w[:10] = 0.0
        full = wls_fit(make(y, X, w))
        trimmed = wls_fit(make(y[10:], X[10:], w[10:]))
        for lab in full.coefficients:
            assert full.coefficients[lab] == pytest.approx(trimmed.coefficients[lab], rel=1e-10)
        assert full.n_obs == trimmed.n_obs == 50

    def test_errors_are_distinct(self):
        with pytest.raises(ConfigurationError, match="empty sample"):
            wls_fit(make(np.array([]), np.empty((0, 1)), np.array([])))
        with pytest.raises(ConfigurationError, match="all weights are zero"):
            wls_fit(make(np.array([1.0, 2.0]), np.ones((2, 1)), np.zeros(2)))
        with pytest.raises(ConfigurationError, match="does not match"):
            wls_fit(make(np.array([1.0, 2.0, 3.0]), np.ones((2, 1)), np.ones(2)))


class TestTsls:
    def test_instrument_equal_to_endogenous_collapses_to_wls(self):
        rng = np.random.default_rng(5)
        n = 80
        x = rng.normal(size=n)
        W = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = 1.0 + 2.0 * x + rng.normal(size=n)
        X = np.column_stack([x, W])
        w = rng.uniform(0.5, 2.0, size=n)
        labels = ["x", "const", "w1"]
        ols = wls_fit(make(y, X, w, labels=labels))
        iv = tsls_fit(
            make(y, X, w, labels=labels, endogenous=["x"], instruments=x[:, None])
        )
        assert iv.coefficients["x"] == pytest.approx(ols.coefficients["x"], abs=1e-12)

    def test_ratio_of_covariances_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            n = 70
            W = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
            z = rng.normal(size=n)
            x = 0.8 * z + rng.normal(size=n)
            y = 1.5 * x + W @ np.array([0.3, -0.2, 0.4]) + rng.normal(size=n)
            w = rng.uniform(0.2, 2.0, size=n)
            X = np.column_stack([x, W])
            fit = tsls_fit(
                make(y, X, w, labels=["x", "c", "w1", "w2"], endogenous=["x"],
                     instruments=z[:, None])
            )
            y_p = residualize(y, W, w)
            x_p = residualize(x, W, w)
            z_p = residualize(z, W, w)
            oracle = np.sum(w * z_p * y_p) / np.sum(w * z_p * x_p)
            assert fit.coefficients["x"] == pytest.approx(oracle, rel=1e-10)

    def test_recovers_true_effect_in_simulation(self):
        rng = np.random.default_rng(7)
        n = 10_000
        z = rng.normal(size=n)
        x = z + rng.normal(size=n)
        y = 3.0 * x + rng.normal(size=n)
        X = np.column_stack([x, np.ones(n)])
        fit = tsls_fit(
            make(y, X, np.ones(n), labels=["x", "c"], endogenous=["x"],
                 instruments=z[:, None])
        )
        assert abs(fit.coefficients["x"] - 3.0) < 3 * fit.robust_se["x"]
        assert fit.first_stage.partial_f > 100

    def test_zero_first_stage_reports_non_finite(self):
        rng = np.random.default_rng(8)
        n = 50
        x = rng.normal(size=n)
        z = np.ones(n)  # collinear with the constant: no instrument variation
        y = rng.normal(size=n)
        X = np.column_stack([x, np.ones(n)])
        fit = tsls_fit(
            make(y, X, np.ones(n), labels=["x", "c"], endogenous=["x"],
                 instruments=z[:, None])
        )
        assert np.isnan(fit.coefficients["x"])
        assert any("non-finite" in note or "vanished" in note for note in fit.notes)

    def test_weak_instrument_is_a_warning_not_an_error(self):
        rng = np.random.default_rng(9)
        n = 200
        z = rng.normal(size=n)
        x = 0.01 * z + rng.normal(size=n)
        y = rng.normal(size=n)
        X = np.column_stack([x, np.ones(n)])
        fit = tsls_fit(
            make(y, X, np.ones(n), labels=["x", "c"], endogenous=["x"],
                 instruments=z[:, None])
        )
        assert any("weak instrument" in note for note in fit.notes)
        assert np.isfinite(fit.coefficients["x"])

    def test_overidentified_rejected(self):
        rng = np.random.default_rng(10)
        n = 40
        x = rng.normal(size=n)
        X = np.column_stack([x, np.ones(n)])
        with pytest.raises(ConfigurationError, match="one instrument per endogenous"):
            tsls_fit(
                make(rng.normal(size=n), X, np.ones(n), labels=["x", "c"],
                     endogenous=["x"], instruments=rng.normal(size=(n, 2)))
            )


class TestResidualize:
    def test_on_itself_gives_zero(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=40)
        out = residualize(x, x[:, None], np.ones(40))
        assert np.max(np.abs(out)) < 1e-10

    def test_on_intercept_demeans(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=40)
        w = rng.uniform(0.5, 2.0, size=40)
        out = residualize(x, np.ones((40, 1)), w)
        np.testing.assert_allclose(out, x - np.sum(w * x) / np.sum(w), rtol=1e-12)

    def test_frisch_waugh(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            n = 60
            W = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
            x = rng.normal(size=n)
            y = rng.normal(size=n)
            w = rng.uniform(0.1, 2.0, size=n)
            joint = wls_fit(
                make(y, np.column_stack([x, W]), w, labels=["x", "c", "a", "b", "d"])
            )
            x_p = residualize(x, W, w)
            y_p = residualize(y, W, w)
            partial = np.sum(w * x_p * y_p) / np.sum(w * x_p * x_p)
            assert joint.coefficients["x"] == pytest.approx(partial, rel=1e-10)


class TestAbsorb:
    def test_single_group_demeans(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=30)
        w = rng.uniform(0.5, 2.0, size=30)
        out = absorb_fixed_effects(x, ["g"] * 30, w)
        np.testing.assert_allclose(out, x - np.sum(w * x) / np.sum(w), atol=1e-12)

    def test_coinciding_dimensions_match_single(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=40)
        keys = [str(i % 4) for i in range(40)]
        w = np.ones(40)
        one = absorb_fixed_effects(x, keys, w)
        two = absorb_fixed_effects(x, [keys, list(keys)], w)
        np.testing.assert_allclose(one, two, atol=1e-10)

    def test_crossed_dims_match_dummy_expansion(self):
        rng = np.random.default_rng(16)
        n = 200
        g1 = rng.integers(0, 6, size=n)
        g2 = rng.integers(0, 5, size=n)
        x = rng.normal(size=(n, 2))
        y = (
            x @ np.array([1.2, -0.7])
            + g1 * 0.5
            + g2 * -0.3
            + rng.normal(size=n)
        )
        w = rng.uniform(0.5, 2.0, size=n)
        keys = [[str(v) for v in g1], [str(v) for v in g2]]
        absorbed = absorb_fixed_effects(np.column_stack([y, x]), keys, w)
        fit_a = wls_fit(make(absorbed[:, 0], absorbed[:, 1:], w, labels=["x1", "x2"]))
        dummies = np.column_stack(
            [(g1 == v).astype(float) for v in range(6)]
            + [(g2 == v).astype(float) for v in range(5)]
        )
        X_full = np.column_stack([x, dummies])
        labels = ["x1", "x2"] + [f"d{j}" for j in range(dummies.shape[1])]
        fit_b = wls_fit(make(y, X_full, w, labels=labels))
        assert fit_a.coefficients["x1"] == pytest.approx(fit_b.coefficients["x1"], rel=1e-8)
        assert fit_a.coefficients["x2"] == pytest.approx(fit_b.coefficients["x2"], rel=1e-8)

    def test_non_convergence_reports_attained(self):
        rng = np.random.default_rng(17)
        n = 50
        keys = [[str(v) for v in rng.integers(0, 8, n)], [str(v) for v in rng.integers(0, 8, n)]]
        with pytest.raises(ConvergenceError) as err:
            absorb_fixed_effects(rng.normal(size=n), keys, np.ones(n), tol=1e-14, max_iter=1)
        assert err.value.attained > 1e-14

    def test_dof_counting(self):
        assert fixed_effect_dof(["a", "b", "a"]) == 2
        assert fixed_effect_dof([["a", "b", "a"], ["x", "x", "y"]]) == 3


class TestHc1:
    def test_close_to_classical_under_homoskedasticity(self):
        rng = np.random.default_rng(18)
        n = 20_000
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = X @ np.array([1.0, 2.0]) + rng.normal(size=n)
        fit = wls_fit(make(y, X, np.ones(n), labels=["c", "x"]))
        sigma2 = fit.weighted_rss / fit.dof
        classical = np.sqrt(sigma2 * np.linalg.inv(X.T @ X)[1, 1])
        assert fit.robust_se["x"] == pytest.approx(classical, rel=0.05)

    def test_hand_rolled_sandwich_oracle(self):
        rng = np.random.default_rng(19)
        n, p = 30, 3
        X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
        w = rng.uniform(0.2, 2.0, size=n)
        y = rng.normal(size=n)
        fit = wls_fit(make(y, X, w))
        b = normal_equations(y, X, w)
        e = y - X @ b
        A = (X * w[:, None]).T @ X
        meat = (X * (w * e)[:, None]).T @ (X * (w * e)[:, None]) * n / (n - p)
        V = np.linalg.inv(A) @ meat @ np.linalg.inv(A)
        np.testing.assert_allclose(
            [fit.robust_se[f"x{j}"] for j in range(p)], np.sqrt(np.diag(V)), rtol=1e-10
        )

    def test_dof_error(self):
        with pytest.raises(ConfigurationError, match="degrees of freedom"):
            hc1_cov(np.ones((2, 2)), np.zeros(2), np.ones(2))


def test_fwl_partition_property_random():
    rng = np.random.default_rng(20)
    for _ in range(25):
        n = int(rng.integers(25, 90))
        p = int(rng.integers(2, 6))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
        y = rng.normal(size=n)
        w = rng.uniform(0.1, 3.0, size=n)
        target = int(rng.integers(0, p))
        labels = [f"x{j}" for j in range(p)]
        joint = wls_fit(make(y, X, w, labels=labels))
        others = [j for j in range(p) if j != target]
        x_p = residualize(X[:, target], X[:, others], w)
        y_p = residualize(y, X[:, others], w)
        partial = np.sum(w * x_p * y_p) / np.sum(w * x_p * x_p)
        assert joint.coefficients[labels[target]] == pytest.approx(partial, rel=1e-9, abs=1e-12)


def test_determinism_bitwise():
    rng = np.random.default_rng(21)
    y, X, w = random_problem(rng)
    a = wls_fit(make(y, X, w))
    b = wls_fit(make(y.copy(), X.copy(), w.copy()))
    assert a.coefficients == b.coefficients
    assert a.robust_se == b.robust_se
