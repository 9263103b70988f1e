import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsmdesign import CovariateTable, DataError, DesignSpec, RngStream, SpecError
from fsmdesign.designs import DesignSampler
from fsmdesign.inference import (
    OutcomeTable,
    Statistic,
    diff_in_means,
    exact_p_value,
    load_outcomes,
    monte_carlo_p_value,
    randomization_se,
    randomization_test,
    regression_imputation,
    shift_confidence_interval,
    statistic_value,
    studentized_diff,
)
from oracles import all_partitions, exact_permutation_p, ols_normal_equations


def test_diff_in_means_hand():
    y = np.array([1.0, 3.0, 10.0, 20.0])
    z = np.array([1, 1, 2, 2])
    assert diff_in_means(y, z) == -13.0
    assert diff_in_means(y, z, 2, 1) == 13.0
    assert statistic_value("abs_diff_in_means", y, z) == 13.0


def test_studentized_hand():
    y = np.array([1.0, 3.0, 10.0, 20.0])
    z = np.array([1, 1, 2, 2])
    se = np.sqrt(2 / 2 + 50 / 2)
    assert studentized_diff(y, z) == pytest.approx(-13 / se)
    assert studentized_diff(np.ones(4), z) == 0.0


def _crd_sampler(n=(3, 3)):
    N = sum(n)
    t = CovariateTable.from_array(np.arange(float(N)))
    return DesignSampler.from_name("crd", t, DesignSpec(n))


def test_constant_outcomes_p_one():
    res = randomization_test(_crd_sampler(), np.full(6, 2.5), np.array([1, 1, 1, 2, 2, 2]), M=50, rng=RngStream(0))
    assert res.p_hat == 1.0 and res.statistic_observed == 0.0


def test_single_replicate():
    res = randomization_test(_crd_sampler(), np.arange(6.0), np.array([1, 1, 1, 2, 2, 2]), M=1, rng=RngStream(0))
    assert res.p_hat in (0.0, 1.0) and res.M == 1
    with pytest.raises(SpecError):
        randomization_test(_crd_sampler(), np.arange(6.0), np.array([1, 1, 1, 2, 2, 2]), M=0)


def test_p_value_conventions():
    T = np.array([0.0, 1.0, 2.0, 3.0])
    assert monte_carlo_p_value(T, 2.0) == 0.5
    assert monte_carlo_p_value(T, 2.0, conservative=True) == 3 / 5
    assert monte_carlo_p_value(T, 2.0 + 1e-15) == 0.5
    assert monte_carlo_p_value(T, 3.5) == 0.0


def test_exact_matches_oracle():
    rng = np.random.default_rng(0)
    parts = all_partitions(6, 3)
    for _ in range(10):
        y = rng.normal(size=6)
        z = parts[rng.integers(len(parts))]
        assert exact_p_value(y, z, parts) == pytest.approx(exact_permutation_p(y, z))


def test_monte_carlo_near_exact():
    rng = np.random.default_rng(1)
    y = rng.normal(size=6)
    z = np.array([1, 2, 1, 2, 1, 2])
    exact = exact_permutation_p(y, z)
    res = randomization_test(_crd_sampler(), y, z, M=4000, rng=RngStream(2))
    assert abs(res.p_hat - exact) <= 4 * np.sqrt(exact * (1 - exact) / 4000) + 1e-12


def test_p_decreases_with_effect():
    rng = np.random.default_rng(3)
    base = rng.normal(size=20)
    z = np.repeat([1, 2], 10)
    t = CovariateTable.from_array(rng.normal(size=20))
    sampler = DesignSampler.from_name("crd", t, DesignSpec((10, 10)))
    ps = [randomization_test(sampler, base + tau * (z == 1), z, M=400, rng=RngStream(4)).p_hat
          for tau in (0.0, 0.5, 1.0, 3.0)]
    assert ps == sorted(ps, reverse=True)
    assert ps[-1] < 0.01


def test_null_calibration_with_fsm_pool():
    # an empirical FSM design: observed and replicate assignments come from the same pool
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 2))
    sampler = DesignSampler.from_name("fsm", CovariateTable.from_array(X), DesignSpec((20, 20)))
    pool = sampler.draw_assignments(600, RngStream(6))
    def from_pool(r):
        return pool[int(r.integers(len(pool)))]

    rejections = 0
    datasets = 400
    for d in range(datasets):
        y = X[:, 0] + X[:, 1] ** 2 + rng.normal(size=40)
        observed = pool[rng.integers(len(pool))]
        res = randomization_test(from_pool, y, observed, M=199, rng=RngStream(d), keep_replicates=False)
        rejections += res.p_hat <= 0.05
    rate = rejections / datasets
    assert 0.02 <= rate <= 0.08


def test_studentized_statistic_runs():
    res = randomization_test(_crd_sampler(), np.arange(6.0), np.array([1, 1, 1, 2, 2, 2]),
                             statistic=Statistic.STUDENTIZED, M=100, rng=RngStream(0))
    assert 0 <= res.p_hat <= 1
    assert res.to_dict()["statistic"] == "studentized"


def test_shift_interval_covers_estimate():
    rng = np.random.default_rng(7)
    z = np.repeat([1, 2], 15)
    y = rng.normal(size=30) + 2.0 * (z == 1)
    t = CovariateTable.from_array(rng.normal(size=30))
    sampler = DesignSampler.from_name("crd", t, DesignSpec((15, 15)))
    lo, hi = shift_confidence_interval(sampler, y, z, M=300, rng=RngStream(8))
    est = diff_in_means(y, z)
    assert lo < est < hi
    assert hi - lo < 4
    for tau, inside in ((lo + 1e-3, True), (hi + 0.2, False)):
        y0 = y - tau * (z == 1)
        p = randomization_test(sampler, y0, z, M=300, rng=RngStream(8)).p_hat
        assert (p > 0.05) == inside


def test_regression_exact_fit():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(20, 2))
    z = np.repeat([1, 2], 10)
    y = 1 + X @ [2.0, -1.0] + 3 * (z == 1)
    est, se = regression_imputation(CovariateTable.from_array(X), z, y, None)
    assert est == pytest.approx(3.0)
    assert se == pytest.approx(0.0, abs=1e-7)


def test_regression_intercept_only_is_diff_in_means():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(12, 1))
    z = rng.permutation([1] * 6 + [2] * 6)
    y = rng.normal(size=12)
    est, se = regression_imputation(CovariateTable.from_array(X), z, y, [])
    assert est == pytest.approx(diff_in_means(y, z))
    a, b = y[z == 1], y[z == 2]
    assert se == pytest.approx(np.sqrt(a.var(ddof=1) / 6 + b.var(ddof=1) / 6))


def test_regression_matches_normal_equations():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(30, 2))
    z = rng.permutation([1] * 14 + [2] * 16)
    y = X[:, 0] ** 2 + rng.normal(size=30)
    t = CovariateTable.from_array(X, columns=["a", "b"])
    est, se = regression_imputation(t, z, y, ["a", "b"])
    B = np.column_stack([np.ones(30), X])
    bbar = B.mean(axis=0)
    (b1, V1), (b2, V2) = (ols_normal_equations(B[z == g], y[z == g]) for g in (1, 2))
    assert est == pytest.approx((b1 - b2) @ bbar, rel=1e-10)
    assert se == pytest.approx(np.sqrt(bbar @ (V1 + V2) @ bbar), rel=1e-10)


def test_regression_rank_deficient():
    X = np.column_stack([np.arange(6.0), np.arange(6.0)])
    with pytest.raises(DataError):
        regression_imputation(CovariateTable.from_array(X), np.repeat([1, 2], 3), np.arange(6.0), None)


def test_randomization_se_constant_effect_zero_variance():
    # with Y(1) = Y(2) = constant every draw gives 0
    sampler = _crd_sampler((4, 4))
    P = np.full((8, 2), 3.0)
    assert randomization_se(sampler, P, R=20, rng=RngStream(0)) == 0.0
    with pytest.raises(SpecError):
        randomization_se(sampler, P, R=1)


def test_randomization_se_crd_formula():
    # CRD variance of the difference in means under zero effect: S^2 (1/n1 + 1/n2)
    rng = np.random.default_rng(12)
    y = rng.normal(size=10)
    sampler = _crd_sampler((5, 5))
    se, draws = randomization_se(sampler, np.column_stack([y, y]), R=4000, rng=RngStream(1),
                                 return_draws=True)
    target = np.sqrt(y.var(ddof=1) * (1 / 5 + 1 / 5))
    assert se == pytest.approx(target, rel=0.05)
    assert abs(draws.mean()) < 4 * target / np.sqrt(4000)


def test_outcome_tables(tmp_path):
    p = tmp_path / "y.csv"
    p.write_text("unit_id,y\nb,2\na,1\n")
    out = load_outcomes(p).aligned_to(["a", "b"])
    assert out.observed.tolist() == [1.0, 2.0]
    with pytest.raises(DataError, match="'c'"):
        load_outcomes(p).aligned_to(["a", "c"])
    p.write_text("unit_id,y\na,x\n")
    with pytest.raises(DataError, match="line 2"):
        load_outcomes(p)
    tab = OutcomeTable.from_potentials(["1", "2"], np.array([[1.0, 5.0], [2.0, 6.0]]), np.array([2, 1]))
    assert tab.observed.tolist() == [5.0, 2.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_shift_invariance_of_statistic(seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=8)
    z = rng.permutation([1] * 4 + [2] * 4)
    assert statistic_value("abs_diff_in_means", y + 5, z) == pytest.approx(statistic_value("abs_diff_in_means", y, z))
