import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raedsi.core import DataSchema, Ensemble, NumericalError, SchemaError, make_rng
from raedsi.diag import (builtin_expressions, corr_cov_series, derived_quantity, dm_cdf_compare,
                         evaluate_expression, fit_mahalanobis, ks_statistic, mahalanobis_distance,
                         quantile_bands, write_corr_csv, write_dm_cdf_csv)
from raedsi.pcaht import energy_rank


@pytest.fixture
def wells():
    schema = DataSchema(("WIR_I1", "WIR_I2", "WPR_P1", "OPR_P1", "WPR_P2", "OPR_P2"), (1.0, 2.0, 3.0))
    return Ensemble(schema, make_rng(0).uniform(1, 10, size=(20, 6, 3)))


def one_qty(values, name="A"):
    v = np.asarray(values, dtype=float).reshape(-1, 1, 1)
    return Ensemble(DataSchema((name,), (0.0, 1.0)), np.concatenate([v, v], axis=2))


# -- quantile bands


def test_band_interpolates_order_statistics():
    e = one_qty(np.arange(1, 101))
    assert quantile_bands(e, [0.1])[0, 0, 0] == pytest.approx(10.9)
    assert quantile_bands(one_qty([10.0, 0.0]), [0.5])[0, 0, 0] == pytest.approx(5.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_bands_monotone_in_probability(v):
    b = quantile_bands(one_qty(v), [0.1, 0.25, 0.5, 0.75, 0.9])[:, 0, 0]
    assert np.all(np.diff(b) >= -1e-9)
    assert min(v) - 1e-9 <= b[0] and b[-1] <= max(v) + 1e-9


def test_band_input_checks(small_ensemble):
    with pytest.raises(ValueError):
        quantile_bands(small_ensemble, [0.0, 0.5])
    with pytest.raises(SchemaError):
        quantile_bands(small_ensemble.subset([0]), [0.5])


# -- derived quantities


def test_expression_arithmetic(small_ensemble):
    e = small_ensemble
    a, b, c = (e.quantity(n) for n in "ABC")
    got = evaluate_expression(e, "A + 2 * B - -C * (A - 1)")
    np.testing.assert_allclose(got, a + 2 * b + c * (a - 1))


def test_expression_errors(small_ensemble):
    for bad in ["A ** 2", "foo(A)", "A +", "sum('Z*')", "D"]:
        with pytest.raises((SchemaError, KeyError)):
            evaluate_expression(small_ensemble, bad)


def test_builtins_and_field_balance(wells):
    b = builtin_expressions(wells.schema)
    assert {"LIQ_P1", "WCT_P2", "FIELD_INJ", "FIELD_LIQ", "INJ_MINUS_PROD"} <= set(b)
    q = wells.quantity
    d = derived_quantity(wells, {"bal": "INJ_MINUS_PROD", "liq": "FIELD_LIQ"})
    inj = q("WIR_I1") + q("WIR_I2")
    liq = q("WPR_P1") + q("OPR_P1") + q("WPR_P2") + q("OPR_P2")
    np.testing.assert_allclose(d.quantity("bal"), inj - liq)
    np.testing.assert_allclose(d.quantity("liq"), liq)


def test_water_cut_half_when_rates_equal(wells):
    v = wells.values.copy()
    v[:, 2] = v[:, 3]
    wct = derived_quantity(Ensemble(wells.schema, v), "WCT_P1")
    np.testing.assert_allclose(wct.values, 0.5)
    assert wct.schema.quantity_names == ("WCT_P1",)


def test_division_policies():
    e = Ensemble(DataSchema(("A", "B"), (0.0, 1.0)), np.array([[[1.0, 2.0], [0.0, 4.0]]]))
    np.testing.assert_allclose(evaluate_expression(e, "A / B", "clamp"), [[1e12, 0.5]])
    got = evaluate_expression(e, "A / B", "null")
    assert np.isnan(got[0, 0]) and got[0, 1] == 0.5
    with pytest.raises(ValueError):
        evaluate_expression(e, "A / B", "other")


# -- covariance and correlation


def test_correlation_extremes_and_null():
    rng = make_rng(1)
    a = rng.normal(size=(30, 4))
    v = np.stack([a, 2 * a + 1, -a, np.ones_like(a)], axis=1)
    e = Ensemble(DataSchema(("a", "b", "c", "k"), (0.0, 1.0, 2.0, 3.0)), v)
    _, r = corr_cov_series(e, "a", "b")
    np.testing.assert_allclose(r, 1.0)
    cov, r = corr_cov_series(e, "a", "c")
    np.testing.assert_allclose(r, -1.0)
    np.testing.assert_allclose(cov, -np.var(a, axis=0, ddof=1))
    _, r = corr_cov_series(e, "a", "k")
    assert np.all(np.isnan(r))


def test_correlation_matches_numpy(small_ensemble):
    cov, r = corr_cov_series(small_ensemble, "A", "B + C")
    a, bc = small_ensemble.quantity("A"), small_ensemble.quantity("B") + small_ensemble.quantity("C")
    for t in range(a.shape[1]):
        assert r[t] == pytest.approx(np.corrcoef(a[:, t], bc[:, t])[0, 1], abs=1e-12)
        assert cov[t] == pytest.approx(np.cov(a[:, t], bc[:, t])[0, 1], abs=1e-12)


def test_corr_csv_null_cells(tmp_path):
    e = Ensemble(DataSchema(("a", "k"), (0.0, 1.0)), np.array([[[1.0, 1.0], [2.0, 2.0]], [[3.0, 3.0], [2.0, 2.0]]]))
    write_corr_csv(tmp_path / "c.csv", {"m": e}, "a", "k")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["method", "time", "covariance", "correlation"]
    assert rows[1] == ["m", "0", "0", ""]


# -- Mahalanobis distance


def test_mahalanobis_whitened_units(small_ensemble):
    basis = fit_mahalanobis(small_ensemble, 0.99)
    assert mahalanobis_distance(basis, basis.mean) == pytest.approx(0.0, abs=1e-12)
    for j in range(basis.k):
        d = basis.mean + basis.singular_values[j] * basis.u[:, j]
        assert mahalanobis_distance(basis, d) == pytest.approx(1.0, rel=1e-10)


def test_in_sample_mean_square_distance_is_exact(small_ensemble):
    # the whitened scores of the reference have unit sample variance per direction
    basis = fit_mahalanobis(small_ensemble, 0.9)
    dm = mahalanobis_distance(basis, small_ensemble)
    n = small_ensemble.n_r
    assert np.mean(dm**2) == pytest.approx(basis.k * (n - 1) / n, rel=1e-10)


def test_energy_truncation_is_minimal(small_ensemble):
    basis = fit_mahalanobis(small_ensemble, 0.95)
    s = np.linalg.svd(small_ensemble.flat() - small_ensemble.flat().mean(axis=0), compute_uv=False)
    frac = np.cumsum(s**2) / np.sum(s**2)
    assert frac[basis.k - 1] >= 0.95
    assert basis.k == 1 or frac[basis.k - 2] < 0.95
    assert basis.k == energy_rank(s, 0.95)


def test_rank_one_reference():
    rng = make_rng(2)
    direction = rng.normal(size=6)
    v = rng.normal(size=(15, 1)) * direction + 3.0
    basis = fit_mahalanobis(Ensemble(DataSchema(("a", "b"), (0.0, 1.0, 2.0)), v.reshape(15, 2, 3)), 0.999)
    assert basis.k == 1


def test_identical_members_rejected():
    with pytest.raises(NumericalError):
        fit_mahalanobis(Ensemble(DataSchema(("a",), (0.0, 1.0)), np.ones((5, 1, 2))))


def test_schema_mismatch(small_ensemble):
    basis = fit_mahalanobis(small_ensemble)
    with pytest.raises(SchemaError):
        mahalanobis_distance(basis, np.zeros(5))


def test_ks_values():
    a = make_rng(3).normal(size=500)
    assert ks_statistic(a, a) == 0.0
    assert ks_statistic(a, a + 10) == 1.0
    # oracle: maximum gap between the two empirical CDFs
    b = make_rng(4).normal(0.3, 1.0, size=300)
    grid = np.concatenate([a, b])
    gap = np.abs(np.searchsorted(np.sort(a), grid, "right") / 500 - np.searchsorted(np.sort(b), grid, "right") / 300)
    assert ks_statistic(a, b) == pytest.approx(gap.max(), abs=1e-12)


def test_dm_compare_and_csv(small_ensemble, tmp_path):
    basis = fit_mahalanobis(small_ensemble)
    shifted = Ensemble(small_ensemble.schema, small_ensemble.values + 5.0)
    cmp_ = dm_cdf_compare(basis, {"ref": small_ensemble, "far": shifted}, "ref")
    assert cmp_.ks["ref"] == 0.0
    assert cmp_.ks["far"] > 0.5
    assert np.all(np.diff(cmp_.distances["far"]) >= 0)
    write_dm_cdf_csv(tmp_path / "d.csv", cmp_)
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["method", "rank", "dm", "cdf"]
    assert len(rows) == 1 + 2 * small_ensemble.n_r
    assert rows[small_ensemble.n_r][3] == "1"
    with pytest.raises(KeyError):
        dm_cdf_compare(basis, {"a": small_ensemble, "b": shifted}, "c")
