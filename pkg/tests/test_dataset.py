import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from truncount.dataset import (
    DataError,
    Dataset,
    ParseError,
    StudyRecord,
    append_outlier_records,
    case_study,
    case_study_outliers,
    frequency_table,
    impute_missing_proportion,
    outlier_bounds,
    read_csv,
    select_imputation_terms,
    to_csv,
    zero_truncate,
)

HEADER = "id,count,exposure,prop_women,origin_flag\n"


def test_case_study_shape():
    d = case_study()
    assert len(d) == 27
    assert d.truncated
    assert d.counts.min() >= 1
    ft = frequency_table(d)
    assert ft.n == 27
    assert ft.m == ft.f1 + ft.f2
    # exactly one study lacks the proportion of women
    assert int(np.isnan(d.prop_women).sum()) == 1


def test_outlier_records_are_appended_last():
    d = append_outlier_records(case_study(), case_study_outliers().records)
    assert len(d) == 30
    assert [r.id for r in d.records[-3:]] == [r.id for r in case_study_outliers().records]
    assert sorted(d.counts[-3:]) == [14, 16, 17]


def test_read_csv_comments_and_missing_cell():
    d = read_csv("# a comment\n" + HEADER + "a,1,10.5,,0\nb,2,3,0.5,1\n")
    assert d.records[0].prop_women is None
    assert d.records[1].prop_women == 0.5
    assert d.truncated


def test_read_csv_zero_counts_not_truncated():
    d = read_csv(HEADER + "a,0,10,0.5,0\nb,2,3,0.5,1\n")
    assert not d.truncated
    assert len(zero_truncate(d)) == 1


@pytest.mark.parametrize(
    "body, column",
    [
        ("a,x,10,0.5,0\n", "count"),
        ("a,1,ten,0.5,0\n", "exposure"),
        ("a,1,10,half,0\n", "prop_women"),
        ("a,1,10,0.5,2\n", "origin_flag"),
    ],
)
def test_parse_error_names_row_and_column(body, column):
    with pytest.raises(ParseError) as info:
        read_csv(HEADER + body)
    assert info.value.row == 2
    assert info.value.column == column


def test_nonpositive_exposure_rejected():
    with pytest.raises(DataError, match="exposure"):
        read_csv(HEADER + "a,1,0,0.5,0\n")


def test_empty_and_bad_header():
    with pytest.raises(DataError, match="no records"):
        read_csv(HEADER)
    with pytest.raises(ParseError):
        read_csv("id,count\n1,2\n")


def test_duplicate_ids_rejected():
    r = StudyRecord("a", 1, 1.0)
    with pytest.raises(DataError, match="duplicate"):
        Dataset((r, r))


def test_truncated_dataset_rejects_zero():
    with pytest.raises(DataError):
        Dataset((StudyRecord("a", 0, 1.0),), truncated=True)


records = st.builds(
    lambda i, c, e, p, f: StudyRecord(f"s{i}", c, e, p, f),
    st.integers(0, 10_000),
    st.integers(1, 50),
    st.floats(1e-3, 1e6, allow_nan=False),
    st.one_of(st.none(), st.floats(0.0, 1.0)),
    st.integers(0, 1),
)


@given(st.lists(records, min_size=1, max_size=20, unique_by=lambda r: r.id))
@settings(max_examples=60, deadline=None)
def test_csv_round_trip(recs):
    d = Dataset(tuple(recs), truncated=True)
    back = read_csv(to_csv(d))
    assert back == d


def test_imputation_smith_2004():
    d = case_study()
    terms, _ = select_imputation_terms(d)
    assert terms == ("exposure", "origin_flag", "exposure:origin_flag")
    filled = impute_missing_proportion(d)
    (value,) = [new.prop_women for old, new in zip(d.records, filled.records) if old.prop_women is None]
    assert value == pytest.approx(0.823, abs=1e-3)
    assert not filled.has_missing


def test_imputation_matches_least_squares_oracle():
    d = case_study()
    complete = d.subset(~np.isnan(d.prop_women))
    e, f, y = complete.exposures, complete.origin_flags, complete.prop_women
    X = np.column_stack([np.ones_like(e), e, f, e * f])
    # normal equations as an independent route to the coefficients
    oracle = np.linalg.solve(X.T @ X, X.T @ y)
    _, coef = select_imputation_terms(d)
    np.testing.assert_allclose(coef, oracle, rtol=1e-6)


def test_imputation_drops_useless_interaction_first():
    rng = np.random.default_rng(1)
    e = rng.uniform(100, 3000, 40)
    f = rng.integers(0, 2, 40)
    p = np.clip(0.5 + 1e-4 * e + rng.normal(0, 0.02, 40), 0, 1)
    recs = [StudyRecord(f"s{i}", 1, e[i], float(p[i]), int(f[i])) for i in range(40)]
    terms, _ = select_imputation_terms(Dataset(tuple(recs)))
    assert "exposure:origin_flag" not in terms
    assert "exposure" in terms


def test_impute_requires_missing_value():
    with pytest.raises(DataError):
        impute_missing_proportion(impute_missing_proportion(case_study()))


def test_outlier_bounds_against_inclusive_quantiles():
    d = case_study()
    q1, _, q3 = statistics.quantiles(d.rates.tolist(), n=4, method="inclusive")
    b = outlier_bounds(d)
    assert b.lower == pytest.approx(q3 + 3 * (q3 - q1), rel=1e-12)
    assert b.upper / b.lower == pytest.approx(1.2)


@given(st.lists(st.floats(1e-5, 1.0), min_size=4, max_size=40))
@settings(max_examples=60, deadline=None)
def test_outlier_bounds_property(rates):
    recs = [StudyRecord(f"s{i}", 1, 1.0 / r) for i, r in enumerate(rates)]
    d = Dataset(tuple(recs))
    b = outlier_bounds(d)
    assert b.lower >= np.quantile(d.rates, 0.75) - 1e-12
    assert math.isclose(b.upper, 1.2 * b.lower)


def test_outlier_bounds_need_four_studies():
    recs = tuple(StudyRecord(f"s{i}", 1, 1.0) for i in range(3))
    with pytest.raises(DataError):
        outlier_bounds(Dataset(recs))
