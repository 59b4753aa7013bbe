import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from stridecnn.evaluation import (
    DegenerateInputError,
    abs_error_stats,
    bland_altman,
    bland_altman_csv,
    bland_altman_svg,
    build_report,
    cross_validate,
    error_regression,
    patientwise_kfold,
    per_patient_csv,
    per_patient_precision,
    predictions_csv,
    records_from_arrays,
    relative_precision,
    report_csv,
    signed_error_stats,
    spearman_cc,
)
from stridecnn.network import REDUCED_CONFIG
from stridecnn.preprocessing import StrideDefinition
from stridecnn.tensor import make_rng
from stridecnn.training import TrainConfig
from toydata import toy_dataset


def recs(y, y_ref, pids=None):
    return records_from_arrays(np.asarray(y, float), np.asarray(y_ref, float), pids)


def errors_only(e):
    e = np.asarray(e, float)
    return recs(100.0 + e, np.full(e.size, 100.0))


# -- folds -------------------------------------------------------------------

def test_kfold_101_patients():
    ids = [f"P{i:03d}" for i in range(101)]
    splits = patientwise_kfold(ids, 10, make_rng(0))
    sizes = sorted(len(s.test_patients) for s in splits)
    assert sizes == [10] * 9 + [11]


def test_kfold_guards():
    with pytest.raises(ValueError):
        patientwise_kfold(["a", "b"], 1, make_rng(0))
    with pytest.raises(ValueError):
        patientwise_kfold(["a", "b"], 3, make_rng(0))


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 120), data=st.data())
def test_kfold_partition(n, data):
    k = data.draw(st.integers(2, n))
    seed = data.draw(st.integers(0, 2**32 - 1))
    ids = [f"P{i}" for i in range(n)] * 2
    splits = patientwise_kfold(ids, k, make_rng(seed))
    assert len(splits) == k
    tests = [s.test_patients for s in splits]
    assert frozenset().union(*tests) == frozenset(ids)
    assert sum(len(t) for t in tests) == n
    assert max(len(t) for t in tests) - min(len(t) for t in tests) <= 1
    for s in splits:
        assert not (s.train_patients & s.test_patients)
        assert s.train_patients | s.test_patients == frozenset(ids)


def test_kfold_deterministic():
    ids = [f"P{i}" for i in range(30)]
    a = patientwise_kfold(ids, 5, make_rng(3))
    b = patientwise_kfold(list(reversed(ids)), 5, make_rng(3))
    assert a == b


# -- statistics --------------------------------------------------------------

def test_signed_stats_examples():
    acc, prec = signed_error_stats(errors_only([1, -1, 0]))
    assert acc == pytest.approx(0.0, abs=1e-15) and prec == pytest.approx(1.0, rel=1e-15)
    acc, prec = signed_error_stats(errors_only([2.5] * 7))
    assert acc == pytest.approx(2.5) and prec == pytest.approx(0.0, abs=1e-13)


def test_relative_precision_examples():
    rng = make_rng(0)
    e = rng.normal(size=50)
    e = (e - e.mean()) / e.std(ddof=1) * 5.0
    r = recs(100.0 + e, np.full(50, 100.0))
    assert relative_precision(r) == pytest.approx(0.05, rel=1e-12)
    assert relative_precision(recs([80.0, 90.0], [80.0, 90.0])) == 0.0
    # a precision of 8.4 cm at 10.7 % implies a mean of about 78.5 cm
    assert 8.4 / 0.107 == pytest.approx(78.5, abs=0.05)


def test_abs_stats_examples():
    assert abs_error_stats(errors_only([1, -1])) == pytest.approx((1.0, 0.0))
    m, s = abs_error_stats(errors_only([0, 2]))
    assert m == pytest.approx(1.0) and s == pytest.approx(np.sqrt(2), rel=1e-15)
    assert abs_error_stats(errors_only([0, 0, 0])) == (0.0, 0.0)


def test_spearman_examples():
    y = np.arange(10.0)
    assert spearman_cc(y, y ** 3) == pytest.approx(1.0)
    assert spearman_cc(y[::-1], y) == pytest.approx(-1.0)
    assert spearman_cc([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(0.9486832980505138, rel=1e-14)
    assert oracles.spearman([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(0.9486832980505138, rel=1e-14)


def test_spearman_degenerate():
    with pytest.raises(DegenerateInputError):
        spearman_cc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateInputError):
        spearman_cc([1.0], [1.0])


def test_spearman_monotone_invariance():
    rng = make_rng(1)
    y, ref = rng.normal(size=40), rng.normal(size=40)
    base = spearman_cc(y, ref)
    assert spearman_cc(np.exp(y), ref) == pytest.approx(base, rel=1e-12)
    assert spearman_cc(y, 3 * ref ** 3 + 1) == pytest.approx(base, rel=1e-12)


def test_bland_altman_examples():
    ba = bland_altman(recs([1.2], [1.0]))
    assert ba.agreement[0] == pytest.approx(1.1) and ba.difference[0] == pytest.approx(0.2)
    ba = bland_altman(errors_only([0.3] * 5))
    assert ba.upper - ba.lower == pytest.approx(0.0, abs=1e-12)


def test_bland_altman_mean_equals_accuracy():
    rng = make_rng(2)
    r = recs(rng.uniform(50, 150, 30), rng.uniform(50, 150, 30))
    assert bland_altman(r).mean == signed_error_stats(r)[0]


def test_bland_altman_coverage():
    rng = make_rng(3)
    ref = rng.uniform(60, 140, size=10_000)
    r = recs(ref + rng.normal(0.0, 5.0, size=10_000), ref)
    ba = bland_altman(r)
    inside = np.mean((ba.difference >= ba.lower) & (ba.difference <= ba.upper))
    assert 0.94 <= inside <= 0.96


def test_regression_examples():
    a = np.linspace(0.6, 1.6, 21)
    e = -0.1 * (a - 1.0)
    slope, intercept = error_regression(recs(a + e / 2, a - e / 2))
    assert slope == pytest.approx(-0.1, rel=1e-12)
    assert intercept == pytest.approx(0.1, rel=1e-12)
    with pytest.raises(DegenerateInputError):
        error_regression(recs([1.0, 1.0], [1.0, 1.0]))


def test_regression_independent_errors_slope_near_zero():
    rng = make_rng(4)
    n = 2000
    # independence must hold against the agreement itself, not against y_ref
    a, d = rng.uniform(60, 140, size=n), rng.normal(0.0, 5.0, size=n)
    r = recs(a + d / 2, a - d / 2)
    slope, intercept = error_regression(r)
    ba = bland_altman(r)
    resid = ba.difference - (slope * ba.agreement + intercept)
    se = np.sqrt(resid @ resid / (n - 2) / np.sum((ba.agreement - ba.agreement.mean()) ** 2))
    assert abs(slope) < 3 * se


@pytest.mark.parametrize("seed", range(30))
def test_statistics_match_oracles(seed):
    rng = make_rng(seed)
    n = int(rng.integers(3, 60))
    ref = rng.uniform(40, 160, size=n)
    y = ref + rng.normal(0, 5, size=n)
    if seed % 3 == 0:
        y = np.round(y / 4) * 4
        ref = np.round(ref / 4) * 4 + 2
    r = recs(y, ref)
    for got, want in ((signed_error_stats(r), oracles.signed_stats(y, ref)),
                      (abs_error_stats(r), oracles.abs_stats(y, ref)),
                      ((bland_altman(r).lower, bland_altman(r).upper), oracles.bland_altman_limits(y, ref)),
                      (error_regression(r), oracles.error_regression(y, ref))):
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    assert spearman_cc(y, ref) == pytest.approx(oracles.spearman(y, ref), rel=1e-12, abs=1e-12)


def test_per_patient_precision():
    r = recs([101, 99, 100, 105], [100, 100, 100, 100], ["A", "A", "B", "C"])
    pp = per_patient_precision(r)
    assert pp["A"] == (2, pytest.approx(0.0), pytest.approx(np.sqrt(2)))
    assert pp["B"][0] == 1 and np.isnan(pp["B"][2])


def test_report_and_exports():
    rng = make_rng(5)
    ref = rng.uniform(60, 140, 40)
    pids = [f"P{i % 4}" for i in range(40)]
    r = records_from_arrays(ref + rng.normal(0, 3, 40), ref, pids, StrideDefinition.MS_TO_MS)
    rep = build_report(r)
    assert rep.definition is StrideDefinition.MS_TO_MS
    assert rep.n_strides == 40 and rep.n_patients == 4
    best, bp, worst, wp = rep.patient_precision_extremes()
    assert bp <= wp
    text = report_csv(rep)
    assert text.startswith("statistic,value\ndefinition,MS_to_MS\n")
    assert len(per_patient_csv(rep).splitlines()) == 5
    assert len(predictions_csv(rep.records).splitlines()) == 41
    ba = bland_altman_csv(rep).splitlines()
    assert ba[0] == "agreement_m,difference_m" and len(ba) == 41
    a0, d0 = map(float, ba[1].split(","))
    assert a0 == pytest.approx(0.01 * rep.bland_altman.agreement[0])
    assert d0 == pytest.approx(0.01 * rep.bland_altman.difference[0])
    svg = bland_altman_svg(rep)
    assert svg.startswith("<svg") and svg.count("<circle") == 40 and svg.rstrip().endswith("</svg>")
    assert svg == bland_altman_svg(rep)


def test_cross_validate_small():
    data = toy_dataset(60, n_patients=12)
    cfg = TrainConfig(iterations=20, batch_size=8, log_every=10)
    rep, logs, splits = cross_validate(data, "msdtw", cfg, REDUCED_CONFIG, k=4, seed=1)
    assert rep.n_strides == 60 and len(logs) == 4 and len(splits) == 4
    seen = {}
    for rec in rep.records:
        seen[rec.stride_id] = seen.get(rec.stride_id, 0) + 1
        split = splits[rec.fold]
        assert rec.patient_id in split.test_patients
        assert rec.patient_id not in split.train_patients
    assert sorted(seen) == sorted(s.stride_id for s in data) and set(seen.values()) == {1}
    rep2, _, _ = cross_validate(data, "msdtw", cfg, REDUCED_CONFIG, k=4, seed=1)
    assert report_csv(rep) == report_csv(rep2)


def test_cross_validate_rejects_wrong_definition():
    data = toy_dataset(10)
    with pytest.raises(ValueError):
        cross_validate(data, "ms-ms", TrainConfig(iterations=1), REDUCED_CONFIG, k=2)
