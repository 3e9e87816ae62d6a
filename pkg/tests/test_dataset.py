import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boardcast import dataset as ds

D0 = dt.date(2021, 1, 1)


def day(i: int) -> dt.date:
    return D0 + dt.timedelta(days=i)


def records(date, breached_hours, n_hours=24):
    return [ds.HourlyWaitRecord(date, h, h in breached_hours) for h in range(n_hours)]


def series(values, start=D0, cls=ds.DailyBoardingSeries):
    dates = np.arange(np.datetime64(start, "D"), np.datetime64(start, "D") + len(values))
    return cls(dates, np.asarray(values, dtype=float))


# -- compute_daily_breach_fraction ---------------------------------------------------


def test_fraction_saturated_zero_and_cutoff_count():
    s = ds.compute_daily_breach_fraction(records(D0, set(range(24))) + records(day(1), set()) + records(day(2), set(range(17))))
    assert s.values.tolist() == [1.0, 0.0, 17 / 24]
    assert round(17 / 24, 3) == 0.708


def test_fraction_duplicate_rejected_with_key():
    recs = records(D0, set()) + [ds.HourlyWaitRecord(D0, 5, True)]
    with pytest.raises(ds.DuplicateRecordError, match="2021-01-01 hour=5"):
        ds.compute_daily_breach_fraction(recs)


def test_fraction_empty_input():
    assert len(ds.compute_daily_breach_fraction([])) == 0


def test_fraction_incomplete_day_excluded_and_reported():
    rep = ds.SkipReport()
    s = ds.compute_daily_breach_fraction(records(D0, {0}, n_hours=19) + records(day(1), {0}, n_hours=20), rep)
    assert [d.item() for d in s.dates] == [day(1)]
    assert s.values[0] == 1 / 20
    assert len(rep) == 1 and "19/24" in rep.rows[0][3]


def test_hour_out_of_range():
    with pytest.raises(ds.DatasetError):
        ds.HourlyWaitRecord(D0, 24, False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=24, max_size=24), st.randoms(use_true_random=False))
def test_fraction_permutation_invariant(flags, rnd):
    recs = [ds.HourlyWaitRecord(D0, h, b) for h, b in enumerate(flags)]
    shuffled = recs[:]
    rnd.shuffle(shuffled)
    a = ds.compute_daily_breach_fraction(recs)
    b = ds.compute_daily_breach_fraction(shuffled)
    assert a.values.tolist() == b.values.tolist() == [sum(flags) / 24]


# -- binarize -------------------------------------------------------------------------


def test_binarize_examples():
    rule = ds.LabelRule(horizon=1, cutoff=0.708)
    assert ds.binarize(series([0.0, 0.75]), rule, D0) == 1
    assert ds.binarize(series([0.0, 17 / 24]), rule, D0) == 1
    assert ds.binarize(series([0.0] * 20), ds.LabelRule(14, 0.01), D0) == 0


def test_binarize_inclusive_boundary():
    assert ds.binarize(series([0.0, 0.5]), ds.LabelRule(1, 0.5), D0) == 1


def test_binarize_any_in_horizon():
    s = series([0.0, 0.9, 0.0, 0.0])
    assert ds.binarize(s, ds.LabelRule(3, 0.5, "any_in_horizon"), D0) == 1
    assert ds.binarize(s, ds.LabelRule(3, 0.5, "point"), D0) == 0


def test_binarize_missing_date():
    with pytest.raises(ds.MissingDateError):
        ds.binarize(series([0.1, 0.2]), ds.LabelRule(5, 0.5), D0)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0, 1), min_size=8, max_size=8),
    st.floats(0.01, 0.99),
    st.floats(0.01, 0.99),
    st.sampled_from(["point", "any_in_horizon"]),
)
def test_binarize_monotone_in_cutoff(vals, a, b, mode):
    lo, hi = sorted((a, b))
    s = series(vals)
    assert ds.binarize(s, ds.LabelRule(7, hi, mode), D0) <= ds.binarize(s, ds.LabelRule(7, lo, mode), D0)


def test_label_rule_validation():
    for bad in (dict(horizon=0), dict(cutoff=0.0), dict(cutoff=1.0), dict(mode="mean")):
        with pytest.raises(ds.DatasetError):
            ds.LabelRule(**bad)


# -- build_windows ----------------------------------------------------------------------


def test_window_counts_examples():
    rule = ds.LabelRule(14, 0.5)
    assert len(ds.build_windows(series(np.zeros(30)), None, None, 7, rule)) == 10
    assert len(ds.build_windows(series(np.zeros(21)), None, None, 7, rule)) == 1
    with pytest.raises(ds.InsufficientHistoryError, match="at least 21 required"):
        ds.build_windows(series(np.zeros(20)), None, None, 7, rule)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 10), st.integers(1, 14))
def test_window_count_closed_form(N, L, H):
    rule = ds.LabelRule(H, 0.5)
    s = series(np.linspace(0, 1, N))
    if N < L + H:
        with pytest.raises(ds.InsufficientHistoryError):
            ds.build_windows(s, None, None, L, rule)
        return
    assert len(ds.build_windows(s, None, None, L, rule)) == max(0, N - L - H + 1)


def test_windows_content_and_static_constant():
    vals = np.arange(25) / 25
    cases = series(np.arange(25) * 2.0, cls=ds.CaseCountSeries)
    prof = ds.StaticProfile([ds.StaticFeature("age", "building", (0.3,))])
    ws = ds.build_windows(series(vals), cases, prof, 7, ds.LabelRule(3, 0.5))
    first = ws[0]
    assert first.anchor_date == day(6) and first.label_date == day(9)
    assert first.temporal.shape == (7, 2)
    assert first.temporal[:, 0].tolist() == vals[:7].tolist()
    assert first.temporal[:, 1].tolist() == (np.arange(7) * 2.0).tolist()
    assert first.label == int(vals[9] >= 0.5)
    assert all(np.array_equal(w.static, [0.3]) for w in ws)


def test_windows_skip_gaps():
    dates = np.array([np.datetime64(day(i), "D") for i in range(30) if i != 12])
    s = ds.DailyBoardingSeries(dates, np.zeros(len(dates)))
    rep = ds.SkipReport()
    ws = ds.build_windows(s, None, None, 7, ds.LabelRule(3, 0.5), rep)
    anchors = {w.anchor_date for w in ws}
    # day 12 is needed as input by anchors 12..18 and as label by anchor 9
    for a in list(range(12, 19)) + [9]:
        assert day(a) not in anchors
    assert len(ws) + len(rep) == 30 - 7 - 3 + 1


# -- split_by_period -----------------------------------------------------------------------


def _sample(anchor, horizon=1):
    return ds.WindowSample(np.zeros((7, 1)), np.zeros(0), 0, anchor, anchor + dt.timedelta(days=horizon))


def test_canonical_period_assignment():
    buckets = ds.split_by_period([_sample(dt.date(2021, 6, 1)), _sample(dt.date(2022, 1, 10))], ds.CANONICAL_PERIODS)
    assert len(buckets["between-4-and-5"]) == 1 and len(buckets["wave-5"]) == 1


def test_boundary_crossing_sample_dropped():
    rep = ds.SkipReport()
    s = _sample(dt.date(2021, 5, 15), horizon=14)
    buckets = ds.split_by_period([s], ds.CANONICAL_PERIODS, rep)
    assert sum(map(len, buckets.values())) == 0
    assert "crosses end of waves-1-4" in rep.rows[0][3]


def test_overlapping_periods_rejected():
    ps = [ds.PeriodSpec("a", D0, day(10)), ds.PeriodSpec("b", day(10), day(20))]
    with pytest.raises(ds.PeriodConfigError):
        ds.split_by_period([], ps)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 60), max_size=40), st.integers(1, 5))
def test_period_assignment_partitions(offsets, H):
    ps = [ds.PeriodSpec("a", D0, day(19)), ds.PeriodSpec("b", day(20), day(39)), ds.PeriodSpec("c", day(40), day(55))]
    samples = [_sample(day(o), H) for o in offsets]
    rep = ds.SkipReport()
    buckets = ds.split_by_period(samples, ps, rep)
    kept = [id(s) for b in buckets.values() for s in b]
    assert len(kept) == len(set(kept))
    assert len(kept) + len(rep) == len(samples)
    for name, b in buckets.items():
        p = next(q for q in ps if q.name == name)
        assert all(p.contains(s.anchor_date) and s.label_date <= p.end for s in b)


# -- normalize_channels ---------------------------------------------------------------------


def _case_sample(values, frac=0.5):
    t = np.column_stack([np.full(len(values), frac), np.asarray(values, float)])
    return ds.WindowSample(t, np.zeros(0), 0, D0, day(1))


def test_normalize_arithmetic():
    train = [_case_sample([5.0, 15.0])]
    tr, (other,), norm = ds.normalize_channels(train, [_case_sample([15.0])])
    assert (norm.mean, norm.std) == (10.0, 5.0)
    assert other[0].temporal[0, 1] == 1.0
    assert tr[0].temporal[:, 0].tolist() == [0.5, 0.5]


def test_normalize_constant_cases_centred_with_warning():
    with pytest.warns(UserWarning):
        tr, _, norm = ds.normalize_channels([_case_sample([3.0, 3.0])])
    assert norm.centered_only and tr[0].temporal[:, 1].tolist() == [0.0, 0.0]


def test_normalize_empty_train():
    with pytest.raises(ds.DatasetError):
        ds.normalize_channels([])


# -- static profiles ------------------------------------------------------------------------


def _features():
    return [
        ds.StaticFeature("occupation", "tpu", (0.0, 1.0), ("a", "b")),
        ds.StaticFeature("age", "building", (0.4,)),
        ds.StaticFeature("housing", "estate", (1.0, 0.0, 0.0), ("x", "y", "z")),
        ds.StaticFeature("lift", "building", (0.0, 1.0), ("no", "yes")),
    ]


def test_flatten_order_and_widths():
    prof = ds.StaticProfile(_features())
    assert prof.flatten().tolist() == [0.4, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]
    assert prof.level_widths() == (3, 3, 2)
    assert prof.flattened_length == 8
    assert prof.slot_names()[:3] == ["age", "lift=no", "lift=yes"]


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)))
def test_flatten_independent_of_insertion_order(perm):
    feats = _features()
    a = ds.StaticProfile(feats).flatten()
    b = ds.StaticProfile([feats[i] for i in perm]).flatten()
    assert a.tobytes() == b.tobytes()


def test_static_feature_validation():
    with pytest.raises(ds.DatasetError):
        ds.StaticFeature("x", "district", (1.0,))
    with pytest.raises(ds.DatasetError):
        ds.StaticFeature("x", "tpu", (1.0, 1.0), ("a", "b"))
    with pytest.raises(ds.DatasetError):
        ds.StaticProfile([ds.StaticFeature("x", "tpu", (0.1,)), ds.StaticFeature("x", "estate", (0.2,))])


# -- files ---------------------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    c = tmp_path / "c000"
    c.mkdir()
    (tmp_path / "periods.csv").write_text("name,start,end\np,2021-01-01,2021-02-28\n")
    rows = ["date,hour,breached"]
    for i in range(40):
        rows += [f"{day(i).isoformat()},{h},{int(h < i % 24)}" for h in range(24)]
    (c / "waits.csv").write_text("\n".join(rows) + "\n")
    (c / "cases.csv").write_text("date,count\n" + "".join(f"{day(i).isoformat()},{i}\n" for i in range(40)))
    (c / "static.csv").write_text(
        "feature,level,response_level,value\nage,building,,0.5\nlift,building,no,0\nlift,building,yes,1\n"
        "housing,estate,public,1\nocc,tpu,,0.2\n"
    )
    data = ds.load_dataset(tmp_path)
    cat = data.catchments["c000"]
    assert cat.boarding.values.tolist() == [(i % 24) / 24 for i in range(40)]
    assert cat.cases.values.tolist() == list(map(float, range(40)))
    assert cat.profile.level_widths() == (3, 1, 1)
    b = data.windows(ds.LabelRule(3, 0.5))
    assert len(b["p"]) == 40 - 7 - 3 + 1


def test_bad_header(tmp_path):
    p = tmp_path / "cases.csv"
    p.write_text("day,count\n2021-01-01,3\n")
    with pytest.raises(ds.DatasetError, match="expected header"):
        ds.read_cases(p)


def test_continuous_features_min_max_scaled_over_table():
    raw = {
        "a": {"age": ("building", [""], [10.0]), "lift": ("building", ["no", "yes"], [1.0, 0.0])},
        "b": {"age": ("building", [""], [30.0]), "lift": ("building", ["no", "yes"], [0.0, 1.0])},
        "c": {"age": ("building", [""], [15.0]), "lift": ("building", ["no", "yes"], [0.0, 1.0])},
    }
    profs = ds.profiles_from_raw(raw)
    assert [profs[k].flatten()[0] for k in "abc"] == [0.0, 1.0, 0.25]
    assert profs["a"].flatten()[1:].tolist() == [1.0, 0.0]
