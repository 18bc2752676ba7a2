import numpy as np
import pandas as pd
import pytest

from src.backend.services.errors import DataIntegrityError, InputShapeError, ParseError
from src.backend.services.ingest import (
    MINUTES_PER_DAY,
    WIDE_COLUMNS,
    MinuteRecord,
    ObservationSet,
    Rejection,
    SubjectSeries,
    build_observation_set,
    classify_valid_day,
    detect_nonwear,
    ingest_subjects,
    read_minute_csv,
    read_outcomes_csv,
)


def worn_day(level=5):
    return np.full(MINUTES_PER_DAY, level, dtype=np.int64)


def brute_force_nonwear(day):
    out = np.zeros(day.size, dtype=bool)
    i = 0
    while i < day.size:
        if day[i] == 0:
            j = i
            while j < day.size and day[j] == 0:
                j += 1
            if j - i >= 90:
                out[i:j] = True
            i = j
        else:
            i += 1
    return out


def test_all_zero_day_is_fully_nonwear():
    assert detect_nonwear(np.zeros(MINUTES_PER_DAY)).all()


def test_short_zero_run_is_kept():
    day = worn_day()
    day[100:189] = 0
    assert not detect_nonwear(day).any()


def test_leading_zero_run_flags_exactly_its_minutes():
    day = worn_day()
    day[:90] = 0
    flags = detect_nonwear(day)
    assert flags[:90].all()
    assert not flags[90:].any()


def test_nonwear_matches_run_scan(rng):
    for _ in range(20):
        day = rng.integers(0, 3, size=MINUTES_PER_DAY) * (rng.uniform(size=MINUTES_PER_DAY) < 0.3)
        day[rng.integers(0, 1300):][:rng.integers(50, 200)] = 0
        np.testing.assert_array_equal(detect_nonwear(day), brute_force_nonwear(day))


def _days_with_gaps(rng, n_days=4):
    days = rng.integers(0, 40, size=(n_days, MINUTES_PER_DAY)) * (rng.uniform(size=(n_days, MINUTES_PER_DAY)) < 0.6)
    for day in days:
        start = int(rng.integers(0, MINUTES_PER_DAY - 250))
        day[start:start + int(rng.integers(60, 250))] = 0
    return days


def test_nonwear_flagging_is_idempotent(rng):
    for _ in range(10):
        s = SubjectSeries.from_counts("a", _days_with_gaps(rng))
        cleaned = np.where(s.wear_mask, s.days, 0)
        again = SubjectSeries.from_counts("a", cleaned)
        np.testing.assert_array_equal(again.wear_mask, s.wear_mask)
        np.testing.assert_array_equal(again.valid_day_flags, s.valid_day_flags)
        for day, mask in zip(cleaned, s.wear_mask):
            np.testing.assert_array_equal(detect_nonwear(day), ~mask)


def test_appending_worn_days_keeps_existing_flags(rng):
    for _ in range(10):
        days = _days_with_gaps(rng)
        worn = rng.integers(1, 60, size=(int(rng.integers(1, 4)), MINUTES_PER_DAY))
        before = SubjectSeries.from_counts("a", days)
        after = SubjectSeries.from_counts("a", np.vstack([days, worn]))
        n = days.shape[0]
        np.testing.assert_array_equal(after.wear_mask[:n], before.wear_mask)
        np.testing.assert_array_equal(after.valid_day_flags[:n], before.valid_day_flags)
        assert after.wear_mask[n:].all()
        assert after.valid_day_flags[n:].all()


def test_wrong_length_is_rejected():
    with pytest.raises(InputShapeError):
        detect_nonwear(np.zeros(100))


@pytest.mark.parametrize("nonwear, expected", [(0, True), (143, True), (144, False)])
def test_valid_day_threshold_is_strict(nonwear, expected):
    mask = np.zeros(MINUTES_PER_DAY, dtype=bool)
    mask[:nonwear] = True
    assert classify_valid_day(worn_day(), mask) is expected


def test_minute_record_validation():
    with pytest.raises(InputShapeError):
        MinuteRecord("a", 1, 0, 3)
    with pytest.raises(InputShapeError):
        MinuteRecord("a", 1, 10, -1)


def test_from_counts_checks_shape():
    with pytest.raises(InputShapeError):
        SubjectSeries.from_counts("a", np.zeros((2, 100)))


def test_from_records_fills_absent_minutes():
    records = [MinuteRecord("a", 3, 1, 7), MinuteRecord("a", 1, 1440, 2), MinuteRecord("a", 1, 10, 5)]
    s = SubjectSeries.from_records("a", records, outcome=2.5)
    assert s.day_indices == (1, 3)
    assert s.days.shape == (2, MINUTES_PER_DAY)
    assert s.days[0, 9] == 5 and s.days[0, 1439] == 2 and s.days[1, 0] == 7
    assert s.days.sum() == 14
    assert s.outcome == 2.5


def test_from_records_rejects_duplicates_and_foreign_subjects():
    with pytest.raises(DataIntegrityError):
        SubjectSeries.from_records("a", [MinuteRecord("a", 1, 5, 1), MinuteRecord("a", 1, 5, 2)])
    with pytest.raises(DataIntegrityError):
        SubjectSeries.from_records("a", [MinuteRecord("b", 1, 5, 1)])


def test_two_valid_days_is_rejected():
    s = SubjectSeries.from_counts("a", [worn_day(), worn_day()], outcome=3.0)
    res = build_observation_set(s)
    assert isinstance(res, Rejection)
    assert "valid days" in res.reason


def test_three_full_days_give_720_values_each():
    s = SubjectSeries.from_counts("a", [worn_day(), worn_day(), worn_day()], outcome=3.0)
    res = build_observation_set(s)
    assert isinstance(res, ObservationSet)
    assert res.n_obs == 3 * 720


def test_log_transform():
    days = [worn_day(14880) for _ in range(3)]
    # minute 481 opens the window; a single zero minute is still worn
    days[0][480] = 0
    s = SubjectSeries.from_counts("a", days, outcome=1.0)
    res = build_observation_set(s)
    assert 0.0 in res.values
    assert res.values.max() == pytest.approx(np.log(14881.0))
    assert np.log(14881.0) == pytest.approx(9.608, abs=1e-3)


def test_missing_outcome_is_rejected():
    s = SubjectSeries.from_counts("a", [worn_day()] * 3)
    res = build_observation_set(s)
    assert isinstance(res, Rejection) and res.reason == "missing outcome"


def _wide_frame(rows):
    data = [[sid, d] + list(counts) for sid, d, counts in rows]
    return pd.DataFrame(data, columns=WIDE_COLUMNS)


def test_header_only_wide_file(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(",".join(WIDE_COLUMNS) + "\n")
    assert read_minute_csv(path) == []


def test_single_wide_row(tmp_path):
    path = tmp_path / "m.csv"
    _wide_frame([("S1", 1, worn_day())]).to_csv(path, index=False)
    series = read_minute_csv(path)
    assert len(series) == 1
    assert series[0].days.shape == (1, MINUTES_PER_DAY)
    assert series[0].day_indices == (1,)


def test_wide_duplicate_day(tmp_path):
    path = tmp_path / "m.csv"
    _wide_frame([("S1", 1, worn_day()), ("S1", 1, worn_day())]).to_csv(path, index=False)
    with pytest.raises(DataIntegrityError):
        read_minute_csv(path)


def test_wide_negative_count_reports_line(tmp_path):
    path = tmp_path / "m.csv"
    bad = worn_day()
    bad[3] = -1
    _wide_frame([("S1", 1, worn_day()), ("S1", 2, bad)]).to_csv(path, index=False)
    with pytest.raises(ParseError) as info:
        read_minute_csv(path)
    assert info.value.line == 3


def _long_frame(rng):
    rows = []
    for sid in ("B", "A"):
        for d in (1, 2):
            for m in range(1, MINUTES_PER_DAY + 1):
                rows.append((sid, d, m, int(rng.integers(0, 50))))
    return pd.DataFrame(rows, columns=["subject_id", "day", "minute", "count"])


def test_long_format_is_order_invariant(tmp_path, rng):
    frame = _long_frame(rng)
    sorted_path, shuffled_path = tmp_path / "a.csv", tmp_path / "b.csv"
    frame.to_csv(sorted_path, index=False)
    frame.sample(frac=1.0, random_state=7).to_csv(shuffled_path, index=False)
    a, b = read_minute_csv(sorted_path, "long"), read_minute_csv(shuffled_path, "long")
    assert [s.subject_id for s in a] == ["A", "B"]
    for x, y in zip(a, b):
        assert x.subject_id == y.subject_id
        np.testing.assert_array_equal(x.days, y.days)


def test_long_format_missing_minutes_are_zero(tmp_path):
    frame = pd.DataFrame({"subject_id": ["A", "A"], "day": [1, 1], "minute": [1, 5], "count": [3, 4]})
    path = tmp_path / "l.csv"
    frame.to_csv(path, index=False)
    (s,) = read_minute_csv(path, "long")
    assert s.days[0, 0] == 3 and s.days[0, 4] == 4
    assert s.days.sum() == 7


def test_long_duplicate_minute(tmp_path):
    frame = pd.DataFrame({"subject_id": ["A", "A"], "day": [1, 1], "minute": [5, 5], "count": [3, 4]})
    path = tmp_path / "l.csv"
    frame.to_csv(path, index=False)
    with pytest.raises(DataIntegrityError):
        read_minute_csv(path, "long")


def test_outcomes_reader(tmp_path):
    path = tmp_path / "o.csv"
    path.write_text("subject_id,edss,age,sex\nA,2.5,40,F\nB,6.0,,M\n")
    out = read_outcomes_csv(path)
    assert out["A"] == (2.5, {"age": 40.0, "sex": "F"})
    assert out["B"][1]["age"] is None


def test_outcomes_duplicate(tmp_path):
    path = tmp_path / "o.csv"
    path.write_text("subject_id,edss,age,sex\nA,2.5,40,F\nA,3.0,40,F\n")
    with pytest.raises(DataIntegrityError):
        read_outcomes_csv(path)


def test_ingest_subjects_splits_accepted_and_rejected():
    good = SubjectSeries.from_counts("A", [worn_day()] * 3)
    short = SubjectSeries.from_counts("B", [worn_day()] * 2)
    orphan = SubjectSeries.from_counts("C", [worn_day()] * 3)
    outcomes = {"A": (1.0, {"age": 30.0, "sex": "F"}), "B": (2.0, {})}
    accepted, rejected = ingest_subjects([good, short, orphan], outcomes, workers=2)
    assert [s.subject_id for s in accepted] == ["A"]
    assert accepted[0].covariates["sex"] == "F"
    assert {r.subject_id: r.reason for r in rejected}["C"] == "missing outcome"
