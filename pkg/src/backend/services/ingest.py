from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.backend.services.errors import DataIntegrityError, InputShapeError, ParseError
from src.backend.services.logger import logger

MINUTES_PER_DAY = 1440
NONWEAR_RUN = 90
MIN_VALID_DAYS = 3
# 8:00-20:00 with minute 1 = 00:00-00:01, inclusive on both ends
WINDOW_START = 481
WINDOW_END = 1200

WIDE_COLUMNS = ["subject_id", "day"] + [f"MIN{m}" for m in range(1, MINUTES_PER_DAY + 1)]
LONG_COLUMNS = ["subject_id", "day", "minute", "count"]
OUTCOME_COLUMNS = ["subject_id", "edss", "age", "sex"]


@dataclass(frozen=True)
class MinuteRecord:
    subject_id: str
    day_index: int
    minute_of_day: int
    count: int

    def __post_init__(self):
        if not 1 <= self.minute_of_day <= MINUTES_PER_DAY:
            raise InputShapeError(f"minute_of_day must be in [1, {MINUTES_PER_DAY}], got {self.minute_of_day}")
        if self.count < 0:
            raise InputShapeError(f"count must be >= 0, got {self.count}")


@dataclass(frozen=True)
class SubjectSeries:
    subject_id: str
    day_indices: Tuple[int, ...]
    days: np.ndarray                 # (n_days, 1440) counts
    wear_mask: np.ndarray            # (n_days, 1440) True = worn
    valid_day_flags: np.ndarray      # (n_days,)
    covariates: Dict[str, Any] = field(default_factory=dict)
    outcome: Optional[float] = None

    @classmethod
    def from_counts(
        cls,
        subject_id: str,
        days: Sequence[Sequence[int]] | np.ndarray,
        day_indices: Optional[Sequence[int]] = None,
        covariates: Optional[Dict[str, Any]] = None,
        outcome: Optional[float] = None,
    ) -> "SubjectSeries":
        arr = np.asarray(days, dtype=np.int64)
        if arr.size == 0:
            arr = np.zeros((0, MINUTES_PER_DAY), dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != MINUTES_PER_DAY:
            raise InputShapeError(f"days must be (n_days, {MINUTES_PER_DAY}), got shape {arr.shape}")
        nonwear = np.array([detect_nonwear(d) for d in arr], dtype=bool).reshape(arr.shape)
        valid = np.array([classify_valid_day(d, m) for d, m in zip(arr, nonwear)], dtype=bool)
        idx = tuple(day_indices) if day_indices is not None else tuple(range(1, arr.shape[0] + 1))
        return cls(
            subject_id=str(subject_id),
            day_indices=idx,
            days=arr,
            wear_mask=~nonwear,
            valid_day_flags=valid,
            covariates=dict(covariates or {}),
            outcome=outcome,
        )

    @classmethod
    def from_records(
        cls,
        subject_id: str,
        records: Iterable[MinuteRecord],
        covariates: Optional[Dict[str, Any]] = None,
        outcome: Optional[float] = None,
    ) -> "SubjectSeries":
        """Assembles one subject's days from minute records; minutes never recorded count 0."""
        days: Dict[int, np.ndarray] = {}
        seen: Dict[int, np.ndarray] = {}
        for r in records:
            if r.subject_id != subject_id:
                raise DataIntegrityError(f"record of subject '{r.subject_id}' passed for subject '{subject_id}'")
            if r.day_index not in days:
                days[r.day_index] = np.zeros(MINUTES_PER_DAY, dtype=np.int64)
                seen[r.day_index] = np.zeros(MINUTES_PER_DAY, dtype=bool)
            pos = r.minute_of_day - 1
            if seen[r.day_index][pos]:
                raise DataIntegrityError(
                    f"duplicate (subject_id={subject_id}, day={r.day_index}, minute={r.minute_of_day})"
                )
            seen[r.day_index][pos] = True
            days[r.day_index][pos] = r.count
        order = sorted(days)
        return cls.from_counts(
            subject_id,
            np.stack([days[d] for d in order]) if order else [],
            day_indices=order,
            covariates=covariates,
            outcome=outcome,
        )

    def with_outcome(self, outcome: Optional[float], covariates: Optional[Dict[str, Any]] = None) -> "SubjectSeries":
        return SubjectSeries(
            subject_id=self.subject_id,
            day_indices=self.day_indices,
            days=self.days,
            wear_mask=self.wear_mask,
            valid_day_flags=self.valid_day_flags,
            covariates=dict(covariates if covariates is not None else self.covariates),
            outcome=outcome,
        )

    @property
    def n_valid_days(self) -> int:
        return int(self.valid_day_flags.sum())


@dataclass(frozen=True)
class ObservationSet:
    subject_id: str
    values: np.ndarray
    outcome: float
    covariates: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class Rejection:
    subject_id: str
    reason: str


def _check_day(day: np.ndarray, name: str = "day") -> np.ndarray:
    arr = np.asarray(day)
    if arr.ndim != 1 or arr.shape[0] != MINUTES_PER_DAY:
        raise InputShapeError(f"{name} must be a {MINUTES_PER_DAY}-vector, got shape {arr.shape}")
    return arr


def _run_lengths(flags: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run-length encoding of a boolean vector: (lengths, starts, values)."""
    n = flags.shape[0]
    change = np.flatnonzero(np.diff(flags.astype(np.int8))) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [n]))
    return ends - starts, starts, flags[starts]


def detect_nonwear(day: Sequence[int] | np.ndarray) -> np.ndarray:
    """Flags every minute inside a maximal run of >= 90 consecutive zero counts."""
    counts = _check_day(day)
    if np.any(counts < 0):
        raise InputShapeError("counts must be nonnegative")
    zero = counts == 0
    out = np.zeros(MINUTES_PER_DAY, dtype=bool)
    lengths, starts, values = _run_lengths(zero)
    for length, start, is_zero in zip(lengths, starts, values):
        if is_zero and length >= NONWEAR_RUN:
            out[start:start + length] = True
    return out


def classify_valid_day(day: Sequence[int] | np.ndarray, mask: Sequence[bool] | np.ndarray) -> bool:
    """A day is valid iff wear minutes / 1440 > 0.90 (strict), i.e. >= 1297 worn minutes."""
    _check_day(day)
    nonwear = _check_day(np.asarray(mask, dtype=bool), name="mask")
    wear = MINUTES_PER_DAY - int(nonwear.sum())
    # integer form of wear / 1440 > 0.9
    return wear * 10 > MINUTES_PER_DAY * 9


def build_observation_set(series: SubjectSeries) -> Union[ObservationSet, Rejection]:
    """Keeps worn minutes 481-1200 of valid days and applies x -> log(x + 1)."""
    if series.n_valid_days < MIN_VALID_DAYS:
        return Rejection(series.subject_id, f"too few valid days ({series.n_valid_days} < {MIN_VALID_DAYS})")
    if series.outcome is None or not np.isfinite(series.outcome):
        return Rejection(series.subject_id, "missing outcome")

    window = slice(WINDOW_START - 1, WINDOW_END)
    valid = series.valid_day_flags
    counts = series.days[valid, window]
    worn = series.wear_mask[valid, window]
    kept = counts[worn]
    if kept.size == 0:
        return Rejection(series.subject_id, "no worn minutes inside the 8am-8pm window")
    return ObservationSet(
        subject_id=series.subject_id,
        values=np.log1p(kept.astype(np.float64)),
        outcome=float(series.outcome),
        covariates=dict(series.covariates),
    )


def _line_of(row_position: int) -> int:
    # +1 for the header, +1 for 1-based lines
    return int(row_position) + 2


def _read_csv(path: Path, expected: List[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={"subject_id": str}, keep_default_na=True)
    except pd.errors.EmptyDataError as exc:
        raise ParseError(f"{path} is empty (a header is required)", line=1) from exc
    except pd.errors.ParserError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    missing = [c for c in expected if c not in df.columns]
    if missing:
        raise ParseError(f"{path}: missing columns {missing[:5]}{'...' if len(missing) > 5 else ''}", line=1)
    return df


def _as_counts(frame: pd.DataFrame, columns: List[str], path: Path) -> np.ndarray:
    values = frame[columns].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values) | (values < 0) | (values != np.floor(values))
    if bad.any():
        row = int(np.flatnonzero(bad.any(axis=1))[0])
        raise ParseError(f"{path}: counts must be nonnegative integers", line=_line_of(row))
    return values.astype(np.int64)


def _as_int_column(frame: pd.DataFrame, column: str, path: Path) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values) | (values != np.floor(values))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(f"{path}: column '{column}' must hold integers", line=_line_of(row))
    return values.astype(np.int64)


def _check_subject_ids(frame: pd.DataFrame, path: Path) -> None:
    missing = frame["subject_id"].isna().to_numpy()
    if missing.any():
        raise ParseError(f"{path}: empty subject_id", line=_line_of(int(np.flatnonzero(missing)[0])))


def _read_wide(path: Path) -> Dict[str, Dict[int, np.ndarray]]:
    df = _read_csv(path, WIDE_COLUMNS)
    if df.empty:
        return {}
    _check_subject_ids(df, path)
    day_idx = _as_int_column(df, "day", path)
    counts = _as_counts(df, WIDE_COLUMNS[2:], path)
    out: Dict[str, Dict[int, np.ndarray]] = {}
    for pos, (sid, d) in enumerate(zip(df["subject_id"].astype(str), day_idx)):
        days = out.setdefault(sid, {})
        if int(d) in days:
            raise DataIntegrityError(f"{path}: duplicate (subject_id={sid}, day={d}) at line {_line_of(pos)}")
        days[int(d)] = counts[pos]
    return out


def _read_long(path: Path) -> Dict[str, List[MinuteRecord]]:
    df = _read_csv(path, LONG_COLUMNS)
    if df.empty:
        return {}
    _check_subject_ids(df, path)
    day_idx = _as_int_column(df, "day", path)
    minute = _as_int_column(df, "minute", path)
    counts = _as_counts(df, ["count"], path)[:, 0]
    out_of_range = (minute < 1) | (minute > MINUTES_PER_DAY)
    if out_of_range.any():
        raise ParseError(f"{path}: minute must be in [1, {MINUTES_PER_DAY}]", line=_line_of(int(np.flatnonzero(out_of_range)[0])))

    keys = pd.DataFrame({"subject_id": df["subject_id"].astype(str), "day": day_idx, "minute": minute})
    dup = keys.duplicated(keep="first").to_numpy()
    if dup.any():
        pos = int(np.flatnonzero(dup)[0])
        raise DataIntegrityError(
            f"{path}: duplicate (subject_id={keys.subject_id.iat[pos]}, day={day_idx[pos]}, minute={minute[pos]}) "
            f"at line {_line_of(pos)}"
        )

    out: Dict[str, List[MinuteRecord]] = {}
    for sid, d, m, c in zip(keys["subject_id"], day_idx.tolist(), minute.tolist(), counts.tolist()):
        out.setdefault(sid, []).append(MinuteRecord(sid, d, m, c))
    filled = keys.groupby(["subject_id", "day"]).ngroups * MINUTES_PER_DAY - len(keys)
    if filled:
        logger.warning(f"[INGEST] {filled} minute(s) absent from {path} were filled with count 0")
    return out


def read_minute_csv(path: str | Path, format: Literal["wide", "long"] = "wide") -> List[SubjectSeries]:
    """
    Reads minute-level counts into one SubjectSeries per subject.

    Wide layout: `subject_id,day,MIN1,...,MIN1440` (one row per subject-day).
    Long layout: `subject_id,day,minute,count` (rows in any order).

    The result is sorted by subject_id, days by day index, so row order never matters.

    Raises:
        ParseError: malformed row (message carries the line number)
        DataIntegrityError: duplicate (subject, day[, minute])
    """
    path = Path(path)
    series: List[SubjectSeries] = []
    if format == "wide":
        by_subject = _read_wide(path)
        for sid in sorted(by_subject):
            days = by_subject[sid]
            order = sorted(days)
            series.append(SubjectSeries.from_counts(sid, np.stack([days[d] for d in order]), day_indices=order))
    elif format == "long":
        records = _read_long(path)
        series = [SubjectSeries.from_records(sid, records[sid]) for sid in sorted(records)]
    else:
        raise ParseError(f"Unknown minute-file format '{format}' (expected wide|long)")
    logger.info(f"[INGEST] {path.name}: {len(series)} subject(s), {sum(len(s.day_indices) for s in series)} day(s)")
    return series


def read_outcomes_csv(path: str | Path) -> Dict[str, Tuple[float, Dict[str, Any]]]:
    """Reads `subject_id,edss,age,sex` into subject_id -> (edss, {age, sex})."""
    path = Path(path)
    df = _read_csv(path, OUTCOME_COLUMNS)
    if df.empty:
        return {}
    _check_subject_ids(df, path)
    edss = pd.to_numeric(df["edss"], errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(edss)
    if bad.any():
        raise ParseError(f"{path}: edss must be numeric", line=_line_of(int(np.flatnonzero(bad)[0])))
    age = pd.to_numeric(df["age"], errors="coerce").to_numpy(dtype=np.float64)

    out: Dict[str, Tuple[float, Dict[str, Any]]] = {}
    for pos, sid in enumerate(df["subject_id"].astype(str)):
        if sid in out:
            raise DataIntegrityError(f"{path}: duplicate subject_id={sid} at line {_line_of(pos)}")
        sex = df["sex"].iat[pos]
        covariates = {
            "age": None if not np.isfinite(age[pos]) else float(age[pos]),
            "sex": None if pd.isna(sex) else str(sex),
        }
        out[sid] = (float(edss[pos]), covariates)
    return out


def ingest_subjects(
    series: Sequence[SubjectSeries],
    outcomes: Dict[str, Tuple[float, Dict[str, Any]]],
    workers: int = 1,
) -> Tuple[List[ObservationSet], List[Rejection]]:
    """Attaches outcomes and builds one ObservationSet per retained subject, in subject order."""
    def _one(s: SubjectSeries) -> Union[ObservationSet, Rejection]:
        if s.subject_id in outcomes:
            y, cov = outcomes[s.subject_id]
            s = s.with_outcome(y, cov)
        return build_observation_set(s)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, series))
    else:
        results = [_one(s) for s in series]

    accepted = [r for r in results if isinstance(r, ObservationSet)]
    rejected = [r for r in results if isinstance(r, Rejection)]
    for r in rejected:
        logger.info(f"[INGEST] subject {r.subject_id} rejected: {r.reason}")
    logger.info(f"[INGEST] {len(accepted)} subject(s) retained, {len(rejected)} rejected")
    return accepted, rejected
