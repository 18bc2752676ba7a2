from __future__ import annotations

import json
import os
import tempfile
import zipfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.backend.services.empdist import EmpiricalDistribution
from src.backend.services.errors import ConfigurationError, DegenerateInputError, DomainError, ParseError
from src.backend.services.features import DesignMatrix
from src.backend.services.ingest import ObservationSet
from src.backend.services.logger import logger

PROVENANCE = "provenance"
OBSERVATION_SET = "observation_set"
DISTRIBUTION = "distribution"


def _default(o: Any) -> Any:
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"Object of type {type(o).__name__} is not JSON serializable")


def dumps(obj: Any, pretty: bool = True) -> str:
    """Canonical JSON: sorted keys, no NaN (callers map them to null first)."""
    if pretty:
        return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, default=_default, allow_nan=False) + "\n"
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, default=_default, allow_nan=False)


@contextmanager
def atomic_path(path: str | Path) -> Iterator[Path]:
    """
    Yields a temporary path next to `path`; it replaces `path` only if the block
    finishes, so a failed stage never leaves a partial output behind.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, target)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_text(path: str | Path, text: str) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")
    logger.debug(f"[STORAGE] wrote {path}")
    return Path(path)


def write_json(path: str | Path, obj: Any) -> Path:
    return write_text(path, dumps(obj))


def read_json(path: str | Path) -> Any:
    p = Path(path)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{p}: invalid JSON ({exc.msg})", line=exc.lineno) from exc


def _write_jsonl(path: str | Path, records: Sequence[Dict[str, Any]]) -> Path:
    return write_text(path, "".join(dumps(r, pretty=False) + "\n" for r in records))


def _read_jsonl(path: str | Path) -> List[Tuple[int, Dict[str, Any]]]:
    p = Path(path)
    out: List[Tuple[int, Dict[str, Any]]] = []
    with open(p, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{p}: invalid JSON record ({exc.msg})", line=lineno) from exc
            if not isinstance(record, dict) or "record_type" not in record:
                raise ParseError(f"{p}: record without record_type", line=lineno)
            out.append((lineno, record))
    return out


# ---------------------------
# Subjects (ObservationSets)
# ---------------------------
def write_subjects(path: str | Path, subjects: Sequence[ObservationSet], provenance: Dict[str, Any]) -> Path:
    records: List[Dict[str, Any]] = [{"record_type": PROVENANCE, **provenance}]
    for s in subjects:
        records.append({
            "record_type": OBSERVATION_SET,
            "subject_id": s.subject_id,
            "outcome": s.outcome,
            "covariates": s.covariates,
            "values": np.asarray(s.values, dtype=np.float64),
        })
    logger.info(f"[STORAGE] {len(subjects)} subject(s) → {path}")
    return _write_jsonl(path, records)


def read_subjects(path: str | Path) -> Tuple[List[ObservationSet], Dict[str, Any]]:
    """Returns (subjects, provenance record without its record_type)."""
    provenance: Dict[str, Any] = {}
    subjects: List[ObservationSet] = []
    for lineno, record in _read_jsonl(path):
        kind = record.pop("record_type")
        if kind == PROVENANCE:
            provenance = record
            continue
        if kind != OBSERVATION_SET:
            raise ParseError(f"{path}: unexpected record_type '{kind}'", line=lineno)
        try:
            subjects.append(
                ObservationSet(
                    subject_id=str(record["subject_id"]),
                    values=np.asarray(record["values"], dtype=np.float64),
                    outcome=float(record["outcome"]),
                    covariates=dict(record.get("covariates") or {}),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: malformed observation set ({exc})", line=lineno) from exc
    return subjects, provenance


# ---------------------------
# Distribution checkpoints
# ---------------------------
def write_distributions(
    path: str | Path, dists: Sequence[EmpiricalDistribution], provenance: Dict[str, Any]
) -> Path:
    records = [{"record_type": PROVENANCE, **provenance}]
    records += [{"record_type": DISTRIBUTION, **d.to_record()} for d in dists]
    return _write_jsonl(path, records)


def read_distributions(path: str | Path) -> Tuple[List[EmpiricalDistribution], Dict[str, Any]]:
    provenance: Dict[str, Any] = {}
    dists: List[EmpiricalDistribution] = []
    for lineno, record in _read_jsonl(path):
        kind = record.pop("record_type")
        if kind == PROVENANCE:
            provenance = record
        elif kind == DISTRIBUTION:
            try:
                dists.append(EmpiricalDistribution.from_record(record))
            except (KeyError, TypeError, ValueError, DomainError, DegenerateInputError) as exc:
                raise ParseError(f"{path}: malformed distribution ({exc})", line=lineno) from exc
        else:
            raise ParseError(f"{path}: unexpected record_type '{kind}'", line=lineno)
    return dists, provenance


# ---------------------------
# Binary containers (.npz)
# ---------------------------
def _save_npz(path: str | Path, metadata: Dict[str, Any], **arrays: np.ndarray) -> Path:
    arrays = {"metadata": np.array(dumps(metadata, pretty=False)), **arrays}
    with atomic_path(path) as tmp:
        # np.savez layout with a fixed entry date so identical content hashes equal
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
                with zf.open(info, "w", force_zip64=True) as f:
                    np.lib.format.write_array(f, np.asanyarray(arr), allow_pickle=False)
    logger.debug(f"[STORAGE] wrote {path}")
    return Path(path)


def _load_npz(path: str | Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"File not found: {p}")
    with np.load(p, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    if "metadata" not in arrays:
        raise ParseError(f"{p}: container has no metadata")
    return arrays, json.loads(arrays.pop("metadata").item())


def save_design(
    path: str | Path,
    design: DesignMatrix,
    provenance: Dict[str, Any],
    factors: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Path:
    """
    Design container: X, y, subject_ids (+ stacked factors a, c for the 4-index
    model) and one `metadata` JSON string (feature metadata, standardization, provenance).
    """
    metadata = {
        "features": design.metadata,
        "standardization": design.standardization(),
        "provenance": provenance,
    }
    arrays = {"X": design.X, "y": design.y, "subject_ids": np.array(design.subject_ids, dtype=str)}
    if factors is not None:
        arrays["a"], arrays["c"] = factors
    return _save_npz(path, metadata, **arrays)


def load_design(path: str | Path) -> Tuple[DesignMatrix, Dict[str, Any]]:
    arrays, metadata = _load_npz(path)
    design = DesignMatrix(
        X=arrays["X"],
        y=arrays["y"],
        subject_ids=[str(s) for s in arrays["subject_ids"]],
        metadata=dict(metadata.get("features", {})),
    )
    return design, metadata


def save_odds(path: str | Path, subject_ids: Sequence[str], index_order: int, surfaces: Dict[str, np.ndarray],
              metadata: Dict[str, Any]) -> Path:
    """Odds container: one stacked array per surface name (first axis = subject)."""
    return _save_npz(
        path,
        {**metadata, "index_order": index_order},
        subject_ids=np.array(list(subject_ids), dtype=str),
        **surfaces,
    )


def load_odds(path: str | Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    return _load_npz(path)


def write_csv(path: str | Path, frame: pd.DataFrame) -> Path:
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False, float_format="%.17g")
    logger.debug(f"[STORAGE] wrote {path} ({len(frame)} rows)")
    return Path(path)
