"""JSON-lines dataset manifest: schema, validation, summaries and subject-level splits."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import InvalidParameter, ValidationError

SEXES = ("female", "male")
RECORDING_POINTS = ("mouth", "trachea", "chest", "back")
DIAGNOSES = ("asthma", "healthy", "other_pathology")
QUALITIES = ("good", "average", "poor")
SOURCE_DEVICES = ("specialized", "mobile", "web", "computer", "unknown")


@dataclass(frozen=True)
class RecordEntry:
    record_id: str
    subject_id: str
    sex: str
    age_years: int
    recording_point: str
    diagnosis: str
    record_date: str
    record_quality: str
    source_device: str
    audio_path: str

    @property
    def label(self) -> int:
        """1 for asthma, 0 for everything else (healthy and other pathologies)."""
        return int(self.diagnosis == "asthma")

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = [f.name for f in fields(RecordEntry)]


def _check_row(row) -> tuple[RecordEntry | None, str | None]:
    if not isinstance(row, dict):
        return None, "row is not a JSON object"
    row = dict(row)
    if row.get("source_device") in (None, ""):
        row["source_device"] = "unknown"
    missing = [k for k in _FIELDS if k not in row]
    if missing:
        return None, f"missing field(s) {missing}"
    extra = sorted(set(row) - set(_FIELDS))
    if extra:
        return None, f"unknown field(s) {extra}"
    for key in ("record_id", "subject_id", "record_date", "audio_path"):
        if not isinstance(row[key], str) or (key != "record_date" and not row[key]):
            return None, f"{key} must be a non-empty string"
    age = row["age_years"]
    if isinstance(age, bool) or not isinstance(age, int) or not 0 <= age <= 120:
        return None, f"age_years must be an integer in 0..120, got {age!r}"
    for key, allowed in (
        ("sex", SEXES),
        ("recording_point", RECORDING_POINTS),
        ("diagnosis", DIAGNOSES),
        ("record_quality", QUALITIES),
        ("source_device", SOURCE_DEVICES),
    ):
        if row[key] not in allowed:
            return None, f"{key} {row[key]!r} not in {list(allowed)}"
    return RecordEntry(**row), None


def validate_rows(rows: list[tuple[int, object]]) -> list[RecordEntry]:
    """Validate ``(line_number, parsed_row)`` pairs; all failures are reported together."""
    entries, errors, seen = [], [], {}
    for lineno, row in rows:
        entry, err = _check_row(row)
        if err:
            errors.append((lineno, err))
            continue
        if entry.record_id in seen:
            errors.append((lineno, f"duplicate record_id {entry.record_id!r} (first on line {seen[entry.record_id]})"))
            continue
        seen[entry.record_id] = lineno
        entries.append(entry)
    if errors:
        raise ValidationError(errors)
    return entries


def load_manifest(path: str | Path) -> list[RecordEntry]:
    rows, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                errors.append((lineno, f"invalid JSON: {exc.msg}"))
    try:
        entries = validate_rows(rows)
    except ValidationError as exc:
        raise ValidationError(sorted(errors + exc.errors)) from None
    if errors:
        raise ValidationError(errors)
    return entries


def dump_entry(entry: RecordEntry) -> str:
    return json.dumps(entry.to_dict(), ensure_ascii=False)


def write_manifest(entries, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(dump_entry(e) + "\n")


def summarize(entries) -> dict[str, dict[str, int]]:
    """Counts per value for sex, diagnosis, recording point and source device."""
    out = {"total": {"records": len(entries)}}
    for key, allowed in (
        ("sex", SEXES),
        ("diagnosis", DIAGNOSES),
        ("recording_point", RECORDING_POINTS),
        ("source_device", SOURCE_DEVICES),
    ):
        c = Counter(getattr(e, key) for e in entries)
        out[key] = {v: c.get(v, 0) for v in allowed}
    return out


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    balance: bool = False
    pool_size_per_class: int | None = None

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise InvalidParameter("train_fraction must be in (0, 1)")
        if self.pool_size_per_class is not None and self.pool_size_per_class < 2:
            raise InvalidParameter("pool_size_per_class must be >= 2")


def subject_labels(entries) -> dict[str, int]:
    """Binary class per subject; a subject with any asthma recording is positive."""
    out: dict[str, int] = {}
    for e in entries:
        out[e.subject_id] = max(out.get(e.subject_id, 0), e.label)
    return out


def stratified_subject_split(entries, spec: SplitSpec) -> tuple[list[str], list[str]]:
    """Partition subject ids into (train, test), stratified by asthma/not-asthma.

    Subjects are sorted before the seeded shuffle, so the result does not
    depend on entry order. ``pool_size_per_class`` first subsamples each class
    to that many subjects; ``balance`` alone subsamples to the smaller class.
    """
    return split_subjects(subject_labels(entries), spec)


def split_subjects(labels_by_subject: dict[str, int], spec: SplitSpec) -> tuple[list[str], list[str]]:
    by_class: dict[int, list[str]] = defaultdict(list)
    for sid, lab in sorted(labels_by_subject.items()):
        by_class[lab].append(sid)
    for lab in (0, 1):
        if len(by_class[lab]) < 2:
            raise InvalidParameter(f"class {lab} has {len(by_class[lab])} subject(s); need at least 2")
    pool = spec.pool_size_per_class
    if pool is None and spec.balance:
        pool = min(len(by_class[0]), len(by_class[1]))
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for lab in (0, 1):
        subjects = list(by_class[lab])
        rng.shuffle(subjects)
        if pool is not None:
            if len(subjects) < pool:
                raise InvalidParameter(f"class {lab} has {len(subjects)} subjects, fewer than pool size {pool}")
            subjects = subjects[:pool]
        n_train = int(round(spec.train_fraction * len(subjects)))
        n_train = min(max(n_train, 1), len(subjects) - 1)
        train += subjects[:n_train]
        test += subjects[n_train:]
    return sorted(train), sorted(test)
