"""Domain records: diagnosis vocabulary, visits, patients, labels, and the
cohort rules that turn raw code sets into delivery / newborn classes.

Timestamps are integer minutes since the cohort epoch; a visit's day is
always floor(t_adm / 1440).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

MINUTES_PER_DAY = 1440


class Label(IntEnum):
    """Binary delivery outcome. Index order (preterm first) is fixed and shared
    by corruption matrices, network outputs, and metric conventions."""

    PRETERM = 0
    FULL_TERM = 1

    def to_json(self) -> str:
        return "preterm" if self is Label.PRETERM else "fullterm"

    @classmethod
    def from_json(cls, value: str) -> "Label":
        if value == "preterm":
            return cls.PRETERM
        if value == "fullterm":
            return cls.FULL_TERM
        raise ValueError(f"unknown label value {value!r}")


class DeliveryClass(Enum):
    """Outcome of classifying a mother's delivery-encounter codes."""

    PRETERM = "preterm"
    FULL_TERM = "fullterm"
    AMBIGUOUS = "ambiguous"


class NewbornClass(Enum):
    """Outcome of classifying a newborn's birth-encounter codes."""

    PRETERM = "preterm"
    FULL_TERM = "fullterm"
    UNKNOWN = "unknown"


class Role(Enum):
    MOTHER = "mother"
    NEWBORN = "newborn"


class VocabularyError(KeyError):
    pass


class RecordFileError(ValueError):
    pass


@dataclass(frozen=True)
class DiagnosisCode:
    code: str
    index: int

    def __post_init__(self) -> None:
        if not self.code:
            raise ValueError("empty diagnosis code string")
        if self.index < 0:
            raise ValueError(f"negative vocabulary index for code {self.code!r}")


class CodeVocabulary:
    """Immutable code-string <-> index mapping. Index i is line i of the
    vocabulary file."""

    def __init__(self, codes: Sequence[str]):
        codes = list(codes)
        index = {}
        for i, code in enumerate(codes):
            if not code:
                raise ValueError(f"empty code string at index {i}")
            if code in index:
                raise ValueError(f"duplicate code {code!r} in vocabulary")
            index[code] = i
        self._codes = codes
        self._index = index

    def __len__(self) -> int:
        return len(self._codes)

    def __iter__(self) -> Iterator[str]:
        return iter(self._codes)

    def code(self, index: int) -> str:
        if not 0 <= index < len(self._codes):
            raise VocabularyError(f"vocabulary index {index} out of range")
        return self._codes[index]

    def index_of(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise VocabularyError(f"unknown code {code!r}") from None

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def decode(self, indices: Iterable[int]) -> set[str]:
        return {self.code(i) for i in indices}

    def encode(self, codes: Iterable[str]) -> frozenset[int]:
        return frozenset(self.index_of(c) for c in codes)

    def entries(self) -> list[DiagnosisCode]:
        return [DiagnosisCode(c, i) for i, c in enumerate(self._codes)]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(c + "\n" for c in self._codes), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CodeVocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.splitlines() if line])


@dataclass(frozen=True)
class Visit:
    """One encounter: admission/discharge minutes plus the set of code indices
    recorded during the stay."""

    day: int
    codes: frozenset[int]
    t_adm: int
    t_dis: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "codes", frozenset(self.codes))
        if not self.codes:
            raise ValueError("visit with empty code set")
        if self.t_dis < self.t_adm:
            raise ValueError(f"visit discharged before admission ({self.t_dis} < {self.t_adm})")
        if self.day != self.t_adm // MINUTES_PER_DAY:
            raise ValueError(f"visit day {self.day} inconsistent with t_adm {self.t_adm}")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    hospital_id: str
    role: Role
    visits: tuple[Visit, ...]
    delivery_day: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "visits", tuple(self.visits))
        keys = [(v.day, v.t_adm) for v in self.visits]
        if keys != sorted(keys):
            raise ValueError(f"visits of {self.patient_id} not time-ordered")
        if self.role is Role.NEWBORN and len(self.visits) != 1:
            raise ValueError(f"newborn {self.patient_id} must have exactly one visit, got {len(self.visits)}")

    def visit_on(self, day: int) -> Visit | None:
        for v in self.visits:
            if v.day == day:
                return v
        return None


@dataclass(frozen=True)
class LabeledExample:
    """A truncated mother record with its clean and/or noisy outcome label."""

    record: PatientRecord
    clean_label: Label | None = None
    noisy_label: Label | None = None

    def __post_init__(self) -> None:
        if self.clean_label is None and self.noisy_label is None:
            raise ValueError(f"example {self.record.patient_id} carries no label")

    @property
    def patient_id(self) -> str:
        return self.record.patient_id


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[LabeledExample, ...]
    validation: tuple[LabeledExample, ...]
    test: tuple[LabeledExample, ...]
    seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "validation", tuple(self.validation))
        object.__setattr__(self, "test", tuple(self.test))
        ids: set[str] = set()
        for part in (self.train, self.validation, self.test):
            for ex in part:
                if ex.patient_id in ids:
                    raise ValueError(f"patient {ex.patient_id} appears in more than one split part")
                ids.add(ex.patient_id)
        for part_name, part in (("validation", self.validation), ("test", self.test)):
            for ex in part:
                if ex.clean_label is None:
                    raise ValueError(f"{part_name} example {ex.patient_id} lacks a clean label")


# --- cohort code rules ------------------------------------------------------
#
# Wildcard patterns ("644.2*") match any code sharing the prefix; exact
# patterns match only themselves.

PRETERM_DELIVERY_PREFIXES = ("644.2",)
PRETERM_DELIVERY_EXACT = frozenset({"640.01"})
FULLTERM_DELIVERY_PREFIXES = ("645",)
FULLTERM_DELIVERY_EXACT = frozenset({"650", "649.8", "652.5"})

NEWBORN_PRETERM_PREFIXES = ("765.0", "765.1")
# 765.21 through 765.28; 765.20 (unspecified weeks) stays unknown.
NEWBORN_PRETERM_EXACT = frozenset(f"765.2{d}" for d in range(1, 9))
NEWBORN_FULLTERM_EXACT = "765.29"


def _matches_any(code: str, prefixes: tuple[str, ...], exact: frozenset[str]) -> bool:
    return code in exact or any(code.startswith(p) for p in prefixes)


def classify_delivery(codes: Iterable[str]) -> DeliveryClass:
    """Classify a mother's delivery encounter from its code strings.

    Preterm indicators take precedence over full-term ones; anything matching
    neither list is Ambiguous.
    """
    codes = set(codes)
    if any(_matches_any(c, PRETERM_DELIVERY_PREFIXES, PRETERM_DELIVERY_EXACT) for c in codes):
        return DeliveryClass.PRETERM
    if any(_matches_any(c, FULLTERM_DELIVERY_PREFIXES, FULLTERM_DELIVERY_EXACT) for c in codes):
        return DeliveryClass.FULL_TERM
    return DeliveryClass.AMBIGUOUS


def classify_newborn(codes: Iterable[str]) -> NewbornClass:
    """Classify a newborn's birth encounter from its code strings."""
    codes = set(codes)
    if any(_matches_any(c, NEWBORN_PRETERM_PREFIXES, NEWBORN_PRETERM_EXACT) for c in codes):
        return NewbornClass.PRETERM
    if NEWBORN_FULLTERM_EXACT in codes:
        return NewbornClass.FULL_TERM
    return NewbornClass.UNKNOWN


# --- record transforms ------------------------------------------------------


def merge_same_day(record: PatientRecord) -> PatientRecord:
    """Collapse visits sharing a calendar day into one encounter: union of
    codes, earliest admission, latest discharge. Idempotent."""
    by_day: dict[int, list[Visit]] = {}
    for v in record.visits:
        by_day.setdefault(v.day, []).append(v)
    merged = []
    for day in sorted(by_day):
        group = by_day[day]
        codes = frozenset().union(*(v.codes for v in group))
        merged.append(
            Visit(
                day=day,
                codes=codes,
                t_adm=min(v.t_adm for v in group),
                t_dis=max(v.t_dis for v in group),
            )
        )
    return PatientRecord(
        patient_id=record.patient_id,
        hospital_id=record.hospital_id,
        role=record.role,
        visits=tuple(merged),
        delivery_day=record.delivery_day,
    )


def truncate_at_prediction_point(record: PatientRecord, period_days: int) -> PatientRecord:
    """Drop every visit later than delivery_day - period_days (boundary day is
    kept). The delivery_day field survives as metadata."""
    if record.delivery_day is None:
        raise ValueError(f"record {record.patient_id} has no delivery_day to truncate against")
    if period_days < 0:
        raise ValueError(f"period_days must be non-negative, got {period_days}")
    cutoff = record.delivery_day - period_days
    kept = tuple(v for v in record.visits if v.day <= cutoff)
    return PatientRecord(
        patient_id=record.patient_id,
        hospital_id=record.hospital_id,
        role=record.role,
        visits=kept,
        delivery_day=record.delivery_day,
    )


def apply_min_visit_filter(
    examples: Sequence[LabeledExample], min_visits: int = 2
) -> list[LabeledExample]:
    """Keep examples whose (already truncated) record has at least min_visits
    visits."""
    if min_visits < 0:
        raise ValueError(f"min_visits must be >= 0, got {min_visits}")
    return [ex for ex in examples if len(ex.record.visits) >= min_visits]


# --- persistence ------------------------------------------------------------
#
# Record files are line-delimited JSON, one patient per line, with codes
# stored as strings and resolved through the vocabulary on load.


def _visit_to_dict(visit: Visit, vocab: CodeVocabulary) -> dict:
    return {
        "day": visit.day,
        "codes": sorted(vocab.code(i) for i in visit.codes),
        "t_adm": visit.t_adm,
        "t_dis": visit.t_dis,
    }


def _label_to_json(label: Label | None) -> str | None:
    return None if label is None else label.to_json()


def record_to_dict(
    record: PatientRecord,
    vocab: CodeVocabulary,
    clean_label: Label | None = None,
    noisy_label: Label | None = None,
) -> dict:
    return {
        "patient_id": record.patient_id,
        "hospital_id": record.hospital_id,
        "role": record.role.value,
        "delivery_day": record.delivery_day,
        "visits": [_visit_to_dict(v, vocab) for v in record.visits],
        "clean_label": _label_to_json(clean_label),
        "noisy_label": _label_to_json(noisy_label),
    }


_REQUIRED_KEYS = ("patient_id", "hospital_id", "role", "delivery_day", "visits")


def record_from_dict(obj: dict, vocab: CodeVocabulary) -> tuple[PatientRecord, Label | None, Label | None]:
    for key in _REQUIRED_KEYS:
        if key not in obj:
            raise RecordFileError(f"missing key {key!r}")
    visits = []
    for v in obj["visits"]:
        codes = frozenset(vocab.index_of(c) for c in v["codes"])
        visits.append(Visit(day=v["day"], codes=codes, t_adm=v["t_adm"], t_dis=v["t_dis"]))
    record = PatientRecord(
        patient_id=obj["patient_id"],
        hospital_id=obj["hospital_id"],
        role=Role(obj["role"]),
        visits=tuple(visits),
        delivery_day=obj["delivery_day"],
    )
    clean = obj.get("clean_label")
    noisy = obj.get("noisy_label")
    return (
        record,
        None if clean is None else Label.from_json(clean),
        None if noisy is None else Label.from_json(noisy),
    )


def _write_lines(dicts: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in dicts:
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def _read_lines(path: str | Path, vocab: CodeVocabulary):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFileError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            try:
                yield record_from_dict(obj, vocab)
            except (RecordFileError, VocabularyError, ValueError, KeyError, TypeError) as exc:
                detail = exc.args[0] if exc.args else exc
                raise RecordFileError(f"{path}: line {lineno}: {detail}") from None


def save_records(records: Iterable[PatientRecord], path: str | Path, vocab: CodeVocabulary) -> None:
    _write_lines((record_to_dict(r, vocab) for r in records), path)


def load_records(path: str | Path, vocab: CodeVocabulary) -> list[PatientRecord]:
    return [rec for rec, _, _ in _read_lines(path, vocab)]


def save_examples(examples: Iterable[LabeledExample], path: str | Path, vocab: CodeVocabulary) -> None:
    _write_lines(
        (record_to_dict(ex.record, vocab, ex.clean_label, ex.noisy_label) for ex in examples),
        path,
    )


def load_examples(path: str | Path, vocab: CodeVocabulary) -> list[LabeledExample]:
    out = []
    for rec, clean, noisy in _read_lines(path, vocab):
        if clean is None and noisy is None:
            raise RecordFileError(f"{path}: example {rec.patient_id} carries no label")
        out.append(LabeledExample(record=rec, clean_label=clean, noisy_label=noisy))
    return out
