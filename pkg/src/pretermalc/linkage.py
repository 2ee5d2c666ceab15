"""Heuristic mother-newborn linkage on encounter timestamps.

Within each hospital a newborn is matched to the mother whose delivery
encounter minimizes |delta t_adm| + |delta t_dis|. Matching runs in three
stages: nearest mother per newborn (ties to the lexicographically smaller
mother_id), distance threshold, then a per-mother capacity cap keeping only
the nearest newborns. Thresholding happens before capping, so a newborn
whose sole nearest mother is too far away stays unmatched rather than being
reassigned.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .records import (
    CodeVocabulary,
    Label,
    NewbornClass,
    PatientRecord,
    Role,
    Visit,
    classify_newborn,
)

DEFAULT_MAX_L1_MINUTES = 24 * 60
DEFAULT_MAX_PER_MOTHER = 3


class LinkageError(ValueError):
    pass


@dataclass(frozen=True)
class MatchCandidate:
    newborn_id: str
    mother_id: str
    l1_minutes: int

    def __post_init__(self) -> None:
        if self.l1_minutes < 0:
            raise ValueError("negative link distance")


@dataclass(frozen=True)
class LinkSet:
    links: tuple[MatchCandidate, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "links", tuple(self.links))
        seen: set[str] = set()
        for link in self.links:
            if link.newborn_id in seen:
                raise ValueError(f"newborn {link.newborn_id} linked more than once")
            seen.add(link.newborn_id)

    def __len__(self) -> int:
        return len(self.links)

    def __iter__(self):
        return iter(self.links)

    def as_map(self) -> dict[str, str]:
        return {l.newborn_id: l.mother_id for l in self.links}


def delivery_visit(mother: PatientRecord) -> Visit:
    """The mother's encounter on her delivery day."""
    if mother.delivery_day is None:
        raise LinkageError(f"mother {mother.patient_id} has no delivery_day")
    visit = mother.visit_on(mother.delivery_day)
    if visit is None:
        raise LinkageError(f"mother {mother.patient_id} has no visit on delivery day {mother.delivery_day}")
    return visit


def time_distance(mother: PatientRecord, newborn: PatientRecord) -> int:
    """L1 distance in minutes between the mother's delivery encounter and the
    newborn's birth encounter."""
    mv = delivery_visit(mother)
    if len(newborn.visits) != 1:
        raise LinkageError(f"newborn {newborn.patient_id} must have exactly one visit")
    bv = newborn.visits[0]
    return abs(mv.t_adm - bv.t_adm) + abs(mv.t_dis - bv.t_dis)


@dataclass(frozen=True)
class _MotherPoint:
    t_adm: int
    t_dis: int
    mother_id: str


def _eligible_mothers(mothers: Iterable[PatientRecord]) -> dict[str, list[_MotherPoint]]:
    by_hospital: dict[str, list[_MotherPoint]] = {}
    for m in mothers:
        if m.role is not Role.MOTHER or m.delivery_day is None:
            continue
        visit = m.visit_on(m.delivery_day)
        if visit is None:
            continue
        by_hospital.setdefault(m.hospital_id, []).append(
            _MotherPoint(visit.t_adm, visit.t_dis, m.patient_id)
        )
    for points in by_hospital.values():
        points.sort(key=lambda p: (p.t_adm, p.mother_id))
    return by_hospital


def _nearest_mother(points: list[_MotherPoint], adms: list[int], b_adm: int, b_dis: int) -> tuple[int, str] | None:
    """Scan outward from the admission-time insertion point. Any mother not
    visited has |delta t_adm| greater than the best L1 found so far and thus
    cannot win or tie."""
    n = len(points)
    if n == 0:
        return None
    left = bisect.bisect_left(adms, b_adm) - 1
    right = left + 1
    best_l1: int | None = None
    best_id: str | None = None
    while left >= 0 or right < n:
        dl = b_adm - adms[left] if left >= 0 else None
        dr = adms[right] - b_adm if right < n else None
        if dr is None or (dl is not None and dl <= dr):
            idx, gap = left, dl
            left -= 1
        else:
            idx, gap = right, dr
            right += 1
        if best_l1 is not None and gap > best_l1:
            break
        p = points[idx]
        l1 = abs(p.t_adm - b_adm) + abs(p.t_dis - b_dis)
        if best_l1 is None or l1 < best_l1 or (l1 == best_l1 and p.mother_id < best_id):
            best_l1, best_id = l1, p.mother_id
    assert best_l1 is not None and best_id is not None
    return best_l1, best_id


def match_newborns(
    mothers: Sequence[PatientRecord],
    newborns: Sequence[PatientRecord],
    vocab: CodeVocabulary,
    max_per_mother: int = DEFAULT_MAX_PER_MOTHER,
    max_l1_minutes: int = DEFAULT_MAX_L1_MINUTES,
) -> LinkSet:
    """Match newborns to delivery encounters hospital by hospital.

    Mothers without a delivery encounter and newborns whose birth codes do
    not classify are ignored. Output is sorted by newborn_id and independent
    of input ordering.
    """
    if max_per_mother < 1:
        raise LinkageError(f"max_per_mother must be >= 1, got {max_per_mother}")
    if max_l1_minutes < 0:
        raise LinkageError(f"max_l1_minutes must be >= 0, got {max_l1_minutes}")
    by_hospital = _eligible_mothers(mothers)
    adms_by_hospital = {h: [p.t_adm for p in pts] for h, pts in by_hospital.items()}

    # stage 1: nearest mother per classifiable newborn
    assigned: list[MatchCandidate] = []
    for baby in newborns:
        if baby.role is not Role.NEWBORN:
            continue
        if classify_newborn(vocab.decode(baby.visits[0].codes)) is NewbornClass.UNKNOWN:
            continue
        points = by_hospital.get(baby.hospital_id)
        if not points:
            continue
        bv = baby.visits[0]
        found = _nearest_mother(points, adms_by_hospital[baby.hospital_id], bv.t_adm, bv.t_dis)
        if found is None:
            continue
        l1, mother_id = found
        assigned.append(MatchCandidate(baby.patient_id, mother_id, l1))

    # stage 2: distance threshold
    assigned = [c for c in assigned if c.l1_minutes <= max_l1_minutes]

    # stage 3: per-mother capacity, nearest newborns first
    per_mother: dict[str, list[MatchCandidate]] = {}
    for cand in assigned:
        per_mother.setdefault(cand.mother_id, []).append(cand)
    kept: list[MatchCandidate] = []
    for cands in per_mother.values():
        cands.sort(key=lambda c: (c.l1_minutes, c.newborn_id))
        kept.extend(cands[:max_per_mother])

    kept.sort(key=lambda c: c.newborn_id)
    return LinkSet(links=tuple(kept))


def derive_noisy_labels(
    links: LinkSet | Mapping[str, str],
    newborns: Sequence[PatientRecord],
    vocab: CodeVocabulary,
) -> dict[str, Label]:
    """Mother-level noisy label from her linked newborns: preterm if any baby
    classifies preterm, else full-term. Every linked baby must classify."""
    link_map = links.as_map() if isinstance(links, LinkSet) else dict(links)
    babies_by_id = {b.patient_id: b for b in newborns}
    out: dict[str, Label] = {}
    for newborn_id, mother_id in link_map.items():
        baby = babies_by_id.get(newborn_id)
        if baby is None:
            raise LinkageError(f"linked newborn {newborn_id} not present in records")
        cls = classify_newborn(vocab.decode(baby.visits[0].codes))
        if cls is NewbornClass.UNKNOWN:
            raise LinkageError(f"linked newborn {newborn_id} has no classifiable outcome codes")
        label = Label.PRETERM if cls is NewbornClass.PRETERM else Label.FULL_TERM
        prev = out.get(mother_id)
        if prev is None:
            out[mother_id] = label
        elif label is Label.PRETERM:
            out[mother_id] = Label.PRETERM
    return out


def link_accuracy(
    links: LinkSet,
    truth,
    newborns: Sequence[PatientRecord],
    vocab: CodeVocabulary,
) -> tuple[float, float]:
    """(pair_accuracy, label_accuracy) against ground truth.

    pair_accuracy: fraction of links whose mother is the true mother.
    label_accuracy: fraction of matched mothers whose derived noisy label
    equals their true label. The two differ whenever a wrong link still lands
    on a mother of the same class.
    """
    if len(links) == 0:
        raise LinkageError("cannot score an empty link set")
    correct = sum(1 for l in links if truth.links.get(l.newborn_id) == l.mother_id)
    pair_accuracy = correct / len(links)
    noisy = derive_noisy_labels(links, newborns, vocab)
    if not noisy:
        raise LinkageError("no labeled mothers among the links")
    hits = 0
    for mother_id, label in noisy.items():
        true_label = truth.labels.get(mother_id)
        if true_label is None:
            raise LinkageError(f"mother {mother_id} missing from ground-truth labels")
        hits += int(label == true_label)
    return pair_accuracy, hits / len(noisy)


def save_links(links: LinkSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for l in links:
            fh.write(f"{l.newborn_id}\t{l.mother_id}\t{l.l1_minutes}\n")


def load_links(path: str | Path) -> LinkSet:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise LinkageError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            out.append(MatchCandidate(parts[0], parts[1], int(parts[2])))
    return LinkSet(links=tuple(out))
