"""Class-conditional label corruption: the 2x2 row-stochastic matrix, its
frequency estimator over dual-labeled examples, and helpers to push clean
probabilities / labels through it."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .records import Label, LabeledExample

ROW_SUM_TOL = 1e-12
N_CLASSES = 2


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionMatrix:
    """entries[i, j] = p(noisy == j | clean == i), rows indexed preterm-first.

    counts holds the supporting contingency table when the matrix came from
    data; synthetic matrices may carry zero counts.
    """

    entries: np.ndarray
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.shape != (N_CLASSES, N_CLASSES):
            raise ValueError(f"corruption matrix must be 2x2, got shape {entries.shape}")
        if np.any(entries < 0.0) or np.any(entries > 1.0):
            raise ValueError("corruption matrix entries must lie in [0, 1]")
        row_sums = entries.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
            raise ValueError(f"corruption matrix rows must sum to 1, got {row_sums}")
        counts = self.counts
        if counts is None:
            counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (N_CLASSES, N_CLASSES):
            raise ValueError(f"count table must be 2x2, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("count table entries must be non-negative")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def identity(cls) -> "CorruptionMatrix":
        return cls(entries=np.eye(N_CLASSES))

    def support(self, clean: Label) -> int:
        return int(self.counts[int(clean)].sum())

    def is_diagonally_dominant(self) -> bool:
        return bool(np.all(np.diag(self.entries) > 0.5))


def estimate_corruption_matrix(d_prime: Sequence[LabeledExample]) -> CorruptionMatrix:
    """Frequency estimate over examples carrying both labels: entry (i, j) is
    the fraction of clean-class-i examples whose noisy label is j."""
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for ex in d_prime:
        if ex.clean_label is None or ex.noisy_label is None:
            raise EstimationError(f"example {ex.patient_id} lacks one of the two labels")
        counts[int(ex.clean_label), int(ex.noisy_label)] += 1
    row_sums = counts.sum(axis=1)
    for i in range(N_CLASSES):
        if row_sums[i] == 0:
            raise EstimationError(f"no examples with clean label {Label(i).name}; cannot estimate row")
    entries = counts / row_sums[:, None]
    return CorruptionMatrix(entries=entries, counts=counts)


def corrected_probabilities(p: np.ndarray, c: CorruptionMatrix) -> np.ndarray:
    """Map clean-class probabilities to noisy-class probabilities:
    q_j = sum_i p_i * entries[i, j]. Accepts a single distribution or a batch
    of row distributions."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != N_CLASSES:
        raise ValueError(f"probability vector must have {N_CLASSES} entries, got shape {p.shape}")
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("input must be a probability distribution over classes")
    return p @ c.entries


def apply_class_conditional_noise(
    labels: Sequence[Label], c: CorruptionMatrix, seed: int
) -> list[Label]:
    """Draw a noisy label for each clean label from the matching matrix row."""
    rng = np.random.default_rng(seed)
    u = rng.random(len(labels))
    out = []
    for k, label in enumerate(labels):
        keep_p = c.entries[int(label), int(label)]
        noisy = label if u[k] < keep_p else Label(1 - int(label))
        out.append(noisy)
    return out


def save_matrix_csv(c: CorruptionMatrix, path: str | Path) -> None:
    """Four-line CSV: two entry rows printed with six fractional digits, then
    the two supporting count rows."""
    lines = []
    for i in range(N_CLASSES):
        lines.append(",".join(f"{c.entries[i, j]:.6f}" for j in range(N_CLASSES)))
    for i in range(N_CLASSES):
        lines.append(",".join(str(int(c.counts[i, j])) for j in range(N_CLASSES)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_matrix_csv(path: str | Path) -> CorruptionMatrix:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) != 4:
        raise ValueError(f"{path}: corruption matrix file must have 4 rows, got {len(lines)}")
    entries = np.array([[float(x) for x in lines[i].split(",")] for i in range(2)])
    counts = np.array([[int(x) for x in lines[i].split(",")] for i in (2, 3)])
    # Six-digit printing can leave rows a hair off 1; renormalize the residue.
    entries = entries / entries.sum(axis=1, keepdims=True)
    return CorruptionMatrix(entries=entries, counts=counts)
