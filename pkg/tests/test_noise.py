from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pretermalc.noise import (
    CorruptionMatrix,
    EstimationError,
    apply_class_conditional_noise,
    corrected_probabilities,
    estimate_corruption_matrix,
    load_matrix_csv,
    save_matrix_csv,
)
from pretermalc.records import Label, LabeledExample, PatientRecord, Role, Visit

REFERENCE_ENTRIES = np.array([[0.68, 0.32], [0.20, 0.80]])


def dual_example(i, clean, noisy):
    visit = Visit(day=1, codes=frozenset({0}), t_adm=1500, t_dis=1600)
    rec = PatientRecord(
        patient_id=f"p{i:05d}", hospital_id="h00", role=Role.MOTHER,
        visits=(visit,), delivery_day=1,
    )
    return LabeledExample(record=rec, clean_label=clean, noisy_label=noisy)


def examples_with_counts(counts):
    out = []
    k = 0
    for i in range(2):
        for j in range(2):
            for _ in range(counts[i][j]):
                out.append(dual_example(k, Label(i), Label(j)))
                k += 1
    return out


# --- matrix invariants ----------------------------------------------------------


def test_matrix_validation():
    with pytest.raises(ValueError, match="2x2"):
        CorruptionMatrix(np.eye(3))
    with pytest.raises(ValueError, match="sum to 1"):
        CorruptionMatrix(np.array([[0.6, 0.3], [0.2, 0.8]]))
    with pytest.raises(ValueError, match="\\[0, 1\\]"):
        CorruptionMatrix(np.array([[1.2, -0.2], [0.2, 0.8]]))
    with pytest.raises(ValueError, match="non-negative"):
        CorruptionMatrix(np.eye(2), counts=np.array([[-1, 0], [0, 0]]))


def test_identity_and_dominance():
    eye = CorruptionMatrix.identity()
    assert np.array_equal(eye.entries, np.eye(2))
    assert eye.is_diagonally_dominant()
    assert not CorruptionMatrix(np.array([[0.4, 0.6], [0.2, 0.8]])).is_diagonally_dominant()


# --- estimator ------------------------------------------------------------------


def test_estimator_reference_frequencies():
    examples = examples_with_counts([[68, 32], [20, 80]])
    c = estimate_corruption_matrix(examples)
    assert np.allclose(c.entries, REFERENCE_ENTRIES, atol=0, rtol=0)
    assert c.counts.tolist() == [[68, 32], [20, 80]]
    assert c.support(Label.PRETERM) == 100
    assert c.support(Label.FULL_TERM) == 100


def test_estimator_identity_when_labels_agree():
    examples = examples_with_counts([[7, 0], [0, 11]])
    c = estimate_corruption_matrix(examples)
    assert np.array_equal(c.entries, np.eye(2))


def test_estimator_small_counts_exact_rationals():
    # (Pre,Pre), (Pre,Full), (Pre,Pre), (Full,Full)
    examples = examples_with_counts([[2, 1], [0, 1]])
    c = estimate_corruption_matrix(examples)
    expected = [[Fraction(2, 3), Fraction(1, 3)], [Fraction(0), Fraction(1)]]
    for i in range(2):
        for j in range(2):
            assert c.entries[i, j] == float(expected[i][j])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_estimator_equals_normalized_confusion_counts(pairs):
    counts = [[0, 0], [0, 0]]
    for i, j in pairs:
        counts[i][j] += 1
    examples = examples_with_counts(counts)
    if counts[0][0] + counts[0][1] == 0 or counts[1][0] + counts[1][1] == 0:
        with pytest.raises(EstimationError, match="PRETERM|FULL_TERM"):
            estimate_corruption_matrix(examples)
        return
    c = estimate_corruption_matrix(examples)
    for i in range(2):
        row_n = counts[i][0] + counts[i][1]
        for j in range(2):
            assert c.entries[i, j] == counts[i][j] / row_n
    assert abs(c.entries[0].sum() - 1.0) <= 1e-12
    assert abs(c.entries[1].sum() - 1.0) <= 1e-12


def test_estimator_error_names_empty_class():
    with pytest.raises(EstimationError, match="FULL_TERM"):
        estimate_corruption_matrix(examples_with_counts([[3, 1], [0, 0]]))
    with pytest.raises(EstimationError, match="PRETERM"):
        estimate_corruption_matrix(examples_with_counts([[0, 0], [1, 3]]))


def test_estimator_rejects_single_label_example():
    bad = LabeledExample(
        record=dual_example(0, Label.PRETERM, Label.PRETERM).record,
        clean_label=Label.PRETERM,
    )
    with pytest.raises(EstimationError, match="lacks"):
        estimate_corruption_matrix([bad])


# --- applying noise ---------------------------------------------------------------


def test_apply_identity_keeps_labels():
    labels = [Label.PRETERM, Label.FULL_TERM] * 10
    assert apply_class_conditional_noise(labels, CorruptionMatrix.identity(), seed=3) == labels


def test_apply_antidiagonal_flips_all():
    flip = CorruptionMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    labels = [Label.PRETERM, Label.FULL_TERM] * 10
    flipped = apply_class_conditional_noise(labels, flip, seed=3)
    assert all(a != b for a, b in zip(labels, flipped))


def test_apply_matches_binomial_rate():
    c = CorruptionMatrix(REFERENCE_ENTRIES)
    labels = [Label.PRETERM] * 10_000
    noisy = apply_class_conditional_noise(labels, c, seed=11)
    flipped = sum(1 for y in noisy if y is Label.FULL_TERM) / len(labels)
    assert abs(flipped - 0.32) < 0.015  # 3 sigma of Binomial(10000, 0.32)


def test_apply_deterministic_given_seed():
    c = CorruptionMatrix(REFERENCE_ENTRIES)
    labels = [Label.PRETERM, Label.FULL_TERM] * 50
    assert apply_class_conditional_noise(labels, c, 7) == apply_class_conditional_noise(labels, c, 7)


def test_estimate_then_apply_reproduces_joint_distribution():
    rng = np.random.default_rng(5)
    clean = [Label(int(v)) for v in rng.integers(0, 2, size=10_000)]
    c_true = CorruptionMatrix(REFERENCE_ENTRIES)
    noisy = apply_class_conditional_noise(clean, c_true, seed=17)
    examples = [dual_example(k, y, t) for k, (y, t) in enumerate(zip(clean, noisy))]
    c_hat = estimate_corruption_matrix(examples)
    for i in range(2):
        n_i = c_hat.support(Label(i))
        sigma = np.sqrt(REFERENCE_ENTRIES[i, 0] * REFERENCE_ENTRIES[i, 1] / n_i)
        assert np.all(np.abs(c_hat.entries[i] - REFERENCE_ENTRIES[i]) < 3 * sigma)


# --- corrected probabilities -------------------------------------------------------


def test_corrected_identity_is_exact():
    p = np.array([0.3, 0.7])
    q = corrected_probabilities(p, CorruptionMatrix.identity())
    assert np.array_equal(q, p)


def test_corrected_reference_rows():
    c = CorruptionMatrix(REFERENCE_ENTRIES)
    assert np.allclose(corrected_probabilities(np.array([1.0, 0.0]), c), [0.68, 0.32])
    assert np.allclose(corrected_probabilities(np.array([0.5, 0.5]), c), [0.44, 0.56])


def test_corrected_batch_shape():
    c = CorruptionMatrix(REFERENCE_ENTRIES)
    p = np.array([[1.0, 0.0], [0.0, 1.0], [0.25, 0.75]])
    q = corrected_probabilities(p, c)
    assert q.shape == (3, 2)
    assert np.allclose(q[0], [0.68, 0.32])
    assert np.allclose(q[1], [0.20, 0.80])


def test_corrected_rejects_non_distribution():
    c = CorruptionMatrix(REFERENCE_ENTRIES)
    with pytest.raises(ValueError):
        corrected_probabilities(np.array([0.9, 0.9]), c)


@given(
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
)
def test_corrected_preserves_distribution(p0, a, b):
    p = np.array([p0, 1.0 - p0])
    c = CorruptionMatrix(np.array([[a, 1.0 - a], [b, 1.0 - b]]))
    q = corrected_probabilities(p, c)
    assert abs(q.sum() - 1.0) < 1e-12
    assert np.all(q >= -1e-15) and np.all(q <= 1.0 + 1e-15)


# --- persistence --------------------------------------------------------------------


def test_matrix_csv_round_trip(tmp_path):
    examples = examples_with_counts([[68, 32], [20, 80]])
    c = estimate_corruption_matrix(examples)
    path = tmp_path / "c.csv"
    save_matrix_csv(c, path)
    again = load_matrix_csv(path)
    assert np.allclose(again.entries, c.entries, atol=1e-6)
    assert np.array_equal(again.counts, c.counts)
    assert np.all(np.abs(again.entries.sum(axis=1) - 1.0) <= 1e-12)


def test_matrix_csv_rejects_wrong_shape(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0.5,0.5\n")
    with pytest.raises(ValueError, match="4 rows"):
        load_matrix_csv(path)
