"""Attention-based visit-sequence classifier: forward pass, losses,
reverse-mode gradients, and checkpoint persistence."""

import math

import numpy as np
import pytest

from helpers import max_gradient_rel_error, random_small_setup, reference_matrix
from pretermalc.net import (
    CHECKPOINT_MAGIC,
    CORRECTED,
    LOSS_EPS,
    PLAIN,
    Batch,
    NetDims,
    backward,
    embed_visit,
    forward,
    init_params,
    load_checkpoint,
    loss_clean,
    loss_corrected,
    predict_probs,
    save_checkpoint,
    sequence_of,
)
from pretermalc.noise import CorruptionMatrix
from pretermalc.records import LabeledExample, PatientRecord, Role, Visit

TINY = NetDims(vocab_size=20, d_emb=8, d_h=8)


def zeroed_params(dims=TINY):
    params = init_params(dims, seed=0)
    for _, tensor in params.named_tensors():
        tensor[...] = 0.0
    return params


def confident_params(dims=TINY):
    """All-zero network that always answers [~1, ~0]."""
    params = zeroed_params(dims)
    params.out_b[...] = (50.0, -50.0)
    return params


# --- visit embedding ----------------------------------------------------------


def test_embed_visit_empty_is_zero_vector():
    params = init_params(TINY, seed=3)
    assert np.array_equal(embed_visit(params, ()), np.zeros(TINY.d_emb))


def test_embed_visit_single_code_is_its_row():
    params = init_params(TINY, seed=3)
    assert np.array_equal(embed_visit(params, (7,)), params.emb[7])


def test_embed_visit_sums_code_rows():
    params = init_params(TINY, seed=3)
    got = embed_visit(params, (2, 7))
    assert np.array_equal(got, params.emb[2] + params.emb[7])


def test_embed_visit_rejects_out_of_range_code():
    params = init_params(TINY, seed=3)
    with pytest.raises(ValueError, match="out of range"):
        embed_visit(params, (TINY.vocab_size,))


def test_sequence_of_orders_codes_within_visit():
    visits = (
        Visit(day=0, codes=frozenset({5, 2}), t_adm=60, t_dis=120),
        Visit(day=2, codes=frozenset({9, 0, 4}), t_adm=2940, t_dis=3000),
    )
    rec = PatientRecord(patient_id="p0", hospital_id="h00", role=Role.MOTHER, visits=visits)
    assert sequence_of(LabeledExample(rec, clean_label=None, noisy_label=0)) == [(2, 5), (0, 4, 9)]


# --- batches ------------------------------------------------------------------


def test_batch_rejects_empty_input():
    with pytest.raises(ValueError, match="empty batch"):
        Batch.from_sequences([])
    with pytest.raises(ValueError, match="only empty sequences"):
        Batch.from_sequences([[], []])


def test_batch_pads_to_longest_sequence():
    batch = Batch.from_sequences([[(1,), (2,)], [(3,)]])
    assert batch.size == 2
    assert batch.n_steps == 2
    assert batch.codes[1] == [(3,), ()]
    assert np.array_equal(batch.mask, [[1.0, 1.0], [1.0, 0.0]])


# --- forward pass -------------------------------------------------------------


def test_forward_shapes_and_normalization():
    params, batch, _ = random_small_setup(11)
    trace = forward(params, batch)
    B, T = batch.mask.shape
    assert trace.V.shape == (B, T, TINY.d_emb)
    assert trace.alpha.shape == (B, T)
    assert trace.probs.shape == (B, 2)
    assert np.all(np.isfinite(trace.probs))
    assert np.all(trace.probs > 0)
    assert np.max(np.abs(trace.probs.sum(axis=1) - 1.0)) < 1e-12
    assert np.max(np.abs(trace.alpha.sum(axis=1) - 1.0)) < 1e-12


def test_forward_attention_is_zero_on_padding():
    batch = Batch.from_sequences([[(0,), (1,), (2,)], [(3,)]])
    trace = forward(init_params(TINY, seed=5), batch)
    assert trace.alpha[1, 1] == 0.0
    assert trace.alpha[1, 2] == 0.0
    assert trace.alpha[1, 0] == 1.0


def test_forward_single_visit_gets_full_attention():
    trace = forward(init_params(TINY, seed=5), Batch.from_sequences([[(4, 9)]]))
    assert np.array_equal(trace.alpha, [[1.0]])


def test_forward_zero_params_answer_half_half():
    trace = forward(zeroed_params(), Batch.from_sequences([[(0,), (1, 2)], [(3,)]]))
    assert np.all(trace.probs == 0.5)


def test_forward_rejects_sequence_without_visits():
    batch = Batch(codes=[[(1,)], [()]], mask=np.array([[1.0], [0.0]]))
    with pytest.raises(ValueError, match="sequence 1 has no valid visits"):
        forward(init_params(TINY, seed=5), batch)


def test_forward_rejects_out_of_range_code():
    batch = Batch.from_sequences([[(TINY.vocab_size,)]])
    with pytest.raises(ValueError, match="code index 20 out of range"):
        forward(init_params(TINY, seed=5), batch)


def test_forward_ignores_content_under_mask_zero():
    params, _, _ = random_small_setup(12)
    plain = Batch.from_sequences([[(0,), (1, 2)], [(3,)]])
    tampered = Batch(codes=[plain.codes[0], [(3,), (7, 8, 9)]], mask=plain.mask.copy())
    t_plain = forward(params, plain)
    t_tampered = forward(params, tampered)
    assert np.array_equal(t_plain.probs, t_tampered.probs)
    labels = np.array([0, 1])
    g_plain = backward(params, plain, t_plain, labels, PLAIN)
    g_tampered = backward(params, tampered, t_tampered, labels, PLAIN)
    for name, g in g_plain.items():
        assert np.array_equal(g, g_tampered[name]), name


def test_forward_batched_matches_solo_within_padding_tolerance():
    params, batch, _ = random_small_setup(13)
    batched = forward(params, batch).probs
    for b, seq in enumerate(batch.codes):
        valid = [v for t, v in enumerate(seq) if batch.mask[b, t] > 0]
        solo = forward(params, Batch.from_sequences([valid])).probs[0]
        assert np.max(np.abs(batched[b] - solo)) < 1e-12


def test_predict_probs_matches_forward_across_chunk_sizes():
    params, batch, _ = random_small_setup(14)
    seqs = [[v for t, v in enumerate(row) if batch.mask[b, t] > 0] for b, row in enumerate(batch.codes)]
    solo = np.stack([forward(params, Batch.from_sequences([s])).probs[0] for s in seqs])
    for chunk in (1, 2, 256):
        assert np.max(np.abs(predict_probs(params, seqs, batch_size=chunk) - solo)) < 1e-12


# --- losses -------------------------------------------------------------------


def test_loss_clean_zero_params_is_log_two():
    trace = forward(zeroed_params(), Batch.from_sequences([[(1,)], [(2,), (3,)]]))
    assert abs(loss_clean(trace, np.array([0, 1])) - math.log(2.0)) < 1e-6


def test_loss_clean_confident_correct_is_near_zero():
    trace = forward(confident_params(), Batch.from_sequences([[(1,)]]))
    assert abs(loss_clean(trace, np.array([0]))) < 1e-6


def test_loss_clean_confident_wrong_is_floored_not_infinite():
    trace = forward(confident_params(), Batch.from_sequences([[(1,)]]))
    loss = loss_clean(trace, np.array([1]))
    assert math.isfinite(loss)
    assert abs(loss - (-math.log(LOSS_EPS))) < 1e-3


def test_loss_corrected_pushes_probs_through_matrix():
    c = reference_matrix()
    trace = forward(confident_params(), Batch.from_sequences([[(1,)]]))
    assert abs(loss_corrected(trace, np.array([0]), c) - (-math.log(0.68))) < 1e-5
    assert abs(loss_corrected(trace, np.array([1]), c) - (-math.log(0.32))) < 1e-5


def test_loss_corrected_with_identity_matches_clean_exactly():
    params, batch, labels = random_small_setup(15)
    trace = forward(params, batch)
    assert loss_corrected(trace, labels, CorruptionMatrix(np.eye(2))) == loss_clean(trace, labels)


def test_batch_loss_is_mean_of_single_losses():
    params, batch, labels = random_small_setup(16)
    whole = loss_clean(forward(params, batch), labels)
    singles = []
    for b, row in enumerate(batch.codes):
        valid = [v for t, v in enumerate(row) if batch.mask[b, t] > 0]
        singles.append(loss_clean(forward(params, Batch.from_sequences([valid])), labels[b : b + 1]))
    assert abs(whole - float(np.mean(singles))) < 1e-12


def test_loss_rejects_bad_labels():
    trace = forward(init_params(TINY, seed=5), Batch.from_sequences([[(1,)]]))
    with pytest.raises(ValueError, match="expected 1 labels"):
        loss_clean(trace, np.array([0, 1]))
    with pytest.raises(ValueError, match="labels must be 0"):
        loss_clean(trace, np.array([2]))


# --- gradients ----------------------------------------------------------------


@pytest.mark.parametrize("seed", [21, 22])
def test_gradients_match_central_differences(seed):
    params, batch, labels = random_small_setup(seed)
    assert max_gradient_rel_error(params, batch, labels, PLAIN) < 1e-4
    assert max_gradient_rel_error(params, batch, labels, CORRECTED, c=reference_matrix()) < 1e-4


def test_unused_embedding_rows_get_zero_gradient():
    params = init_params(TINY, seed=7)
    batch = Batch.from_sequences([[(0,), (1,)], [(1,)]])
    grads = backward(params, batch, forward(params, batch), np.array([0, 1]), PLAIN)
    assert np.all(grads["emb"][2:] == 0.0)
    assert np.any(grads["emb"][:2] != 0.0)


def test_backward_requires_matrix_for_corrected_loss():
    params, batch, labels = random_small_setup(23)
    trace = forward(params, batch)
    with pytest.raises(ValueError, match="requires a corruption matrix"):
        backward(params, batch, trace, labels, CORRECTED)
    with pytest.raises(ValueError, match="unknown loss kind"):
        backward(params, batch, trace, labels, "fancy")


# --- initialization -----------------------------------------------------------


def test_init_is_seed_deterministic():
    a = init_params(TINY, seed=42)
    b = init_params(TINY, seed=42)
    other = init_params(TINY, seed=43)
    for name, tensor in a.named_tensors():
        assert np.array_equal(tensor, b.tensor(name)), name
    assert not np.array_equal(a.emb, other.emb)


def test_init_zero_biases_and_weight_bounds():
    params = init_params(TINY, seed=9)
    for name, tensor in params.named_tensors():
        if name.endswith(("b_z", "b_r", "b_h", "att_b", "proj_b", "out_b")):
            assert np.all(tensor == 0.0), name
    bound = math.sqrt(6.0 / (TINY.vocab_size + TINY.d_emb))
    assert np.max(np.abs(params.emb)) <= bound
    assert np.min(params.emb) < 0 < np.max(params.emb)


def test_init_forward_is_finite_across_many_seeds():
    batch = Batch.from_sequences([[(0, 3), (5,)], [(19,)]])
    for seed in range(100):
        probs = forward(init_params(TINY, seed=seed), batch).probs
        assert np.all(np.isfinite(probs))
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12


# --- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params, _, _ = random_small_setup(31)
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.dims == params.dims
    for name, tensor in params.named_tensors():
        assert np.array_equal(tensor, loaded.tensor(name)), name


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"some other format\n")
    with pytest.raises(ValueError, match="not a recognized checkpoint"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    params = init_params(TINY, seed=1)
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ValueError, match="truncated tensor"):
        load_checkpoint(path)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    params = init_params(TINY, seed=1)
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ValueError, match="trailing bytes"):
        load_checkpoint(path)


def test_checkpoint_starts_with_named_version_line(tmp_path):
    params = init_params(TINY, seed=1)
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    assert path.read_bytes().split(b"\n", 1)[0].decode("ascii") == CHECKPOINT_MAGIC
