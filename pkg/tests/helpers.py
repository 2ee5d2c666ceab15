"""Shared test utilities: small random network setups and a full-coordinate
finite-difference gradient check."""

from __future__ import annotations

import numpy as np

from pretermalc.net import (
    CORRECTED,
    PLAIN,
    Batch,
    ModelParams,
    NetDims,
    backward,
    forward,
    init_params,
    loss_clean,
    loss_corrected,
)
from pretermalc.noise import CorruptionMatrix

REFERENCE_ENTRIES = np.array([[0.68, 0.32], [0.20, 0.80]])


def reference_matrix() -> CorruptionMatrix:
    return CorruptionMatrix(REFERENCE_ENTRIES.copy())


def random_small_setup(
    seed: int, vocab_size: int = 20, d: int = 8
) -> tuple[ModelParams, Batch, np.ndarray]:
    """A small random model plus a batch of variable-length sequences.

    Batch size 2..4, one to five visits each, one to four codes per visit,
    random binary labels. Small enough that checking every parameter
    coordinate stays fast.
    """
    rng = np.random.default_rng(seed)
    params = init_params(NetDims(vocab_size, d_emb=d, d_h=d), seed=int(rng.integers(2**31)))
    seqs = []
    for _ in range(int(rng.integers(2, 5))):
        n_visits = int(rng.integers(1, 6))
        seqs.append(
            [
                tuple(sorted(rng.choice(vocab_size, size=int(rng.integers(1, 5)), replace=False).tolist()))
                for _ in range(n_visits)
            ]
        )
    labels = rng.integers(0, 2, size=len(seqs))
    return params, Batch.from_sequences(seqs), labels


def max_gradient_rel_error(
    params: ModelParams,
    batch: Batch,
    labels: np.ndarray,
    loss_kind: str,
    c: CorruptionMatrix | None = None,
    h: float = 1e-5,
) -> float:
    """Worst relative error between reverse-mode and central-difference
    gradients over every coordinate of every parameter tensor.

    Relative error is |numeric - analytic| / max(|numeric|, |analytic|, 1e-6);
    the floor keeps finite-difference noise on dead coordinates from
    registering as disagreement.
    """

    def loss() -> float:
        trace = forward(params, batch)
        if loss_kind == PLAIN:
            return loss_clean(trace, labels)
        return loss_corrected(trace, labels, c)

    grads = backward(params, batch, forward(params, batch), labels, loss_kind, c)
    worst = 0.0
    for name, tensor in params.named_tensors():
        analytic = grads[name]
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            saved = tensor[idx]
            tensor[idx] = saved + h
            up = loss()
            tensor[idx] = saved - h
            down = loss()
            tensor[idx] = saved
            numeric = (up - down) / (2.0 * h)
            err = abs(numeric - analytic[idx]) / max(abs(numeric), abs(analytic[idx]), 1e-6)
            worst = max(worst, err)
    return worst
