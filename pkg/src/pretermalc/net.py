"""Visit-sequence classifier with two reverse-time gated recurrences and
two attention channels: a scalar weight per visit (masked softmax) and a
gate vector per embedding dimension. The context vector is the attention-
weighted sum of visit embeddings, mapped to two-class probabilities.

All forward math and the full reverse-mode gradient are written out by hand
in float64 numpy; correctness is pinned by central finite differences in the
test suite rather than by an autodiff framework.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .noise import CorruptionMatrix
from .records import LabeledExample

LOSS_EPS = 1e-7  # floor added to the picked probability before log
CHECKPOINT_MAGIC = "pretermalc-checkpoint 1"

PLAIN = "plain"
CORRECTED = "corrected"

VisitCodes = tuple[int, ...]
Sequences = "list[list[VisitCodes]]"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class NetDims:
    vocab_size: int
    d_emb: int = 64
    d_h: int = 64

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_emb", "d_h"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class GruCellParams:
    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray

    _FIELDS = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")

    def named(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for name in self._FIELDS:
            yield f"{prefix}.{name}", getattr(self, name)

    def copy(self) -> "GruCellParams":
        return GruCellParams(*(getattr(self, f).copy() for f in self._FIELDS))


@dataclass
class ModelParams:
    dims: NetDims
    emb: np.ndarray  # (vocab, d_emb)
    alpha_cell: GruCellParams
    beta_cell: GruCellParams
    att_w: np.ndarray  # (d_h,)
    att_b: np.ndarray  # (1,)
    proj_w: np.ndarray  # (d_emb, d_h)
    proj_b: np.ndarray  # (d_emb,)
    out_w: np.ndarray  # (2, d_emb)
    out_b: np.ndarray  # (2,)

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "emb", self.emb
        yield from self.alpha_cell.named("alpha")
        yield from self.beta_cell.named("beta")
        yield "att_w", self.att_w
        yield "att_b", self.att_b
        yield "proj_w", self.proj_w
        yield "proj_b", self.proj_b
        yield "out_w", self.out_w
        yield "out_b", self.out_b

    def tensor(self, name: str) -> np.ndarray:
        for n, t in self.named_tensors():
            if n == name:
                return t
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams(
            dims=self.dims,
            emb=self.emb.copy(),
            alpha_cell=self.alpha_cell.copy(),
            beta_cell=self.beta_cell.copy(),
            att_w=self.att_w.copy(),
            att_b=self.att_b.copy(),
            proj_w=self.proj_w.copy(),
            proj_b=self.proj_b.copy(),
            out_w=self.out_w.copy(),
            out_b=self.out_b.copy(),
        )

    def zeros_like_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(t) for name, t in self.named_tensors()}


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def _init_cell(rng: np.random.Generator, d_in: int, d_h: int) -> GruCellParams:
    def gate():
        w = _glorot(rng, (d_in, d_h), d_in, d_h)
        u = _glorot(rng, (d_h, d_h), d_h, d_h)
        return w, u, np.zeros(d_h)

    w_z, u_z, b_z = gate()
    w_r, u_r, b_r = gate()
    w_h, u_h, b_h = gate()
    return GruCellParams(w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h)


def init_params(dims: NetDims, seed: int) -> ModelParams:
    """Scaled-uniform weights, zero biases; draw order is fixed so a seed
    pins every tensor bit-for-bit."""
    rng = np.random.default_rng(seed)
    emb = _glorot(rng, (dims.vocab_size, dims.d_emb), dims.vocab_size, dims.d_emb)
    alpha_cell = _init_cell(rng, dims.d_emb, dims.d_h)
    beta_cell = _init_cell(rng, dims.d_emb, dims.d_h)
    att_w = _glorot(rng, (dims.d_h,), dims.d_h, 1)
    proj_w = _glorot(rng, (dims.d_emb, dims.d_h), dims.d_h, dims.d_emb)
    out_w = _glorot(rng, (2, dims.d_emb), dims.d_emb, 2)
    return ModelParams(
        dims=dims,
        emb=emb,
        alpha_cell=alpha_cell,
        beta_cell=beta_cell,
        att_w=att_w,
        att_b=np.zeros(1),
        proj_w=proj_w,
        proj_b=np.zeros(dims.d_emb),
        out_w=out_w,
        out_b=np.zeros(2),
    )


@dataclass
class Batch:
    """Padded visit-code sequences. Padded slots carry an empty code tuple and
    mask 0; anything placed under mask 0 is structurally cut off from the
    loss (and therefore from gradients)."""

    codes: list  # list[list[VisitCodes]], every inner list has length T
    mask: np.ndarray  # (B, T) float64
    clean: np.ndarray | None = None  # (B,) int64, -1 where absent
    noisy: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.ndim != 2 or len(self.codes) != self.mask.shape[0]:
            raise ValueError("mask shape does not match sequences")
        if any(len(row) != self.mask.shape[1] for row in self.codes):
            raise ValueError("sequences not padded to a common length")
        flat_b: list[int] = []
        flat_t: list[int] = []
        flat_c: list[int] = []
        for b, row in enumerate(self.codes):
            for t, visit in enumerate(row):
                for c in visit:
                    flat_b.append(b)
                    flat_t.append(t)
                    flat_c.append(c)
        self._flat_b = np.array(flat_b, dtype=np.intp)
        self._flat_t = np.array(flat_t, dtype=np.intp)
        self._flat_c = np.array(flat_c, dtype=np.intp)

    @property
    def size(self) -> int:
        return len(self.codes)

    @property
    def n_steps(self) -> int:
        return self.mask.shape[1]

    @classmethod
    def from_sequences(
        cls,
        seqs: Sequence[Sequence[VisitCodes]],
        clean: Sequence[int] | None = None,
        noisy: Sequence[int] | None = None,
    ) -> "Batch":
        if not seqs:
            raise ValueError("empty batch")
        t_max = max(len(s) for s in seqs)
        if t_max == 0:
            raise ValueError("batch contains only empty sequences")
        codes = [list(s) + [()] * (t_max - len(s)) for s in seqs]
        mask = np.zeros((len(seqs), t_max))
        for b, s in enumerate(seqs):
            mask[b, : len(s)] = 1.0
        return cls(
            codes=codes,
            mask=mask,
            clean=None if clean is None else np.asarray(clean, dtype=np.int64),
            noisy=None if noisy is None else np.asarray(noisy, dtype=np.int64),
        )

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample]) -> "Batch":
        seqs = [sequence_of(ex) for ex in examples]
        clean = [-1 if ex.clean_label is None else int(ex.clean_label) for ex in examples]
        noisy = [-1 if ex.noisy_label is None else int(ex.noisy_label) for ex in examples]
        return cls.from_sequences(seqs, clean=clean, noisy=noisy)


def sequence_of(example: LabeledExample) -> list[VisitCodes]:
    """Visit-code index tuples in time order, each sorted for a fixed
    summation order."""
    return [tuple(sorted(v.codes)) for v in example.record.visits]


@dataclass
class ForwardTrace:
    """Everything the backward pass and the tests need to see."""

    V: np.ndarray  # (B, T, d_emb) visit embeddings
    G: np.ndarray  # (B, T, d_h) states of the scalar-attention recurrence
    H: np.ndarray  # (B, T, d_h) states of the gate-attention recurrence
    alpha: np.ndarray  # (B, T)
    beta: np.ndarray  # (B, T, d_emb)
    context: np.ndarray  # (B, d_emb)
    logits: np.ndarray  # (B, 2)
    probs: np.ndarray  # (B, 2)
    alpha_cache: dict
    beta_cache: dict


def embed_visit(params: ModelParams, codes: Iterable[int]) -> np.ndarray:
    """Sum of embedding rows; the empty code set embeds to zeros."""
    out = np.zeros(params.dims.d_emb)
    for c in codes:
        if not 0 <= c < params.dims.vocab_size:
            raise ValueError(f"code index {c} out of range for vocabulary of {params.dims.vocab_size}")
        out += params.emb[c]
    return out


def _gru_scan(cell: GruCellParams, V: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, dict]:
    """Run the gated cell over positions T-1 .. 0. Masked positions leave the
    state untouched, so trailing padding never contaminates real visits."""
    B, T, _ = V.shape
    d_h = cell.b_z.shape[0]
    h = np.zeros((B, d_h))
    states = np.empty((B, T, d_h))
    Z = np.empty((B, T, d_h))
    R = np.empty((B, T, d_h))
    HC = np.empty((B, T, d_h))
    HP = np.empty((B, T, d_h))
    for t in range(T - 1, -1, -1):
        x = V[:, t]
        m = mask[:, t][:, None]
        hp = h
        z = _sigmoid(x @ cell.w_z + hp @ cell.u_z + cell.b_z)
        r = _sigmoid(x @ cell.w_r + hp @ cell.u_r + cell.b_r)
        hc = np.tanh(x @ cell.w_h + (r * hp) @ cell.u_h + cell.b_h)
        h = m * ((1.0 - z) * hp + z * hc) + (1.0 - m) * hp
        states[:, t] = h
        Z[:, t] = z
        R[:, t] = r
        HC[:, t] = hc
        HP[:, t] = hp
    return states, {"z": Z, "r": R, "hc": HC, "hp": HP}


def _gru_backward(
    cell: GruCellParams,
    V: np.ndarray,
    mask: np.ndarray,
    cache: dict,
    dstates: np.ndarray,
    prefix: str,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    """Backpropagate through the reverse-time scan. The scan consumed
    positions T-1..0, so gradients walk 0..T-1, carrying the running
    gradient of each step's previous state."""
    B, T, _ = V.shape
    dV = np.zeros_like(V)
    carry = np.zeros((B, cell.b_z.shape[0]))
    Z, R, HC, HP = cache["z"], cache["r"], cache["hc"], cache["hp"]
    for t in range(T):
        dh = dstates[:, t] + carry
        m = mask[:, t][:, None]
        x = V[:, t]
        z, r, hc, hp = Z[:, t], R[:, t], HC[:, t], HP[:, t]
        dh_new = m * dh
        carry = (1.0 - m) * dh
        dz = dh_new * (hc - hp)
        dhc = dh_new * z
        dhp = dh_new * (1.0 - z)

        dah = dhc * (1.0 - hc * hc)
        grads[f"{prefix}.w_h"] += x.T @ dah
        grads[f"{prefix}.u_h"] += (r * hp).T @ dah
        grads[f"{prefix}.b_h"] += dah.sum(axis=0)
        dx = dah @ cell.w_h.T
        tmp = dah @ cell.u_h.T
        dr = tmp * hp
        dhp += tmp * r

        daz = dz * z * (1.0 - z)
        grads[f"{prefix}.w_z"] += x.T @ daz
        grads[f"{prefix}.u_z"] += hp.T @ daz
        grads[f"{prefix}.b_z"] += daz.sum(axis=0)
        dx += daz @ cell.w_z.T
        dhp += daz @ cell.u_z.T

        dar = dr * r * (1.0 - r)
        grads[f"{prefix}.w_r"] += x.T @ dar
        grads[f"{prefix}.u_r"] += hp.T @ dar
        grads[f"{prefix}.b_r"] += dar.sum(axis=0)
        dx += dar @ cell.w_r.T
        dhp += dar @ cell.u_r.T

        carry = carry + dhp
        dV[:, t] = dx
    return dV


def forward(params: ModelParams, batch: Batch) -> ForwardTrace:
    """Full forward pass over a padded batch."""
    B, T = batch.mask.shape
    valid = batch.mask.sum(axis=1)
    if np.any(valid < 1):
        bad = int(np.argmin(valid))
        raise ValueError(f"sequence {bad} has no valid visits")
    if batch._flat_c.size and (batch._flat_c.max() >= params.dims.vocab_size or batch._flat_c.min() < 0):
        bad_code = int(batch._flat_c.max() if batch._flat_c.max() >= params.dims.vocab_size else batch._flat_c.min())
        raise ValueError(f"code index {bad_code} out of range for vocabulary of {params.dims.vocab_size}")

    V = np.zeros((B, T, params.dims.d_emb))
    if batch._flat_c.size:
        np.add.at(V, (batch._flat_b, batch._flat_t), params.emb[batch._flat_c])

    G, alpha_cache = _gru_scan(params.alpha_cell, V, batch.mask)
    H, beta_cache = _gru_scan(params.beta_cell, V, batch.mask)

    e = G @ params.att_w + params.att_b[0]
    e_masked = np.where(batch.mask > 0, e, -np.inf)
    e_max = e_masked.max(axis=1, keepdims=True)
    ex = np.exp(e_masked - e_max)
    alpha = ex / ex.sum(axis=1, keepdims=True)

    beta = np.tanh(H @ params.proj_w.T + params.proj_b)
    context = np.einsum("bt,btd->bd", alpha, beta * V)

    logits = context @ params.out_w.T + params.out_b
    shifted = logits - logits.max(axis=1, keepdims=True)
    pe = np.exp(shifted)
    probs = pe / pe.sum(axis=1, keepdims=True)

    return ForwardTrace(
        V=V,
        G=G,
        H=H,
        alpha=alpha,
        beta=beta,
        context=context,
        logits=logits,
        probs=probs,
        alpha_cache=alpha_cache,
        beta_cache=beta_cache,
    )


def _check_labels(labels: np.ndarray, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels > 1)):
        raise ValueError("labels must be 0 (preterm) or 1 (full term)")
    return labels


def loss_clean(trace: ForwardTrace, labels: np.ndarray) -> float:
    """Mean negative log of the picked clean-class probability."""
    labels = _check_labels(labels, trace.probs.shape[0])
    picked = trace.probs[np.arange(labels.size), labels]
    return float(np.mean(-np.log(picked + LOSS_EPS)))


def loss_corrected(trace: ForwardTrace, labels: np.ndarray, c: CorruptionMatrix) -> float:
    """Mean negative log of the picked noisy-class probability after pushing
    the model's clean distribution through the corruption matrix."""
    labels = _check_labels(labels, trace.probs.shape[0])
    q = trace.probs @ c.entries
    picked = q[np.arange(labels.size), labels]
    return float(np.mean(-np.log(picked + LOSS_EPS)))


def backward(
    params: ModelParams,
    batch: Batch,
    trace: ForwardTrace,
    labels: np.ndarray,
    loss_kind: str,
    c: CorruptionMatrix | None = None,
) -> dict[str, np.ndarray]:
    """Exact gradient of the mean batch loss for every parameter tensor."""
    B = trace.probs.shape[0]
    labels = _check_labels(labels, B)
    rows = np.arange(B)

    if loss_kind == PLAIN:
        d_p = np.zeros_like(trace.probs)
        picked = trace.probs[rows, labels]
        d_p[rows, labels] = -1.0 / (B * (picked + LOSS_EPS))
    elif loss_kind == CORRECTED:
        if c is None:
            raise ValueError("corrected loss requires a corruption matrix")
        q = trace.probs @ c.entries
        d_q = np.zeros_like(q)
        picked = q[rows, labels]
        d_q[rows, labels] = -1.0 / (B * (picked + LOSS_EPS))
        d_p = d_q @ c.entries.T
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    # softmax over logits
    inner = (d_p * trace.probs).sum(axis=1, keepdims=True)
    d_logits = trace.probs * (d_p - inner)

    grads = params.zeros_like_grads()
    grads["out_w"] += d_logits.T @ trace.context
    grads["out_b"] += d_logits.sum(axis=0)
    d_context = d_logits @ params.out_w

    weighted = trace.beta * trace.V
    d_alpha = np.einsum("bd,btd->bt", d_context, weighted)
    d_beta = trace.alpha[:, :, None] * d_context[:, None, :] * trace.V
    dV = trace.alpha[:, :, None] * d_context[:, None, :] * trace.beta

    # masked softmax over visit scores
    s = (d_alpha * trace.alpha).sum(axis=1, keepdims=True)
    d_e = trace.alpha * (d_alpha - s)
    dG = d_e[:, :, None] * params.att_w[None, None, :]
    grads["att_w"] += np.einsum("bt,btd->d", d_e, trace.G)
    grads["att_b"] += np.array([d_e.sum()])

    # per-dimension gates
    d_a = d_beta * (1.0 - trace.beta**2)
    grads["proj_w"] += np.einsum("btd,bth->dh", d_a, trace.H)
    grads["proj_b"] += d_a.sum(axis=(0, 1))
    dH = d_a @ params.proj_w

    dV += _gru_backward(params.alpha_cell, trace.V, batch.mask, trace.alpha_cache, dG, "alpha", grads)
    dV += _gru_backward(params.beta_cell, trace.V, batch.mask, trace.beta_cache, dH, "beta", grads)

    if batch._flat_c.size:
        np.add.at(grads["emb"], batch._flat_c, dV[batch._flat_b, batch._flat_t])

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name}")
    return grads


def predict_probs(params: ModelParams, seqs: Sequence[Sequence[VisitCodes]], batch_size: int = 256) -> np.ndarray:
    """Class probabilities for each sequence, in input order."""
    out = np.empty((len(seqs), 2))
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        trace = forward(params, Batch.from_sequences(chunk))
        out[start : start + len(chunk)] = trace.probs
    return out


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Versioned container: magic line, JSON dims/tensor header, then raw
    little-endian float64 dumps in header order. Round-trips bit-exactly."""
    names = []
    shapes = []
    blobs = []
    for name, tensor in params.named_tensors():
        names.append(name)
        shapes.append(list(tensor.shape))
        blobs.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    header = {
        "vocab_size": params.dims.vocab_size,
        "d_emb": params.dims.d_emb,
        "d_h": params.dims.d_h,
        "tensors": [[n, s] for n, s in zip(names, shapes)],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC.encode("ascii") + b"\n")
        fh.write(json.dumps(header, separators=(",", ":")).encode("ascii") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n").decode("ascii", errors="replace")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a recognized checkpoint (magic {magic!r})")
        header = json.loads(fh.readline().decode("ascii"))
        dims = NetDims(header["vocab_size"], header["d_emb"], header["d_h"])
        tensors: dict[str, np.ndarray] = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after last tensor")

    def cell(prefix: str) -> GruCellParams:
        return GruCellParams(*(tensors[f"{prefix}.{f}"] for f in GruCellParams._FIELDS))

    return ModelParams(
        dims=dims,
        emb=tensors["emb"],
        alpha_cell=cell("alpha"),
        beta_cell=cell("beta"),
        att_w=tensors["att_w"],
        att_b=tensors["att_b"],
        proj_w=tensors["proj_w"],
        proj_b=tensors["proj_b"],
        out_w=tensors["out_w"],
        out_b=tensors["out_b"],
    )
