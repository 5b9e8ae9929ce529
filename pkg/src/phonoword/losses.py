"""Training objectives.

CTC uses blank index 0 and is computed in log space; its gradient is taken
with respect to the per-frame log-probabilities, so it composes with any
normaliser upstream (normally ``log_softmax``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Tensor, as_tensor, custom_op
from .diffcore.tensor import ShapeError, assert_finite

BLANK = 0
NEG_INF = -np.inf


class InfeasibleAlignment(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.15
    beta: float = 0.25
    target_depth: int = 8

    def __post_init__(self):
        # alpha = 0 is allowed so CTC-only pre-training can reuse the same path
        if not 0.0 <= self.alpha < 0.5:
            raise ValueError(f"alpha must lie in [0, 0.5), got {self.alpha}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.target_depth < 1:
            raise ValueError(f"target_depth must be >= 1, got {self.target_depth}")


# -- Smooth L1 ----------------------------------------------------------------

def smooth_l1(targets, predictions: Tensor, beta: float, mask: np.ndarray | None = None) -> Tensor:
    """Mean Smooth-L1 between constant ``targets`` and ``predictions``.

    Quadratic ``0.5 d^2 / beta`` for ``|d| <= beta``, linear ``|d| - beta/2``
    beyond. ``mask`` (over the leading axes) selects the time steps that
    contribute; the mean runs over selected steps x feature dims.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    predictions = as_tensor(predictions)
    if y.shape != predictions.shape:
        raise ShapeError("smooth_l1", y.shape, predictions.shape)
    if mask is None:
        sel = np.ones(y.shape[:-1], dtype=bool) if y.ndim > 1 else np.ones(1, dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool)
    count = int(sel.sum()) * (y.shape[-1] if y.ndim > 1 else y.size)
    if count == 0:
        raise ValueError("no masked positions")
    weight = sel[..., None].astype(np.float64) if y.ndim > 1 else np.ones_like(y)
    d = predictions.data - y
    a = np.abs(d)
    quad = a <= beta
    elem = np.where(quad, 0.5 * d * d / beta, a - 0.5 * beta)
    value = float((elem * weight).sum()) / count

    def backward(g):
        dd = np.where(quad, d / beta, np.sign(d))
        return (g * dd * weight / count,)

    return custom_op(np.asarray(value), (predictions,), backward)


# -- CTC ----------------------------------------------------------------------

def _extend(labels: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_ctc_frames(labels: Sequence[int]) -> int:
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _validate_labels(labels: Sequence[int], vocab: int) -> list[int]:
    labels = [int(x) for x in labels]
    for x in labels:
        if x == BLANK:
            raise ValueError("blank index 0 may not appear in a CTC label sequence")
        if not 0 < x < vocab:
            raise ValueError(f"label {x} outside vocabulary of size {vocab}")
    return labels


def ctc_forward_backward(log_probs: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. ``log_probs`` [T, V]."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len, vocab = lp.shape
    labels = _validate_labels(labels, vocab)
    if t_len < min_ctc_frames(labels):
        raise InfeasibleAlignment(
            f"infeasible alignment: {len(labels)} labels need {min_ctc_frames(labels)} frames, got {t_len}")
    ext = _extend(labels)
    s_len = len(ext)
    skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # [T, S]

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    if s_len > 1:
        log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_p = alpha[-1, -1]
    if not np.isfinite(log_p):
        raise InfeasibleAlignment("infeasible alignment: zero total path probability")
    gamma = np.exp(alpha + beta - log_p)  # state occupancy [T, S]
    grad = np.zeros_like(lp)
    for s in range(s_len):
        grad[:, ext[s]] -= gamma[:, s]
    return float(-log_p), grad


def ctc_loss(log_probs: Tensor, labels: Sequence[int]) -> Tensor:
    """CTC negative log-likelihood of one utterance; ``log_probs`` is [T, V]."""
    log_probs = as_tensor(log_probs)
    if log_probs.ndim != 2:
        raise ShapeError("ctc_loss", log_probs.shape, ("T", "V"))
    nll, grad = ctc_forward_backward(log_probs.data, labels)
    return custom_op(np.asarray(nll), (log_probs,), lambda g: (g * grad,))


def ctc_loss_batch(log_probs: Tensor, lengths: Sequence[int], labels: Sequence[Sequence[int]]) -> Tensor:
    """Per-utterance CTC summed over frames, averaged over the batch.

    log_probs: [B, T, V] with frames past ``lengths[b]`` ignored.
    """
    if log_probs.ndim != 3 or len(lengths) != log_probs.shape[0] or len(labels) != len(lengths):
        raise ShapeError("ctc_loss_batch", log_probs.shape, (len(lengths), len(labels)))
    b = len(lengths)
    total = 0.0
    grad = np.zeros_like(log_probs.data)
    for i, (n, lab) in enumerate(zip(lengths, labels)):
        nll, g = ctc_forward_backward(log_probs.data[i, :n], lab)
        total += nll
        grad[i, :n] = g
    grad /= b
    return custom_op(np.asarray(total / b), (log_probs,), lambda g: (g * grad,))


def collapse(path: Sequence[int]) -> list[int]:
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != BLANK:
            out.append(p)
        prev = p
    return out


def ctc_brute_force(probs, labels: Sequence[int], guard: int = 10**6) -> float:
    """CTC negative log-likelihood by enumerating every frame labelling.

    ``probs`` are per-frame probabilities [T, V] (not log).
    """
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    t_len, vocab = p.shape
    if vocab**t_len > guard:
        raise ValueError(f"{vocab}^{t_len} paths exceeds enumeration guard {guard}")
    target = list(labels)
    total = 0.0
    for path in itertools.product(range(vocab), repeat=t_len):
        if collapse(path) == target:
            total += float(np.prod(p[np.arange(t_len), path]))
    if total <= 0.0:
        raise InfeasibleAlignment("labels unreachable: no path collapses to the label sequence")
    return -float(np.log(total))


def ctc_greedy_decode(log_probs) -> tuple[list[int], np.ndarray]:
    """Best-path decode plus one posterior vector per emitted label.

    Each segment posterior is the mean of its frames' posteriors with the
    blank column dropped and the remainder renormalised. Rows are over the
    non-blank vocabulary, i.e. index ``j`` corresponds to label ``j + 1``.
    """
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    probs = np.exp(lp)
    best = lp.argmax(axis=-1)
    labels: list[int] = []
    rows: list[np.ndarray] = []
    t = 0
    while t < len(best):
        k = int(best[t])
        end = t
        while end + 1 < len(best) and best[end + 1] == k:
            end += 1
        if k != BLANK:
            seg = probs[t:end + 1].mean(axis=0)[1:]
            rows.append(seg / seg.sum())
            labels.append(k)
        t = end + 1
    post = np.array(rows) if rows else np.zeros((0, lp.shape[-1] - 1))
    return labels, post


# -- cross entropy --------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ignored.

    logits: [..., W]; targets: integer array matching the leading axes.
    """
    logits = as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ShapeError("cross_entropy", logits.shape, tgt.shape, "targets must match leading axes")
    keep = np.ones(tgt.shape, dtype=bool) if ignore_index is None else tgt != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("all positions ignored")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    safe = np.where(keep, tgt, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    value = -float((picked * keep).sum()) / n
    assert_finite(np.asarray(value), "cross_entropy")

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        grad = (grad - onehot) * keep[..., None] / n
        return (g * grad,)

    return custom_op(np.asarray(value), (logits,), backward)


# -- multi-task objectives --------------------------------------------------

def unidata2vec_loss(batch_L, model, weights: LossWeights, rng: np.random.Generator) -> dict:
    """CTC + alpha * SL1 on labelled data. Returns the loss parts and ``total``."""
    parts = model.pretrain_terms(batch_L, weights, rng, labelled=True)
    parts["total"] = parts["ctc"] + weights.alpha * parts["sl1"] if weights.alpha else parts["ctc"]
    return parts


def ud2v_plus_loss(batch_L, batch_U, model, weights: LossWeights, rng: np.random.Generator) -> dict:
    """Labelled objective plus an unweighted SL1 term on unlabelled data."""
    parts = unidata2vec_loss(batch_L, model, weights, rng)
    if batch_U:
        u = model.pretrain_terms(batch_U, weights, rng, labelled=False)
        parts["sl1_U"] = u["sl1"]
        parts["total"] = parts["total"] + u["sl1"]
    return parts
