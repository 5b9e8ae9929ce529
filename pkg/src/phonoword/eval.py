"""Error rates and the clustering probe for learned representations."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np


# -- edit distance --------------------------------------------------------------

@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    deletions: int
    insertions: int
    ref_length: int

    @property
    def rate(self) -> float:
        return self.distance / self.ref_length


def align_sequences(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> list[tuple[str, int | None, int | None]]:
    """Levenshtein alignment as (op, ref_idx, hyp_idx) tuples, op in match/sub/ins/del.

    Unit costs. When several back-pointers are optimal the substitution (or
    match) wins, then insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = d[i - 1, j - 1] + (r != hyp[j - 1])
            d[i, j] = min(diag, d[i, j - 1] + 1, d[i - 1, j] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("match" if ref[i - 1] == hyp[j - 1] else "sub", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ops.append(("ins", None, j - 1))
            j -= 1
        else:
            ops.append(("del", i - 1, None))
            i -= 1
    ops.reverse()
    return ops


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> EditCounts:
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    ops = align_sequences(ref, hyp)
    s = sum(op == "sub" for op, _, _ in ops)
    d = sum(op == "del" for op, _, _ in ops)
    i = sum(op == "ins" for op, _, _ in ops)
    return EditCounts(s + d + i, s, d, i, len(ref))


def error_rate(refs: Sequence[Sequence[Hashable]], hyps: Sequence[Sequence[Hashable]]) -> float:
    """Corpus-level rate: total edits over total reference length."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    edits = total = 0
    for r, h in zip(refs, hyps):
        c = edit_distance(r, h)
        edits += c.distance
        total += c.ref_length
    return edits / total


per = wer = error_rate


# -- k-means --------------------------------------------------------------------

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    objective: list[float] = field(default_factory=list)
    iterations: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_fit(points: np.ndarray, k: int, seed: int = 0, iters: int = 100) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations until the assignment stops changing."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[[idx]])[:, 0])
    centers = x[chosen].copy()
    assign = None
    objective: list[float] = []
    it = 0
    for it in range(1, iters + 1):
        d = _sq_dists(x, centers)
        new = d.argmin(axis=1)  # ties -> lowest cluster index
        objective.append(float(d[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return KMeansResult(assign, centers, objective, it)


def kmeans(points: np.ndarray, k: int, seed: int = 0, iters: int = 100, restarts: int = 1) -> np.ndarray:
    """Assignments of the restart with the lowest final objective (restart r uses seed + r)."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    runs = [kmeans_fit(points, k, seed + r, iters) for r in range(restarts)]
    return min(runs, key=lambda run: run.objective[-1]).assignments


# -- cluster quality ------------------------------------------------------------

def contingency(assignments: Sequence[int], labels: Sequence[Hashable]) -> np.ndarray:
    """Counts table [clusters x labels]."""
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if a.shape != b.shape:
        raise ValueError(f"{len(a)} assignments but {len(b)} labels")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def cluster_purity(assignments, labels) -> float:
    table = contingency(assignments, labels)
    return float(table.max(axis=1).sum() / table.sum())


def pnmi(assignments, labels) -> float:
    """Mutual information between clusters and labels divided by label entropy.

    Defined as 0 when the labels carry no entropy.
    """
    table = contingency(assignments, labels).astype(np.float64)
    joint = table / table.sum()
    pc = joint.sum(axis=1, keepdims=True)
    pl = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / (pc @ pl)[nz])).sum())
    pl = pl[pl > 0]
    h = float(-(pl * np.log(pl)).sum())
    if h <= 0:
        return 0.0
    return float(min(max(mi / h, 0.0), 1.0))


def permutation_baseline(assignments, labels, n_perm: int = 20, seed: int = 0) -> tuple[float, float]:
    """Mean and std of purity against randomly permuted labels."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    vals = [cluster_purity(assignments, rng.permutation(labels)) for _ in range(n_perm)]
    return float(np.mean(vals)), float(np.std(vals))


# -- representation probe ---------------------------------------------------

@dataclass
class ProbeReport:
    layer: int
    k: int
    purity: float
    nmi: float
    counts: np.ndarray

    def row(self) -> str:
        return f"{self.layer}\t{self.k}\t{self.purity:.6f}\t{self.nmi:.6f}"


def collect_layer_frames(model, utterances, layers: Sequence[int], batch_size: int = 16):
    """Teacher layer outputs at every valid latent frame, with the phoneme label
    of the input frame at the centre of each latent frame's receptive field.

    Layer 0 is the stack input (latents plus positions); layer i >= 1 is the
    output of the i-th transformer layer.
    """
    from .diffcore import padding_mask, sinusoidal_positions
    from .unidata2vec import downsample_labels

    n_layers = model.cfg.layers
    for layer in layers:
        if not 0 <= layer <= n_layers:
            raise ValueError(f"layer {layer} outside 0..{n_layers}")
    feats: dict[int, list[np.ndarray]] = {layer: [] for layer in layers}
    labels: list[np.ndarray] = []
    for start in range(0, len(utterances), batch_size):
        chunk = utterances[start:start + batch_size]
        if any(u.frame_labels is None for u in chunk):
            raise ValueError("probe needs frame-level labels")
        z, lengths = model.feature_encode_batch([u.features for u in chunk])
        key_mask = padding_mask(lengths, z.shape[1])
        outs = model.teacher_layers(z, key_mask if key_mask.any() else None)
        inputs = z.data + sinusoidal_positions(z.shape[1], z.shape[2])
        for i, u in enumerate(chunk):
            n = int(lengths[i])
            labels.append(downsample_labels(u.frame_labels, model.receptive_field_centres(n)))
            for layer in layers:
                src = inputs if layer == 0 else outs[layer - 1]
                feats[layer].append(src[i, :n])
    return {layer: np.concatenate(v) for layer, v in feats.items()}, np.concatenate(labels)


def probe_layers(model, utterances, layers: Sequence[int], k: int, seed: int = 0,
                 iters: int = 100, shuffle_labels: bool = False, restarts: int = 1) -> list[ProbeReport]:
    frames, labels = collect_layer_frames(model, utterances, layers)
    if shuffle_labels:
        labels = np.random.default_rng(seed + 1).permutation(labels)
    reports = []
    for layer in layers:
        assign = kmeans(frames[layer], k, seed, iters, restarts)
        reports.append(ProbeReport(layer, k, cluster_purity(assign, labels), pnmi(assign, labels),
                                   contingency(assign, labels)))
    return reports


def write_probe_table(path: str | Path, reports: Sequence[ProbeReport], header_comment: str = "") -> None:
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    lines.append("layer\tk\tpurity\tnmi")
    lines.extend(r.row() for r in reports)
    Path(path).write_text("\n".join(lines) + "\n")
