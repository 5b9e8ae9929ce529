"""Phoneme-to-word transcoder.

Input is a sequence of phoneme posterior vectors (one-hot for clean text),
embedded by a bias-free linear layer so that a one-hot row is exactly an
embedding lookup. Output is one word-vocabulary distribution per input
position: every phoneme except the last of a word is labelled ``*`` and the
last carries the word, which makes input and target lengths equal and lets
a plain position-wise cross-entropy supervise the alignment.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import TranscoderConfig
from .diffcore import (
    Adam,
    Params,
    Schedule,
    Tensor,
    conv,
    feed_forward,
    gelu,
    init_attention,
    init_conv,
    init_layer_norm,
    init_linear,
    linear,
    multi_head_attention,
    new_param,
    norm,
    padding_mask,
    sinusoidal_positions,
)
from .eval import align_sequences
from .losses import cross_entropy

PAD, UNK, STAR = "<pad>", "<unk>", "*"
SPECIALS = (PAD, UNK, STAR)


class WordVocab:
    """Frequency-ranked word list behind three reserved specials."""

    def __init__(self, words: Sequence[str], cap: int | None = None):
        words = list(words)
        if len(set(words)) != len(words):
            raise ValueError("word vocabulary contains duplicates")
        clash = set(words) & set(SPECIALS)
        if clash:
            raise ValueError(f"words collide with reserved specials: {sorted(clash)}")
        if cap is not None:
            words = words[:cap]
        self.symbols = [*SPECIALS, *words]
        self.index = {w: i for i, w in enumerate(self.symbols)}
        self.pad, self.unk, self.star = 0, 1, 2

    @classmethod
    def from_corpus(cls, sentences: Iterable[Sequence[str]], cap: int) -> "WordVocab":
        counts = Counter(w for s in sentences for w in s)
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ranked, cap)

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, WordVocab) and self.symbols == other.symbols

    def id(self, word: str) -> int:
        return self.index.get(word, self.unk)

    def word(self, i: int) -> str:
        return self.symbols[i]

    def to_dict(self) -> dict:
        return {"symbols": self.symbols}

    @classmethod
    def from_dict(cls, d: dict) -> "WordVocab":
        syms = d["symbols"]
        if tuple(syms[:3]) != SPECIALS:
            raise ValueError("word vocabulary does not start with the reserved specials")
        return cls(syms[3:])


@dataclass
class AlignedExample:
    posteriors: np.ndarray  # [L, P], rows sum to 1
    targets: np.ndarray  # [L] word-vocabulary ids
    phonemes: list[int] | None = None  # 0-based phoneme ids (text side)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if len(self.targets) != len(self.posteriors):
            raise ValueError(f"{len(self.posteriors)} inputs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.targets)


def one_hot(ids: Sequence[int], size: int) -> np.ndarray:
    out = np.zeros((len(ids), size))
    out[np.arange(len(ids)), list(ids)] = 1.0
    return out


def harden(posteriors: np.ndarray) -> np.ndarray:
    """Replace each posterior row by the one-hot vector of its argmax."""
    return one_hot(np.asarray(posteriors).argmax(axis=-1), posteriors.shape[-1])


def strip_stars(targets: Iterable[int], vocab: WordVocab) -> list[str]:
    return [vocab.word(int(t)) for t in targets if int(t) not in (vocab.star, vocab.pad)]


def align_words(words: Sequence[str], lexicon: dict[str, Sequence[str]], phonemes: Sequence[str],
                vocab: WordVocab) -> AlignedExample:
    """Concatenate word pronunciations; a word of n phonemes gets n-1 ``*`` then itself."""
    if not words:
        raise ValueError("cannot align an empty word list")
    index = {p: i for i, p in enumerate(phonemes)}
    ids: list[int] = []
    targets: list[int] = []
    for w in words:
        if w not in lexicon:
            raise KeyError(f"word {w!r} has no pronunciation in the lexicon")
        pron = lexicon[w]
        if not pron:
            raise ValueError(f"lexicon entry for {w!r} has zero phonemes")
        ids.extend(index[p] for p in pron)
        targets.extend([vocab.star] * (len(pron) - 1) + [vocab.id(w)])
    return AlignedExample(one_hot(ids, len(phonemes)), np.array(targets), ids)


def align_hypothesis(hyp: np.ndarray, ref_phonemes: Sequence[int], ref_targets: Sequence[int],
                     vocab: WordVocab) -> AlignedExample:
    """Project reference word targets onto an errorful hypothesis.

    Hypothesis positions inherit the target of the reference position they
    are aligned with; inserted positions get ``*``. A word whose final
    reference phoneme was deleted moves to the latest surviving position of
    its own span, or is dropped if the whole span vanished.
    """
    hyp = np.asarray(hyp, dtype=np.float64)
    if len(hyp) == 0 or len(ref_phonemes) == 0:
        raise ValueError("hypothesis and reference must be non-empty")
    ref_targets = [int(t) for t in ref_targets]
    if len(ref_targets) != len(ref_phonemes):
        raise ValueError("reference phonemes and targets differ in length")
    hyp_ids = [int(i) for i in hyp.argmax(axis=-1)]
    ops = align_sequences(list(ref_phonemes), hyp_ids)
    ref_to_hyp: dict[int, int] = {}
    targets = np.full(len(hyp), vocab.star, dtype=np.int64)
    for op, r, h in ops:
        if op in ("match", "sub"):
            ref_to_hyp[r] = h
            targets[h] = ref_targets[r]
    span_start = 0
    for r, t in enumerate(ref_targets):
        if t == vocab.star:
            continue
        if r not in ref_to_hyp:
            survivors = [q for q in range(span_start, r) if q in ref_to_hyp]
            if survivors:
                targets[ref_to_hyp[survivors[-1]]] = t
        span_start = r + 1
    return AlignedExample(hyp, targets)


class Transcoder:
    def __init__(self, cfg: TranscoderConfig, vocab: WordVocab, seed: int = 0):
        cfg.vocab_size = len(vocab)
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        p: Params = {}
        new_param(p, "embed.w", rng.normal(scale=1.0, size=(cfg.num_phonemes, cfg.dim)))
        k1, k2 = cfg.kernels
        for i in range(cfg.blocks):
            b = f"block{i}"
            init_layer_norm(p, f"{b}.ln_conv", cfg.dim)
            init_conv(p, rng, f"{b}.conv_a", k1, cfg.dim, cfg.dim)
            init_conv(p, rng, f"{b}.conv_b", k2, cfg.dim, cfg.dim)
            for a in ("att1", "att2"):
                init_layer_norm(p, f"{b}.ln_{a}", cfg.dim)
                init_attention(p, rng, f"{b}.{a}", cfg.dim)
            init_layer_norm(p, f"{b}.ln_ff", cfg.dim)
            init_linear(p, rng, f"{b}.ff1", cfg.dim, cfg.inner_dim)
            init_linear(p, rng, f"{b}.ff2", cfg.inner_dim, cfg.dim)
        init_layer_norm(p, "final_ln", cfg.dim)
        init_linear(p, rng, "out", cfg.dim, len(vocab))
        self.params = p

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def load_named(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ValueError(f"checkpoint parameters mismatch: missing {missing}, unexpected {extra}")
        for name, arr in arrays.items():
            if tuple(arr.shape) != self.params[name].shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=np.float64)

    def _conv_mix(self, h: Tensor, name: str, valid: np.ndarray) -> Tensor:
        p = self.params
        k1, k2 = self.cfg.kernels
        x = norm(h, p, f"{name}.ln_conv") * valid
        if self.cfg.conv_topology == "series":
            a = gelu(conv(x, p, f"{name}.conv_a", 1, k1 // 2)) * valid
            return gelu(conv(a, p, f"{name}.conv_b", 1, k2 // 2))
        return (gelu(conv(x, p, f"{name}.conv_a", 1, k1 // 2))
                + gelu(conv(x, p, f"{name}.conv_b", 1, k2 // 2)))

    def forward(self, posteriors: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        """Logits [B, L, |W|] for a batch of posterior sequences, plus lengths."""
        lengths = np.array([len(x) for x in posteriors])
        if lengths.min() < 1:
            raise ValueError("empty posterior sequence")
        batch = np.zeros((len(posteriors), lengths.max(), self.cfg.num_phonemes))
        for i, x in enumerate(posteriors):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[1] != self.cfg.num_phonemes:
                raise ValueError(f"expected posteriors of shape [L, {self.cfg.num_phonemes}], got {x.shape}")
            sums = x.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                raise ValueError(f"posterior rows must sum to 1 (worst {sums[np.argmax(np.abs(sums - 1))]:.6g})")
            batch[i, : len(x)] = x
        key_mask = padding_mask(lengths, batch.shape[1])
        km = key_mask if key_mask.any() else None
        valid = (~key_mask)[..., None].astype(np.float64)
        p = self.params
        h = Tensor(batch) @ p["embed.w"]
        h = h + sinusoidal_positions(h.shape[1], self.cfg.dim)
        for i in range(self.cfg.blocks):
            b = f"block{i}"
            h = h + self._conv_mix(h, b, valid)
            h = h + multi_head_attention(norm(h, p, f"{b}.ln_att1"), p, f"{b}.att1", self.cfg.heads, km)
            h = h + multi_head_attention(norm(h, p, f"{b}.ln_att2"), p, f"{b}.att2", self.cfg.heads, km)
            h = h + feed_forward(norm(h, p, f"{b}.ln_ff"), p, f"{b}.ff")
        return linear(norm(h, p, "final_ln"), p, "out"), lengths

    def logits(self, posteriors: np.ndarray) -> np.ndarray:
        out, _ = self.forward([posteriors])
        return out.data[0]

    def loss(self, batch: Sequence[AlignedExample]) -> tuple[Tensor, float]:
        logits, lengths = self.forward([ex.posteriors for ex in batch])
        targets = np.full(logits.shape[:2], self.vocab.pad, dtype=np.int64)
        for i, ex in enumerate(batch):
            targets[i, : len(ex)] = ex.targets
        loss = cross_entropy(logits, targets, ignore_index=self.vocab.pad)
        keep = targets != self.vocab.pad
        acc = float(((logits.data.argmax(-1) == targets) & keep).sum() / keep.sum())
        return loss, acc


def make_optimizer(model: Transcoder, stage) -> Adam:
    return Adam(model.params, Schedule(stage.lr, stage.steps, stage.warmup_frac, stage.final_lr_frac),
                clip_norm=stage.clip_norm)


def text_train_step(model: Transcoder, batch: Sequence[AlignedExample], optimizer: Adam) -> dict[str, float]:
    optimizer.zero_grad()
    loss, acc = model.loss(batch)
    loss.backward()
    lr = optimizer.step()
    return {"ce_loss": loss.item(), "accuracy": acc, "lr": lr}


# Fine-tuning on aligned hypotheses is the same update on different inputs.
hypothesis_finetune_step = text_train_step


def p2w_decode(posteriors: np.ndarray, model: Transcoder) -> list[str]:
    """Position-wise argmax with ``*`` and ``<pad>`` removed; ``<unk>`` is kept."""
    if len(posteriors) == 0:
        return []
    ids = model.logits(posteriors).argmax(axis=-1)
    return strip_stars(ids, model.vocab)
