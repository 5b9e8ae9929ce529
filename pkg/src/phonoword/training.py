"""Training and inference loops shared by the CLI and the experiment suite."""

from __future__ import annotations

import copy
from dataclasses import asdict
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckio
from .config import EncoderConfig, RunConfig, TranscoderConfig, config_to_dict
from .eval import error_rate
from .synthcorpus import Corpus, SyntheticLanguageSpec, Utterance
from .transcoder import (
    AlignedExample,
    Transcoder,
    WordVocab,
    align_hypothesis,
    align_words,
    harden,
    hypothesis_finetune_step,
    p2w_decode,
    text_train_step,
)
from .transcoder import make_optimizer as transcoder_optimizer
from .unidata2vec import Batch, UniData2vec, finetune_step, make_optimizer, phoneme_posteriors, pretrain_step
from .vocab import TokenVocab, grapheme_vocab, graphemes_to_words, phoneme_vocab, spell_targets

Logger = Callable[[int, str, float], None]


def _no_log(step: int, name: str, value: float) -> None:
    pass


class BatchSampler:
    """Endless shuffled passes over ``n`` items, driven by one seeded generator."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample batches from an empty split")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def encoder_targets(utts: Sequence[Utterance], vocab: TokenVocab) -> list[list[int]]:
    if vocab.kind == "grapheme":
        return [vocab.encode(spell_targets(u.words)) for u in utts]
    return [vocab.encode(u.phonemes) for u in utts]


# -- encoder stages --------------------------------------------------------

def pretrain(model: UniData2vec, labelled: Sequence[Utterance], vocab: TokenVocab, stage, seed: int,
             unlabelled: Sequence[Utterance] | None = None, unlabelled_batch: int | None = None,
             log: Logger = _no_log) -> UniData2vec:
    """Multi-task pre-training; passing ``unlabelled`` adds the unweighted SL1 term."""
    rng = np.random.default_rng(seed)
    sampler_l = BatchSampler(len(labelled), stage.batch_size, rng)
    sampler_u = (BatchSampler(len(unlabelled), unlabelled_batch or stage.batch_size, rng)
                 if unlabelled else None)
    labels = encoder_targets(labelled, vocab)
    opt = make_optimizer(model, stage)
    weights = model.cfg.loss
    for step in range(stage.steps):
        idx = sampler_l.next()
        batch_l = Batch([labelled[i].features for i in idx], [labels[i] for i in idx])
        batch_u = None
        if sampler_u is not None:
            batch_u = Batch([unlabelled[i].features for i in sampler_u.next()])
        metrics = pretrain_step(model, batch_l, batch_u, weights, opt, rng)
        if step % stage.log_every == 0 or step == stage.steps - 1:
            for k, v in metrics.items():
                log(step, k, v)
    return model


def finetune(model: UniData2vec, utts: Sequence[Utterance], vocab: TokenVocab, stage, seed: int,
             log: Logger = _no_log) -> UniData2vec:
    rng = np.random.default_rng(seed)
    if len(vocab) != model.head_size or vocab.kind == "grapheme":
        model.reset_head(len(vocab), seed)
    labels = encoder_targets(utts, vocab)
    sampler = BatchSampler(len(utts), stage.batch_size, rng)
    opt = make_optimizer(model, stage)
    for step in range(stage.steps):
        idx = sampler.next()
        batch = Batch([utts[i].features for i in idx], [labels[i] for i in idx])
        metrics = finetune_step(model, batch, vocab, opt)
        if step % stage.log_every == 0 or step == stage.steps - 1:
            for k, v in metrics.items():
                log(step, k, v)
    return model


def decode_encoder(model: UniData2vec, vocab: TokenVocab, utt: Utterance):
    """Greedy decode: returns (symbols, posteriors over the non-blank units)."""
    _, labels, post = phoneme_posteriors(model, utt.features)
    return vocab.decode(labels), post


def phoneme_error_rate(model: UniData2vec, vocab: TokenVocab, utts: Sequence[Utterance]) -> float:
    hyps = [decode_encoder(model, vocab, u)[0] for u in utts]
    return error_rate([u.phonemes for u in utts], hyps)


def grapheme_word_error_rate(model: UniData2vec, vocab: TokenVocab, utts: Sequence[Utterance]) -> float:
    hyps = [graphemes_to_words(decode_encoder(model, vocab, u)[0]) for u in utts]
    return error_rate([u.words for u in utts], hyps)


# -- transcoder stages ---------------------------------------------------------

def text_examples(sentences: Sequence[Sequence[str]], spec: SyntheticLanguageSpec,
                  vocab: WordVocab) -> list[AlignedExample]:
    return [align_words(s, spec.lexicon, spec.phonemes, vocab) for s in sentences]


def hypothesis_examples(encoder: UniData2vec, enc_vocab: TokenVocab, utts: Sequence[Utterance],
                        spec: SyntheticLanguageSpec, vocab: WordVocab,
                        inputs: str = "posterior") -> list[AlignedExample]:
    """Align encoder hypotheses on transcribed audio to reference word targets."""
    out = []
    index = {p: i for i, p in enumerate(spec.phonemes)}
    for u in utts:
        _, post = decode_encoder(encoder, enc_vocab, u)
        if len(post) == 0:
            continue
        if inputs == "onehot":
            post = harden(post)
        ref = align_words(u.words, spec.lexicon, spec.phonemes, vocab)
        out.append(align_hypothesis(post, [index[p] for p in spec.phonemize(u.words)], ref.targets, vocab))
    return out


def train_transcoder(model: Transcoder, examples: Sequence[AlignedExample], stage, seed: int,
                     log: Logger = _no_log, step_fn=text_train_step) -> Transcoder:
    rng = np.random.default_rng(seed)
    sampler = BatchSampler(len(examples), stage.batch_size, rng)
    opt = transcoder_optimizer(model, stage)
    for step in range(stage.steps):
        batch = [examples[i] for i in sampler.next()]
        metrics = step_fn(model, batch, opt)
        if step % stage.log_every == 0 or step == stage.steps - 1:
            for k, v in metrics.items():
                log(step, k, v)
    return model


def finetune_transcoder(model: Transcoder, examples: Sequence[AlignedExample], stage, seed: int,
                        log: Logger = _no_log) -> Transcoder:
    return train_transcoder(model, examples, stage, seed, log, hypothesis_finetune_step)


def transcribe(encoder: UniData2vec, enc_vocab: TokenVocab, utts: Sequence[Utterance],
               transcoder: Transcoder | None = None, inputs: str = "posterior") -> list[dict]:
    """Hypothesis rows (id, phonemes, words) for each utterance."""
    rows = []
    for u in utts:
        symbols, post = decode_encoder(encoder, enc_vocab, u)
        row = {"id": u.id}
        if enc_vocab.kind == "grapheme":
            row["words"] = graphemes_to_words(symbols)
        else:
            row["phonemes"] = symbols
            if transcoder is not None:
                x = harden(post) if inputs == "onehot" and len(post) else post
                row["words"] = p2w_decode(x, transcoder)
        rows.append(row)
    return rows


def score(refs: Sequence[dict], hyps: Sequence[dict]) -> dict[str, float]:
    """PER and/or WER of hypothesis rows against reference rows, matched by id."""
    by_id = {h["id"]: h for h in hyps}
    missing = [r["id"] for r in refs if r["id"] not in by_id]
    if missing:
        raise KeyError(f"{len(missing)} reference ids have no hypothesis, e.g. {missing[0]}")
    out = {}
    for field, name in (("phonemes", "per"), ("words", "wer")):
        pairs = [(r[field], by_id[r["id"]][field]) for r in refs
                 if r.get(field) and field in by_id[r["id"]]]
        if pairs:
            out[name] = error_rate([p[0] for p in pairs], [p[1] for p in pairs])
    return out


# -- checkpoint helpers ------------------------------------------------------

def encoder_checkpoint(model: UniData2vec, vocab: TokenVocab, run_cfg: RunConfig, stage: str) -> ckio.Checkpoint:
    return ckio.Checkpoint(
        "unidata2vec", config_to_dict(run_cfg), config_to_dict(model.cfg),
        {"stage": stage, "seed": run_cfg.seed, "vocab": vocab.to_dict()},
        dict(model.named_tensors()))


def load_encoder(ckpt: ckio.Checkpoint) -> tuple[UniData2vec, TokenVocab]:
    from .config import config_from_dict

    cfg = config_from_dict(copy.deepcopy(ckpt.model_config), EncoderConfig)
    model = UniData2vec(cfg, 0)
    model.load_named(ckpt.params)
    return model, TokenVocab.from_dict(ckpt.meta["vocab"])


def transcoder_checkpoint(model: Transcoder, run_cfg: RunConfig, stage: str, inputs: str = "posterior") -> ckio.Checkpoint:
    return ckio.Checkpoint(
        "transcoder", config_to_dict(run_cfg), config_to_dict(model.cfg),
        {"stage": stage, "seed": run_cfg.seed, "words": model.vocab.to_dict(), "inputs": inputs},
        dict(model.named_tensors()))


def load_transcoder(ckpt: ckio.Checkpoint) -> tuple[Transcoder, str]:
    from .config import config_from_dict

    cfg = config_from_dict(copy.deepcopy(ckpt.model_config), TranscoderConfig)
    model = Transcoder(cfg, WordVocab.from_dict(ckpt.meta["words"]), 0)
    model.load_named(ckpt.params)
    return model, ckpt.meta.get("inputs", "posterior")
