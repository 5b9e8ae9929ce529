"""Command-line pipeline driver.

Typical desk run::

    phonoword synth --out runs/corpus
    phonoword pretrain --data runs/corpus --out runs/base
    phonoword pretrain-plus --data runs/corpus --init runs/base/encoder.ckpt --out runs/plus
    phonoword finetune --data runs/corpus --init runs/plus/encoder.ckpt --out runs/ft
    phonoword train-transcoder --data runs/corpus --out runs/tc
    phonoword transcribe --data runs/corpus --encoder runs/ft/encoder.ckpt \
        --transcoder runs/tc/transcoder.ckpt --out runs/hyp
    phonoword evaluate --data runs/corpus --hyp runs/hyp/hyp.jsonl --out runs/eval

Every subcommand writes ``metrics.jsonl`` into its output directory: a header
record echoing the resolved config and seed, then one ``{step, metric, value}``
record per logged value.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from .config import ConfigError, RunConfig, config_to_dict, load_config
from .eval import probe_layers, write_probe_table
from .losses import InfeasibleAlignment
from .synthcorpus import Corpus, CorpusError, build_corpus, read_jsonl, write_jsonl
from .training import (
    encoder_checkpoint,
    finetune,
    finetune_transcoder,
    hypothesis_examples,
    load_encoder,
    load_transcoder,
    pretrain,
    score,
    text_examples,
    train_transcoder,
    transcoder_checkpoint,
    transcribe,
)
from .transcoder import Transcoder, WordVocab
from .unidata2vec import InputTooShort, UniData2vec
from .vocab import grapheme_vocab, phoneme_vocab

EXIT_ERROR = 1
EXIT_CONFIG = 3
EXIT_MISSING_CHECKPOINT = 4
EXIT_DATA = 5


class MetricsWriter:
    """Line-delimited metrics with a config-echo header."""

    def __init__(self, path: Path, command: str, cfg: RunConfig, extra: dict | None = None):
        self.path = path
        header = {"type": "header", "command": command, "seed": cfg.seed,
                  "config": config_to_dict(cfg)}
        if extra:
            header.update(extra)
        self.lines = [json.dumps(header, sort_keys=True)]

    def __call__(self, step: int, metric: str, value: float) -> None:
        self.lines.append(json.dumps({"step": int(step), "metric": metric, "value": float(value)},
                                     sort_keys=True))

    def close(self) -> None:
        self.path.write_text("\n".join(self.lines) + "\n")


def _corpus(args, cfg: RunConfig) -> Corpus:
    return Corpus(args.data or cfg.paths.get("corpus", "corpus"))


def _target(args, corpus: Corpus) -> str:
    return args.lang or corpus.target_languages[0]


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_init(args, component: str) -> ckio.Checkpoint:
    if not args.init:
        raise ConfigError(f"{args.command} requires --init pointing at a {component} checkpoint")
    return ckio.load(args.init, component)


def _save_encoder(out: Path, model, vocab, cfg, stage, metrics: MetricsWriter) -> None:
    ckio.save(out / "encoder.ckpt", encoder_checkpoint(model, vocab, cfg, stage))
    metrics.close()


def cmd_synth(args, cfg: RunConfig) -> None:
    out = _out(args)
    paths = build_corpus(out, cfg.corpus, cfg.seed, args.workers)
    metrics = MetricsWriter(out / "metrics.jsonl", "synth", cfg)
    for name in sorted(paths):
        metrics(0, f"rows.{name}", len(read_jsonl(paths[name])))
    metrics.close()


def cmd_pretrain(args, cfg: RunConfig) -> None:
    out = _out(args)
    corpus = _corpus(args, cfg)
    vocab = phoneme_vocab(corpus.phonemes)
    if args.init:
        model, vocab = load_encoder(ckio.load(args.init, "unidata2vec"))
    else:
        cfg.encoder.vocab_size = len(vocab)
        model = UniData2vec(cfg.encoder, cfg.seed)
    metrics = MetricsWriter(out / "metrics.jsonl", "pretrain", cfg)
    pretrain(model, corpus.utterances("L"), vocab, cfg.pretrain, cfg.seed, log=metrics)
    _save_encoder(out, model, vocab, cfg, "pretrain", metrics)


def cmd_pretrain_plus(args, cfg: RunConfig) -> None:
    ckpt = _require_init(args, "unidata2vec")
    out = _out(args)
    corpus = _corpus(args, cfg)
    model, vocab = load_encoder(ckpt)
    stage = cfg.pretrain_plus
    metrics = MetricsWriter(out / "metrics.jsonl", "pretrain-plus", cfg, {"init": ckpt.meta})
    pretrain(model, corpus.utterances("L"), vocab, stage, cfg.seed,
             unlabelled=corpus.utterances("U", _target(args, corpus)),
             unlabelled_batch=stage.unlabeled_batch_size, log=metrics)
    _save_encoder(out, model, vocab, cfg, "pretrain-plus", metrics)


def cmd_finetune(args, cfg: RunConfig) -> None:
    ckpt = _require_init(args, "unidata2vec")
    out = _out(args)
    corpus = _corpus(args, cfg)
    lang = _target(args, corpus)
    model, vocab = load_encoder(ckpt)
    if cfg.finetune.units == "grapheme":
        vocab = grapheme_vocab(corpus.language(lang).letters)
    else:
        vocab = phoneme_vocab(corpus.phonemes)
    metrics = MetricsWriter(out / "metrics.jsonl", "finetune", cfg, {"init": ckpt.meta})
    finetune(model, corpus.utterances("F", lang), vocab, cfg.finetune, cfg.seed, log=metrics)
    _save_encoder(out, model, vocab, cfg, "finetune", metrics)


def cmd_train_transcoder(args, cfg: RunConfig) -> None:
    out = _out(args)
    corpus = _corpus(args, cfg)
    lang = _target(args, corpus)
    spec = corpus.language(lang)
    sentences = [r["words"] for r in corpus.rows("T", lang)]
    vocab = WordVocab.from_corpus(sentences, cfg.transcoder.vocab_cap)
    cfg.transcoder.num_phonemes = len(corpus.phonemes)
    cfg.transcoder.vocab_size = len(vocab)
    if args.init:
        model, _ = load_transcoder(ckio.load(args.init, "transcoder"))
    else:
        model = Transcoder(cfg.transcoder, vocab, cfg.seed)
    metrics = MetricsWriter(out / "metrics.jsonl", "train-transcoder", cfg)
    train_transcoder(model, text_examples(sentences, spec, model.vocab), cfg.transcoder_train,
                     cfg.seed, log=metrics)
    ckio.save(out / "transcoder.ckpt", transcoder_checkpoint(model, cfg, "train-transcoder"))
    metrics.close()


def cmd_finetune_transcoder(args, cfg: RunConfig) -> None:
    ckpt = _require_init(args, "transcoder")
    if not args.encoder:
        raise ConfigError("finetune-transcoder requires --encoder to produce hypotheses")
    out = _out(args)
    corpus = _corpus(args, cfg)
    lang = _target(args, corpus)
    model, _ = load_transcoder(ckpt)
    encoder, enc_vocab = load_encoder(ckio.load(args.encoder, "unidata2vec"))
    stage = cfg.transcoder_finetune
    examples = hypothesis_examples(encoder, enc_vocab, corpus.utterances(stage.split, lang),
                                   corpus.language(lang), model.vocab, stage.inputs)
    if not examples:
        raise CorpusError(f"no usable hypotheses on split {stage.split!r}")
    metrics = MetricsWriter(out / "metrics.jsonl", "finetune-transcoder", cfg, {"init": ckpt.meta})
    metrics(0, "examples", len(examples))
    finetune_transcoder(model, examples, stage, cfg.seed, log=metrics)
    ckio.save(out / "transcoder.ckpt",
              transcoder_checkpoint(model, cfg, "finetune-transcoder", stage.inputs))
    metrics.close()


def cmd_transcribe(args, cfg: RunConfig) -> None:
    if not args.encoder:
        raise ConfigError("transcribe requires --encoder")
    out = _out(args)
    corpus = _corpus(args, cfg)
    encoder, enc_vocab = load_encoder(ckio.load(args.encoder, "unidata2vec"))
    transcoder, inputs = None, "posterior"
    if args.transcoder:
        transcoder, inputs = load_transcoder(ckio.load(args.transcoder, "transcoder"))
    utts = corpus.utterances(args.split, _target(args, corpus))
    rows = transcribe(encoder, enc_vocab, utts, transcoder, inputs)
    header = {"type": "header", "command": "transcribe", "seed": cfg.seed,
              "config": config_to_dict(cfg), "split": args.split}
    write_jsonl(out / "hyp.jsonl", [header, *rows])
    metrics = MetricsWriter(out / "metrics.jsonl", "transcribe", cfg)
    metrics(0, "utterances", len(rows))
    metrics.close()


def _rows(path) -> list[dict]:
    return [r for r in read_jsonl(path) if r.get("type") != "header"]


def cmd_evaluate(args, cfg: RunConfig) -> None:
    if not args.hyp:
        raise ConfigError("evaluate requires --hyp")
    out = _out(args)
    if args.ref:
        refs = _rows(args.ref)
    else:
        corpus = _corpus(args, cfg)
        refs = corpus.rows(args.split, _target(args, corpus))
    result = score(refs, _rows(args.hyp))
    metrics = MetricsWriter(out / "metrics.jsonl", "evaluate", cfg)
    for name in sorted(result):
        metrics(0, name, result[name])
    metrics.close()
    for name in sorted(result):
        print(f"{name}\t{result[name]:.6f}")


def cmd_probe(args, cfg: RunConfig) -> None:
    out = _out(args)
    corpus = _corpus(args, cfg)
    if args.encoder:
        model, _ = load_encoder(ckio.load(args.encoder, "unidata2vec"))
    else:
        cfg.encoder.vocab_size = len(corpus.phonemes) + 1
        model = UniData2vec(cfg.encoder, cfg.seed)
    pc = cfg.probe
    k = pc.k or len(corpus.phonemes)
    utts = corpus.utterances(pc.split, args.lang)
    reports = probe_layers(model, utts, pc.layers, k, cfg.seed, pc.kmeans_iters,
                           shuffle_labels=args.shuffle_labels, restarts=pc.kmeans_restarts)
    echo = json.dumps({"seed": cfg.seed, "config": config_to_dict(cfg)}, sort_keys=True)
    write_probe_table(out / "probe.tsv", reports, echo)
    metrics = MetricsWriter(out / "metrics.jsonl", "probe", cfg)
    for r in reports:
        metrics(r.layer, "purity", r.purity)
        metrics(r.layer, "pnmi", r.nmi)
    metrics.close()


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic corpus"),
    "pretrain": (cmd_pretrain, "multi-task pre-training on labelled source audio"),
    "pretrain-plus": (cmd_pretrain_plus, "continue pre-training with unlabelled target audio"),
    "finetune": (cmd_finetune, "CTC fine-tuning on the small labelled target split"),
    "train-transcoder": (cmd_train_transcoder, "train the phoneme-to-word model on text"),
    "finetune-transcoder": (cmd_finetune_transcoder, "fine-tune the transcoder on encoder hypotheses"),
    "transcribe": (cmd_transcribe, "decode a split to phonemes and (optionally) words"),
    "evaluate": (cmd_evaluate, "score hypotheses: PER and WER"),
    "probe": (cmd_probe, "k-means probe of teacher layers"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phonoword", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--preset", choices=["desk", "paper"], help="default hyperparameter set")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--init", help="checkpoint to start from")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1, help="processes for corpus generation")
        p.add_argument("--data", help="corpus directory (default: paths.corpus)")
        p.add_argument("--lang", help="target language (default: first in the corpus)")
        p.add_argument("--encoder", help="encoder checkpoint")
        p.add_argument("--transcoder", help="transcoder checkpoint")
        p.add_argument("--split", default="test", help="corpus role to decode or score")
        p.add_argument("--ref", help="reference JSONL (default: the corpus split)")
        p.add_argument("--hyp", help="hypothesis JSONL")
        p.add_argument("--shuffle-labels", action="store_true",
                       help="probe against permuted frame labels")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, args.preset, overrides)
        COMMANDS[args.command][0](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT
    except (CorpusError, InputTooShort, InfeasibleAlignment) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ckio.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
