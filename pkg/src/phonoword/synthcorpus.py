"""Synthetic multilingual corpora with known phonetic ground truth.

Every language draws its lexicon from one shared phoneme inventory. Speech
is faked by emitting a per-phoneme prototype vector plus Gaussian noise for
a sampled number of frames; target languages get a fixed per-phoneme
"accent" offset so that acoustics shift across languages while the phonetic
units stay shared.

On disk a corpus directory holds::

    inventory.json              phoneme names, emission models
    languages/<lang>.json       lexicon, spellings, frequencies
    <role>.<lang>.jsonl         one manifest per split (L, U, F, T, dev, test)
    features/<role>.<lang>/     one binary feature file per utterance
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURE_MAGIC = b"PWFT"
FEATURE_VERSION = 1
ROLES = ("L", "U", "F", "T", "dev", "test")
LETTERS = "abcdefghijklmnopqrstuvwxyz"


class CorpusError(ValueError):
    pass


@dataclass
class SyntheticLanguageSpec:
    language: str
    phonemes: list[str]
    lexicon: dict[str, list[str]]
    frequencies: dict[str, float]
    sentence_words: tuple[int, int] = (2, 5)

    def __post_init__(self):
        inv = set(self.phonemes)
        for word, phones in self.lexicon.items():
            if not phones:
                raise CorpusError(f"word {word!r} has no phonemes")
            missing = set(phones) - inv
            if missing:
                raise CorpusError(f"word {word!r} uses phonemes outside the inventory: {sorted(missing)}")
        total = sum(self.frequencies.values())
        if abs(total - 1.0) > 1e-9:
            raise CorpusError(f"word frequencies sum to {total}, not 1")

    @property
    def words(self) -> list[str]:
        return list(self.lexicon)

    @property
    def letters(self) -> list[str]:
        return sorted({c for w in self.lexicon for c in w})

    def sample_sentence(self, rng: np.random.Generator) -> list[str]:
        lo, hi = self.sentence_words
        n = int(rng.integers(lo, hi + 1))
        words = self.words
        probs = np.array([self.frequencies[w] for w in words])
        out: list[str] = []
        for _ in range(n):
            # redraw a word that would repeat the previous phoneme across the boundary
            for _ in range(20):
                w = words[rng.choice(len(words), p=probs)]
                if not out or self.lexicon[out[-1]][-1] != self.lexicon[w][0]:
                    break
            out.append(w)
        return out

    def phonemize(self, words: Sequence[str]) -> list[str]:
        out: list[str] = []
        for w in words:
            if w not in self.lexicon:
                raise CorpusError(f"out-of-vocabulary word {w!r} for language {self.language}")
            out.extend(self.lexicon[w])
        return out

    def to_dict(self) -> dict:
        return {"language": self.language, "phonemes": self.phonemes, "lexicon": self.lexicon,
                "frequencies": self.frequencies, "sentence_words": list(self.sentence_words)}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticLanguageSpec":
        return cls(d["language"], d["phonemes"], d["lexicon"], d["frequencies"],
                   tuple(d["sentence_words"]))


@dataclass
class EmissionModel:
    prototypes: np.ndarray  # [P, F]
    duration: tuple[int, int] = (8, 12)
    sigma: float = 0.3

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.sigma < 0:
            raise CorpusError("sigma must be non-negative")
        lo, hi = self.duration
        if not 1 <= lo <= hi:
            raise CorpusError(f"invalid duration range {self.duration}")
        if len(self.prototypes) > 1 and min_pairwise_distance(self.prototypes) <= 0:
            raise CorpusError("emission prototypes must be pairwise distinct")

    def to_dict(self) -> dict:
        return {"prototypes": self.prototypes.tolist(), "duration": list(self.duration),
                "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "EmissionModel":
        return cls(np.array(d["prototypes"]), tuple(d["duration"]), d["sigma"])


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    language: str
    role: str
    phonemes: list[str] | None = None
    words: list[str] | None = None
    frame_labels: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


def min_pairwise_distance(points: np.ndarray) -> float:
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    d[np.diag_indices(len(points))] = np.inf
    return float(d.min())


def phoneme_inventory(n: int) -> list[str]:
    return [f"p{i:02d}" for i in range(n)]


def make_emission(seed: int, num_phonemes: int, feature_dim: int, sigma: float = 0.3,
                  duration: tuple[int, int] = (8, 12), min_distance: float = 2.0,
                  max_tries: int = 10_000) -> EmissionModel:
    """Random unit-variance prototypes with a minimum pairwise distance."""
    rng = np.random.default_rng(seed)
    protos: list[np.ndarray] = []
    tries = 0
    while len(protos) < num_phonemes:
        cand = rng.normal(size=feature_dim)
        tries += 1
        if all(np.linalg.norm(cand - p) >= min_distance for p in protos):
            protos.append(cand)
        elif tries > max_tries:
            raise CorpusError(f"could not place {num_phonemes} prototypes {min_distance} apart in "
                              f"{feature_dim} dims")
    return EmissionModel(np.array(protos), tuple(duration), sigma)


def accented(base: EmissionModel, shift: float, seed: int) -> EmissionModel:
    """Same phoneme set, each prototype displaced by a fixed random offset."""
    if shift == 0:
        return EmissionModel(base.prototypes.copy(), base.duration, base.sigma)
    rng = np.random.default_rng(seed)
    offset = rng.normal(scale=shift, size=base.prototypes.shape)
    return EmissionModel(base.prototypes + offset, base.duration, base.sigma)


def _spelling_table(rng: np.random.Generator, phonemes: Sequence[str]) -> dict[str, list[str]]:
    """Each phoneme gets 1-3 candidate spellings of 1-2 letters."""
    table = {}
    for p in phonemes:
        n = int(rng.integers(1, 4))
        options: list[str] = []
        while len(options) < n:
            length = int(rng.integers(1, 3))
            s = "".join(rng.choice(list(LETTERS), size=length))
            if s not in options:
                options.append(s)
        table[p] = options
    return table


def generate_language(seed: int, phonemes: Sequence[str], vocab_size: int, language: str = "tgt",
                      word_phonemes: tuple[int, int] = (1, 5),
                      sentence_words: tuple[int, int] = (2, 5),
                      zipf_exponent: float = 1.0) -> SyntheticLanguageSpec:
    """Random lexicon over a shared inventory with Zipf-like word frequencies.

    No pronunciation repeats a phoneme in adjacent positions: frames carry no
    boundary cue, so a doubled phoneme would be indistinguishable from a long one.

    Word spellings come from a language-specific, ambiguous phoneme-to-letter
    table, so orthography cannot be read off the phonemes alone.
    """
    if vocab_size < 1:
        raise CorpusError("vocab_size must be >= 1")
    lo, hi = word_phonemes
    k = len(phonemes)
    if k < 2:
        raise CorpusError("need at least 2 phonemes")
    capacity = sum(k * (k - 1) ** (n - 1) for n in range(lo, hi + 1))
    if capacity < vocab_size:
        raise CorpusError(f"inventory of {len(phonemes)} phonemes allows only {capacity} distinct "
                          f"words of length {lo}-{hi}, need {vocab_size}")
    rng = np.random.default_rng(seed)
    spell = _spelling_table(rng, phonemes)
    lexicon: dict[str, list[str]] = {}
    seen_pron: set[tuple[str, ...]] = set()
    attempts = 0
    while len(lexicon) < vocab_size:
        attempts += 1
        if attempts > 200 * vocab_size + 1000:
            raise CorpusError("could not draw enough distinct words; enlarge the inventory")
        n = int(rng.integers(lo, hi + 1))
        ids = [int(rng.integers(0, k))]
        for step in rng.integers(1, k, size=n - 1):
            ids.append((ids[-1] + int(step)) % k)
        pron = tuple(phonemes[i] for i in ids)
        if pron in seen_pron:
            continue
        word = "".join(spell[p][int(rng.integers(0, len(spell[p])))] for p in pron)
        if word in lexicon:
            continue
        seen_pron.add(pron)
        lexicon[word] = list(pron)
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    weights = ranks**-zipf_exponent
    weights /= weights.sum()
    freqs = {w: float(f) for w, f in zip(lexicon, weights)}
    # renormalise the float sum exactly enough for the invariant check
    total = sum(freqs.values())
    freqs = {w: f / total for w, f in freqs.items()}
    return SyntheticLanguageSpec(language, list(phonemes), lexicon, freqs, tuple(sentence_words))


def synthesize_utterance(sentence: Sequence[str], spec: SyntheticLanguageSpec,
                         emission: EmissionModel, seed, uid: str = "utt",
                         role: str = "F") -> Utterance:
    rng = np.random.default_rng(seed)
    phones = spec.phonemize(sentence)
    index = {p: i for i, p in enumerate(spec.phonemes)}
    lo, hi = emission.duration
    durations = rng.integers(lo, hi + 1, size=len(phones))
    labels = np.repeat([index[p] for p in phones], durations)
    frames = emission.prototypes[labels]
    if emission.sigma > 0:
        frames = frames + rng.normal(scale=emission.sigma, size=frames.shape)
    return Utterance(uid, frames, spec.language, role, list(phones), list(sentence), labels)


# -- feature files ---------------------------------------------------------

def write_features(path: str | Path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f8")
    t, f = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HII", FEATURE_VERSION, t, f))
        fh.write(features.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: not a feature file")
    version, t, f = struct.unpack("<HII", data[4:14])
    if version != FEATURE_VERSION:
        raise CorpusError(f"{path}: unsupported feature version {version}")
    body = data[14:]
    if len(body) != 8 * t * f:
        raise CorpusError(f"{path}: expected {t}x{f} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(t, f).astype(np.float64)


# -- manifests -----------------------------------------------------------------

def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def manifest_name(role: str, language: str) -> str:
    return f"{role}.{language}.jsonl"


def _utterance_job(args):
    idx, role, lang_idx, seed, sentence, spec_d, emission_d, feat_dir, root = args
    spec = SyntheticLanguageSpec.from_dict(spec_d)
    emission = EmissionModel.from_dict(emission_d)
    uid = f"{role}-{spec.language}-{idx:05d}"
    utt = synthesize_utterance(sentence, spec, emission,
                               np.random.SeedSequence([seed, ROLES.index(role), lang_idx, idx, 1]),
                               uid, role)
    rel = Path(feat_dir) / f"{uid}.feat"
    write_features(Path(root) / rel, utt.features)
    row = {"id": uid, "features": str(rel), "duration": utt.num_frames,
           "language": spec.language, "role": role}
    if role != "U":
        row["phonemes"] = utt.phonemes
        row["words"] = utt.words
        row["frame_labels"] = utt.frame_labels.tolist()
    return row


def build_corpus(out_dir: str | Path, cfg, seed: int, workers: int = 1) -> dict[str, Path]:
    """Write inventory, language specs, features and manifests for every role.

    ``cfg`` is a :class:`~phonoword.config.CorpusConfig`. Returns manifest paths
    keyed by ``"<role>.<lang>"``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "languages").mkdir(exist_ok=True)
    sizes = dict(cfg.sizes)
    for role, n in sizes.items():
        if role not in ROLES:
            raise CorpusError(f"unknown corpus role {role!r}")
        if n < 0:
            raise CorpusError(f"role size for {role} must be >= 0")
    phonemes = phoneme_inventory(cfg.num_phonemes)
    base = make_emission(seed, cfg.num_phonemes, cfg.feature_dim, cfg.sigma,
                         tuple(cfg.duration), cfg.min_proto_distance)
    languages = [cfg.source_language, *cfg.target_languages]
    specs, emissions = {}, {}
    for i, lang in enumerate(languages):
        specs[lang] = generate_language(seed * 1000 + 17 * (i + 1), phonemes, cfg.vocab_size, lang,
                                        tuple(cfg.word_phonemes), tuple(cfg.sentence_words))
        shift = 0.0 if lang == cfg.source_language else cfg.accent_shift
        emissions[lang] = accented(base, shift, seed * 1000 + 31 * (i + 1))
        (out / "languages" / f"{lang}.json").write_text(json.dumps(specs[lang].to_dict(), sort_keys=True))
    inventory = {"phonemes": phonemes, "source_language": cfg.source_language,
                 "target_languages": list(cfg.target_languages), "seed": seed,
                 "emissions": {k: v.to_dict() for k, v in emissions.items()}}
    (out / "inventory.json").write_text(json.dumps(inventory, sort_keys=True))

    paths: dict[str, Path] = {}
    for role in ROLES:
        n = sizes.get(role, 0)
        role_langs = [cfg.source_language] if role == "L" else list(cfg.target_languages)
        for lang in role_langs:
            li = languages.index(lang)
            rng = np.random.default_rng(np.random.SeedSequence([seed, ROLES.index(role), li, 0]))
            sentences = [specs[lang].sample_sentence(rng) for _ in range(n)]
            mpath = out / manifest_name(role, lang)
            if role == "T":
                rows = [{"id": f"T-{lang}-{i:05d}", "words": s, "language": lang, "role": "T"}
                        for i, s in enumerate(sentences)]
            else:
                feat_dir = Path("features") / f"{role}.{lang}"
                (out / feat_dir).mkdir(parents=True, exist_ok=True)
                jobs = [(i, role, li, seed, s, specs[lang].to_dict(), emissions[lang].to_dict(),
                         str(feat_dir), str(out)) for i, s in enumerate(sentences)]
                if workers > 1 and n > 1:
                    with ProcessPoolExecutor(max_workers=workers) as pool:
                        rows = list(pool.map(_utterance_job, jobs, chunksize=32))
                else:
                    rows = [_utterance_job(j) for j in jobs]
            write_jsonl(mpath, rows)
            paths[f"{role}.{lang}"] = mpath
    return paths


class Corpus:
    """Read-side view of a corpus directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        inv_path = self.root / "inventory.json"
        if not inv_path.exists():
            raise CorpusError(f"{self.root}: no inventory.json (run `synth` first)")
        self.inventory = json.loads(inv_path.read_text())
        self.phonemes: list[str] = self.inventory["phonemes"]
        self.source_language: str = self.inventory["source_language"]
        self.target_languages: list[str] = self.inventory["target_languages"]

    def language(self, lang: str) -> SyntheticLanguageSpec:
        path = self.root / "languages" / f"{lang}.json"
        if not path.exists():
            raise CorpusError(f"no language spec for {lang!r} in {self.root}")
        return SyntheticLanguageSpec.from_dict(json.loads(path.read_text()))

    def emission(self, lang: str) -> EmissionModel:
        return EmissionModel.from_dict(self.inventory["emissions"][lang])

    def manifest_path(self, role: str, lang: str | None = None) -> Path:
        if lang is None:
            lang = self.source_language if role == "L" else self.target_languages[0]
        return self.root / manifest_name(role, lang)

    def rows(self, role: str, lang: str | None = None) -> list[dict]:
        path = self.manifest_path(role, lang)
        if not path.exists():
            raise CorpusError(f"missing manifest {path}")
        return read_jsonl(path)

    def utterances(self, role: str, lang: str | None = None, limit: int | None = None) -> list[Utterance]:
        rows = self.rows(role, lang)
        if limit is not None:
            rows = rows[:limit]
        return [self.load_row(r) for r in rows]

    def load_row(self, row: dict) -> Utterance:
        if "features" not in row:
            raise CorpusError(f"manifest row {row.get('id')} has no feature file (text-only split?)")
        path = self.root / row["features"]
        if not path.exists():
            raise CorpusError(f"feature file {path} referenced by {row['id']} does not exist")
        feats = read_features(path)
        if feats.shape[0] != row["duration"]:
            raise CorpusError(f"{row['id']}: manifest duration {row['duration']} != {feats.shape[0]} frames")
        labels = row.get("frame_labels")
        return Utterance(row["id"], feats, row["language"], row["role"], row.get("phonemes"),
                         row.get("words"), None if labels is None else np.asarray(labels))
