import filecmp
import json

import numpy as np
import pytest

from phonoword.config import CorpusConfig
from phonoword.synthcorpus import (
    Corpus,
    CorpusError,
    EmissionModel,
    accented,
    build_corpus,
    generate_language,
    make_emission,
    min_pairwise_distance,
    phoneme_inventory,
    read_features,
    read_jsonl,
    synthesize_utterance,
    write_features,
)

PHONES = phoneme_inventory(8)


def small_cfg(**kw):
    base = dict(num_phonemes=8, feature_dim=6, vocab_size=20,
                sizes={"L": 6, "U": 4, "F": 5, "T": 7, "dev": 2, "test": 3})
    base.update(kw)
    return CorpusConfig(**base)


def test_language_deterministic_and_shared_inventory():
    a = generate_language(3, PHONES, 25, "x")
    b = generate_language(3, PHONES, 25, "x")
    c = generate_language(4, PHONES, 25, "y")
    assert a.lexicon == b.lexicon and a.frequencies == b.frequencies
    assert a.phonemes == c.phonemes == PHONES
    assert len(a.lexicon) == 25
    assert all(1 <= len(p) <= 5 for p in a.lexicon.values())


def test_word_frequencies_are_zipf_like():
    spec = generate_language(0, PHONES, 30)
    f = list(spec.frequencies.values())
    assert f == sorted(f, reverse=True)
    assert f[0] / f[1] == pytest.approx(2.0)


def test_single_word_vocabulary():
    spec = generate_language(1, PHONES, 1)
    rng = np.random.default_rng(0)
    (word,) = spec.lexicon
    for _ in range(10):
        assert set(spec.sample_sentence(rng)) == {word}


def test_inventory_too_small():
    with pytest.raises(CorpusError):
        generate_language(0, ["a", "b"], 10, word_phonemes=(1, 2))
    with pytest.raises(CorpusError):
        generate_language(0, PHONES, 0)


def test_emission_prototypes_are_separated():
    em = make_emission(0, 20, 16, min_distance=2.0)
    assert min_pairwise_distance(em.prototypes) >= 2.0
    shifted = accented(em, 0.8, 1)
    assert shifted.prototypes.shape == em.prototypes.shape
    assert not np.allclose(shifted.prototypes, em.prototypes)
    with pytest.raises(CorpusError):
        EmissionModel(np.zeros((2, 3)))
    with pytest.raises(CorpusError):
        EmissionModel(np.eye(2), sigma=-1.0)


def test_utterance_noise_free_and_labelled():
    spec = generate_language(2, PHONES, 10)
    em = make_emission(2, len(PHONES), 6, sigma=0.0)
    sent = list(spec.lexicon)[:3]
    u = synthesize_utterance(sent, spec, em, seed=5)
    assert u.phonemes == [p for w in sent for p in spec.lexicon[w]]
    assert len(u.frame_labels) == u.num_frames
    np.testing.assert_array_equal(u.features, em.prototypes[u.frame_labels])
    # noise-free frames are classified perfectly by the nearest prototype
    d = ((u.features[:, None] - em.prototypes[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(d.argmin(1), u.frame_labels)
    with pytest.raises(CorpusError):
        synthesize_utterance(["not-a-word"], spec, em, seed=0)


def test_nearest_prototype_is_exact_at_zero_noise_across_corpus(tmp_path):
    build_corpus(tmp_path, small_cfg(sigma=0.0), seed=1)
    corpus = Corpus(tmp_path)
    for role, lang in (("L", "src"), ("F", "tgt")):
        protos = corpus.emission(lang).prototypes
        for u in corpus.utterances(role, lang):
            d = ((u.features[:, None] - protos[None]) ** 2).sum(-1)
            np.testing.assert_array_equal(d.argmin(1), u.frame_labels)


def test_feature_file_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(7, 3))
    write_features(tmp_path / "a.feat", x)
    np.testing.assert_array_equal(read_features(tmp_path / "a.feat"), x)
    raw = (tmp_path / "a.feat").read_bytes()
    (tmp_path / "b.feat").write_bytes(raw[:-8])
    with pytest.raises(CorpusError):
        read_features(tmp_path / "b.feat")
    (tmp_path / "c.feat").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorpusError):
        read_features(tmp_path / "c.feat")


def test_build_corpus_manifests(tmp_path):
    cfg = small_cfg()
    paths = build_corpus(tmp_path, cfg, seed=0)
    assert set(paths) == {"L.src", "U.tgt", "F.tgt", "T.tgt", "dev.tgt", "test.tgt"}
    for key, path in paths.items():
        rows = read_jsonl(path)
        assert len(rows) == cfg.sizes[key.split(".")[0]]
    for row in read_jsonl(paths["U.tgt"]):
        assert "words" not in row and "phonemes" not in row
    for row in read_jsonl(paths["T.tgt"]):
        assert set(row) == {"id", "words", "language", "role"}
    corpus = Corpus(tmp_path)
    for role in ("L", "U", "F", "dev", "test"):
        for row in corpus.rows(role):
            assert corpus.load_row(row).num_frames == row["duration"]


def test_build_corpus_bit_identical(tmp_path):
    build_corpus(tmp_path / "a", small_cfg(), seed=4)
    build_corpus(tmp_path / "b", small_cfg(), seed=4, workers=2)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    stack = [cmp]
    while stack:
        c = stack.pop()
        assert not c.left_only and not c.right_only
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        assert not mismatch and not errors
        stack.extend(c.subdirs.values())


def test_target_language_is_accented(tmp_path):
    build_corpus(tmp_path, small_cfg(), seed=0)
    inv = json.loads((tmp_path / "inventory.json").read_text())
    src = np.array(inv["emissions"]["src"]["prototypes"])
    tgt = np.array(inv["emissions"]["tgt"]["prototypes"])
    assert src.shape == tgt.shape and not np.allclose(src, tgt)


def test_corpus_reports_missing_pieces(tmp_path):
    with pytest.raises(CorpusError):
        Corpus(tmp_path)
    build_corpus(tmp_path, small_cfg(), seed=0)
    corpus = Corpus(tmp_path)
    row = corpus.rows("F")[0]
    with pytest.raises(CorpusError, match="duration"):
        corpus.load_row({**row, "duration": row["duration"] + 1})
    (tmp_path / row["features"]).unlink()
    with pytest.raises(CorpusError, match="does not exist"):
        corpus.load_row(row)
    with pytest.raises(CorpusError):
        build_corpus(tmp_path / "x", small_cfg(sizes={"Q": 1}), seed=0)


def test_no_phoneme_repeats_in_adjacent_positions():
    spec = generate_language(5, PHONES, 60)
    for pron in spec.lexicon.values():
        assert all(a != b for a, b in zip(pron, pron[1:]))
    rng = np.random.default_rng(0)
    for _ in range(200):
        phones = spec.phonemize(spec.sample_sentence(rng))
        assert all(a != b for a, b in zip(phones, phones[1:]))
