import json

import numpy as np
import pytest

from phonoword import checkpoint as ckio
from phonoword.config import ConfigError, EncoderConfig, RunConfig, config_to_dict, load_config
from phonoword.training import encoder_checkpoint, load_encoder, load_transcoder, transcoder_checkpoint
from phonoword.transcoder import Transcoder, WordVocab
from phonoword.unidata2vec import UniData2vec
from phonoword.vocab import TokenVocab, grapheme_vocab, graphemes_to_words, phoneme_vocab, spell_targets


def small_encoder_cfg():
    return EncoderConfig(input_dim=4, conv_channels=[4], conv_kernels=[3], conv_strides=[2],
                         conv_padding=[1], layers=2, dim=8, inner_dim=16, heads=2, vocab_size=5,
                         loss={"alpha": 0.15, "beta": 0.25, "target_depth": 2})


def test_encoder_checkpoint_round_trip_is_byte_identical(tmp_path):
    model = UniData2vec(small_encoder_cfg(), 3)
    model.teacher["layer0.ln1.g"].data += 0.5  # teacher differs from student
    vocab = phoneme_vocab(["a", "b", "c", "d"])
    run = RunConfig(seed=11)
    ckio.save(tmp_path / "a.ckpt", encoder_checkpoint(model, vocab, run, "pretrain"))
    ck = ckio.load(tmp_path / "a.ckpt", "unidata2vec")
    model2, vocab2 = load_encoder(ck)
    assert vocab2 == vocab
    assert ck.config["seed"] == 11
    ckio.save(tmp_path / "b.ckpt", encoder_checkpoint(model2, vocab2, run, "pretrain"))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    x = np.random.default_rng(0).normal(size=(12, 4))
    np.testing.assert_array_equal(model.frame_log_probs(x), model2.frame_log_probs(x))


def test_transcoder_checkpoint_round_trip(tmp_path):
    from phonoword.config import TranscoderConfig

    cfg = TranscoderConfig(blocks=1, dim=8, inner_dim=16, heads=2, num_phonemes=4)
    model = Transcoder(cfg, WordVocab(["x", "y"]), 0)
    run = RunConfig()
    data = ckio.encode(transcoder_checkpoint(model, run, "train", "onehot"))
    model2, inputs = load_transcoder(ckio.decode(data))
    assert inputs == "onehot" and model2.vocab == model.vocab
    assert ckio.encode(transcoder_checkpoint(model2, run, "train", "onehot")) == data


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        ckio.load(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    with pytest.raises(ckio.CheckpointError):
        ckio.load(tmp_path / "junk.ckpt")
    ck = ckio.Checkpoint("transcoder", {}, {}, {}, {"w": np.ones((2, 2))})
    data = ckio.encode(ck)
    with pytest.raises(ckio.CheckpointError):
        ckio.decode(data[:-3])
    ckio.save(tmp_path / "t.ckpt", ck)
    with pytest.raises(ckio.CheckpointError, match="expected a unidata2vec"):
        ckio.load(tmp_path / "t.ckpt", "unidata2vec")


def test_load_validates_shapes():
    model = UniData2vec(small_encoder_cfg(), 0)
    arrays = dict(model.named_tensors())
    arrays["head.w"] = np.zeros((3, 3))
    with pytest.raises(ValueError, match="head.w"):
        model.load_named(arrays)


# -- config ------------------------------------------------------------------

def test_presets():
    desk = load_config()
    assert desk.preset == "desk" and desk.encoder.layers == 4 and desk.encoder.loss.target_depth == 2
    paper = load_config(preset="paper")
    assert paper.encoder.conv_channels == [512] * 7
    assert paper.encoder.layers == 12 and paper.encoder.dim == 768
    assert paper.encoder.loss.alpha == 0.15 and paper.encoder.loss.beta == 0.25
    assert paper.encoder.loss.target_depth == 8
    assert paper.transcoder.blocks == 3 and paper.transcoder.dim == 256
    assert paper.transcoder.kernels == [3, 5] and paper.transcoder.vocab_cap == 50000
    assert paper.pretrain.lr == 5e-4 and paper.pretrain_plus.lr == 5e-5
    assert paper.pretrain.steps == 400_000 and paper.pretrain_plus.steps == 200_000
    assert paper.transcoder_train.batch_size == 256


def test_field_overrides_and_strict_keys(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 4\nencoder:\n  layers: 3\n  loss: {alpha: 0.1}\n")
    cfg = load_config(p)
    assert cfg.seed == 4 and cfg.encoder.layers == 3 and cfg.encoder.dim == 64
    assert cfg.encoder.loss.alpha == 0.1 and cfg.encoder.loss.beta == 0.25
    p.write_text("encoder:\n  layerz: 3\n")
    with pytest.raises(ConfigError, match="layerz"):
        load_config(p)
    p.write_text("encoder:\n  dim: 10\n  heads: 4\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    with pytest.raises(ConfigError):
        load_config(preset="huge")


def test_config_echo_round_trips_through_json():
    cfg = load_config(overrides={"seed": 9})
    again = load_config(overrides=json.loads(json.dumps(config_to_dict(cfg))))
    assert config_to_dict(again) == config_to_dict(cfg)


# -- vocabularies ---------------------------------------------------------------

def test_token_vocab():
    v = phoneme_vocab(["p0", "p1"])
    assert v.encode(["p1", "p0"]) == [2, 1]
    assert v.decode([2, 1]) == ["p1", "p0"]
    assert TokenVocab.from_dict(v.to_dict()) == v
    with pytest.raises(ValueError, match="not in phoneme vocabulary"):
        v.encode(["zz"])


def test_grapheme_round_trip():
    g = grapheme_vocab("cab")
    words = ["ab", "c", "ba"]
    sym = spell_targets(words)
    assert sym == ["a", "b", "|", "c", "|", "b", "a"]
    assert g.decode(g.encode(sym)) == sym
    assert graphemes_to_words(sym) == words
