"""Multi-task phonetic pre-training model.

A strided convolutional feature encoder maps input frames X to latents Z.
Z feeds two transformer stacks with identical parameter names: a student
that sees Z with masked spans replaced by a learned embedding, and a teacher
that sees the full Z and is only ever updated as an exponential moving
average of the student. Regression targets are the mean of the teacher's
top-K layer outputs, each instance-normalised over time. A linear head on
the student output gives per-frame phoneme (or grapheme) log-probabilities
for CTC.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import EncoderConfig
from .diffcore import (
    Adam,
    Params,
    Tensor,
    conv,
    conv_output_length,
    gelu,
    init_conv,
    init_layer_norm,
    init_linear,
    init_transformer_layer,
    linear,
    log_softmax,
    new_param,
    norm,
    padding_mask,
    sinusoidal_positions,
    transformer_layer,
    where,
)
from .losses import (
    LossWeights,
    ctc_greedy_decode,
    ctc_loss_batch,
    smooth_l1,
    ud2v_plus_loss,
    unidata2vec_loss,
)

STUDENT = "student."
TEACHER = "teacher."


class InputTooShort(ValueError):
    pass


@dataclass
class MaskSpec:
    mask: np.ndarray  # bool [T]
    starts: np.ndarray  # int span starts


@dataclass
class Batch:
    features: list[np.ndarray]
    labels: list[list[int]] | None = None

    def __len__(self) -> int:
        return len(self.features)


def sample_mask(length: int, mask_prob: float, mask_span: int, rng: np.random.Generator) -> MaskSpec:
    """Span masking: ``floor(mask_prob * T + u)`` distinct starts, spans clipped at T."""
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    n_starts = int(np.floor(mask_prob * length + rng.random()))
    n_starts = min(n_starts, length)
    starts = np.sort(rng.choice(length, size=n_starts, replace=False)) if n_starts else np.zeros(0, int)
    mask = np.zeros(length, dtype=bool)
    for s in starts:
        mask[s:s + mask_span] = True
    return MaskSpec(mask, starts)


def instance_norm(x: np.ndarray, valid: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalise each channel over the valid time steps of each sequence. x: [B, T, D]."""
    w = valid[..., None].astype(np.float64)
    n = np.maximum(w.sum(axis=1, keepdims=True), 1.0)
    mu = (x * w).sum(axis=1, keepdims=True) / n
    var = (((x - mu) ** 2) * w).sum(axis=1, keepdims=True) / n
    return (x - mu) / np.sqrt(var + eps) * w


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], tau: float) -> dict[str, Tensor]:
    """teacher <- tau * teacher + (1 - tau) * student, in place."""
    if set(teacher) != set(student):
        only_t = sorted(set(teacher) - set(student))
        only_s = sorted(set(student) - set(teacher))
        raise KeyError(f"teacher/student parameter names differ: teacher-only {only_t}, "
                       f"student-only {only_s}")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"{name}: teacher shape {t.shape} != student shape {s.shape}")
        if tau == 1.0:
            continue
        t.data = s.data.copy() if tau == 0.0 else tau * t.data + (1.0 - tau) * s.data
    return teacher


class UniData2vec:
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        p: Params = {}
        c_in = cfg.input_dim
        for i, (ch, k) in enumerate(zip(cfg.conv_channels, cfg.conv_kernels)):
            init_conv(p, rng, f"fe.conv{i}", k, c_in, ch)
            init_layer_norm(p, f"fe.ln{i}", ch)
            c_in = ch
        init_layer_norm(p, "fe.proj_ln", c_in)
        init_linear(p, rng, "fe.proj", c_in, cfg.dim)
        new_param(p, "mask_emb", rng.normal(scale=0.1, size=cfg.dim))
        for i in range(cfg.layers):
            init_transformer_layer(p, rng, f"{STUDENT}layer{i}", cfg.dim, cfg.inner_dim)
        init_linear(p, rng, "head", cfg.dim, cfg.vocab_size)
        self.params = p
        self.teacher: dict[str, Tensor] = {
            name[len(STUDENT):]: Tensor(t.data.copy())
            for name, t in p.items() if name.startswith(STUDENT)
        }

    # -- parameter views ---------------------------------------------------
    def student_params(self) -> dict[str, Tensor]:
        return {n[len(STUDENT):]: t for n, t in self.params.items() if n.startswith(STUDENT)}

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Every parameter including the teacher, for checkpointing."""
        out = {n: t.data for n, t in self.params.items()}
        out.update({TEACHER + n: t.data for n, t in self.teacher.items()})
        return out

    def load_named(self, arrays: dict[str, np.ndarray]) -> None:
        expected = {n: t.shape for n, t in self.params.items()}
        expected.update({TEACHER + n: t.shape for n, t in self.teacher.items()})
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"checkpoint parameters mismatch: missing {missing}, unexpected {extra}")
        for name, arr in arrays.items():
            if tuple(arr.shape) != tuple(expected[name]):
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != config shape {expected[name]}")
            if name.startswith(TEACHER):
                self.teacher[name[len(TEACHER):]].data = np.array(arr, dtype=np.float64)
            else:
                self.params[name].data = np.array(arr, dtype=np.float64)

    def trainable(self) -> dict[str, Tensor]:
        return self.params

    def reset_head(self, vocab_size: int, seed: int = 0) -> None:
        """Fresh output layer, e.g. when switching from phonemes to graphemes."""
        rng = np.random.default_rng(seed)
        del self.params["head.w"], self.params["head.b"]
        init_linear(self.params, rng, "head", self.cfg.dim, vocab_size)
        self.cfg.vocab_size = vocab_size

    @property
    def head_size(self) -> int:
        return self.params["head.w"].shape[1]

    # -- feature encoder ---------------------------------------------------
    def output_length(self, length: int) -> int:
        for k, s, pad in zip(self.cfg.conv_kernels, self.cfg.conv_strides, self.cfg.conv_padding):
            length = conv_output_length(length, k, s, pad)
        return length

    def min_input_length(self) -> int:
        n = 1
        while self.output_length(n) < 1:
            n += 1
        return n

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.cfg.conv_strides))

    def receptive_field_centres(self, length: int) -> np.ndarray:
        """Input frame at the centre of each latent frame's receptive field."""
        start, width, jump = 0, 1, 1
        for k, s, pad in zip(self.cfg.conv_kernels, self.cfg.conv_strides, self.cfg.conv_padding):
            start -= pad * jump
            width += (k - 1) * jump
            jump *= s
        return np.arange(length) * jump + start + (width - 1) // 2

    def feature_encode_batch(self, features: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        """Pad, convolve and project a batch. Returns Z [B, T, d] and latent lengths."""
        cfg = self.cfg
        lengths = np.array([len(f) for f in features])
        need = self.min_input_length()
        for f in features:
            if f.ndim != 2 or f.shape[1] != cfg.input_dim:
                raise ValueError(f"expected features of shape [T, {cfg.input_dim}], got {f.shape}")
            if len(f) < need:
                raise InputTooShort(f"input of {len(f)} frames is too short; minimum length is {need}")
        x = np.zeros((len(features), lengths.max(), cfg.input_dim))
        for i, f in enumerate(features):
            x[i, : len(f)] = f
        h = Tensor(x)
        p = self.params
        for i, (k, s, pad) in enumerate(zip(cfg.conv_kernels, cfg.conv_strides, cfg.conv_padding)):
            h = conv(h, p, f"fe.conv{i}", s, pad)
            lengths = np.array([conv_output_length(n, k, s, pad) for n in lengths])
            h = gelu(norm(h, p, f"fe.ln{i}"))
            # zero the padding so batched and single-utterance outputs agree
            h = h * (~padding_mask(lengths, h.shape[1]))[..., None].astype(np.float64)
        z = linear(norm(h, p, "fe.proj_ln"), p, "fe.proj")
        return z, lengths

    def feature_encode(self, x: np.ndarray) -> Tensor:
        z, _ = self.feature_encode_batch([np.asarray(x, dtype=np.float64)])
        return z.reshape(z.shape[1:])

    # -- transformer stacks --------------------------------------------------
    def _stack(self, x: Tensor, params: dict[str, Tensor], prefix: str,
               key_mask: np.ndarray | None) -> list[Tensor]:
        pos = sinusoidal_positions(x.shape[-2], x.shape[-1])
        h = x + pos
        outs = []
        for i in range(self.cfg.layers):
            h = transformer_layer(h, params, f"{prefix}layer{i}", self.cfg.heads, key_mask)
            outs.append(h)
        return outs

    def student_forward(self, z: Tensor, mask: np.ndarray | None = None,
                        key_mask: np.ndarray | None = None) -> tuple[Tensor, list[Tensor]]:
        """Context representations C (top layer output) and every layer output."""
        x = z
        if mask is not None and np.any(mask):
            x = where(np.asarray(mask)[..., None], self.params["mask_emb"], z)
        outs = self._stack(x, self.params, STUDENT, key_mask)
        return outs[-1], outs

    def teacher_layers(self, z, key_mask: np.ndarray | None = None) -> list[np.ndarray]:
        """Raw teacher layer outputs on the unmasked sequence (no graph is built)."""
        zc = Tensor(z.data if isinstance(z, Tensor) else np.asarray(z))
        return [o.data for o in self._stack(zc, self.teacher, "", key_mask)]

    def teacher_targets(self, z, k: int, lengths: np.ndarray | None = None) -> np.ndarray:
        """Mean of the top-k instance-normalised teacher layer outputs."""
        if not 1 <= k <= self.cfg.layers:
            raise ValueError(f"target depth {k} outside 1..{self.cfg.layers}")
        data = z.data if isinstance(z, Tensor) else np.asarray(z)
        squeeze = data.ndim == 2
        if squeeze:
            data = data[None]
        if lengths is None:
            lengths = np.full(data.shape[0], data.shape[1])
        key_mask = padding_mask(lengths, data.shape[1])
        valid = ~key_mask
        outs = self.teacher_layers(Tensor(data), key_mask if key_mask.any() else None)
        y = sum(instance_norm(o, valid) for o in outs[-k:]) / k
        return y[0] if squeeze else y

    def log_probs(self, c: Tensor) -> Tensor:
        return log_softmax(linear(c, self.params, "head"), axis=-1)

    # -- objectives --------------------------------------------------------
    def sample_batch_masks(self, lengths: np.ndarray, t_max: int, rng: np.random.Generator) -> np.ndarray:
        mask = np.zeros((len(lengths), t_max), dtype=bool)
        for i, n in enumerate(lengths):
            mask[i, :n] = sample_mask(int(n), self.cfg.mask_prob, self.cfg.mask_span, rng).mask
        return mask

    def pretrain_terms(self, batch: Batch, weights: LossWeights, rng: np.random.Generator,
                       labelled: bool) -> dict:
        """Loss components for one batch: ``ctc`` (labelled only) and ``sl1``.

        The SL1 term is skipped for labelled batches when ``alpha == 0``.
        """
        if labelled and batch.labels is None:
            raise ValueError("labelled batch is missing transcripts")
        z, lengths = self.feature_encode_batch(batch.features)
        key_mask = padding_mask(lengths, z.shape[1])
        km = key_mask if key_mask.any() else None
        mask = self.sample_batch_masks(lengths, z.shape[1], rng)
        c, _ = self.student_forward(z, mask, km)
        parts: dict = {}
        if labelled:
            c_ctc = c if self.cfg.ctc_on_masked else self.student_forward(z, None, km)[0]
            parts["ctc"] = ctc_loss_batch(self.log_probs(c_ctc), lengths, batch.labels)
        if not labelled or weights.alpha > 0:
            y = self.teacher_targets(z, weights.target_depth, lengths)
            parts["sl1"] = smooth_l1(y, c, weights.beta, mask & ~key_mask)
        return parts

    def ctc_only(self, batch: Batch) -> Tensor:
        if batch.labels is None:
            raise ValueError("fine-tuning batch is missing transcripts")
        z, lengths = self.feature_encode_batch(batch.features)
        key_mask = padding_mask(lengths, z.shape[1])
        c, _ = self.student_forward(z, None, key_mask if key_mask.any() else None)
        return ctc_loss_batch(self.log_probs(c), lengths, batch.labels)

    # -- inference ---------------------------------------------------------
    def frame_log_probs(self, x: np.ndarray) -> np.ndarray:
        z = self.feature_encode(x)
        c, _ = self.student_forward(z)
        return self.log_probs(c).data


def make_optimizer(model: UniData2vec, stage) -> Adam:
    from .diffcore import Schedule

    return Adam(model.trainable(), Schedule(stage.lr, stage.steps, stage.warmup_frac, stage.final_lr_frac),
                clip_norm=stage.clip_norm)


def pretrain_step(model: UniData2vec, batch_L: Batch, batch_U: Batch | None, weights: LossWeights,
                  optimizer: Adam, rng: np.random.Generator) -> dict[str, float]:
    """One multi-task update followed by the EMA teacher update."""
    optimizer.zero_grad()
    if batch_U is not None and len(batch_U):
        parts = ud2v_plus_loss(batch_L, batch_U, model, weights, rng)
    else:
        parts = unidata2vec_loss(batch_L, model, weights, rng)
    parts["total"].backward()
    lr = optimizer.step()
    ema_update(model.teacher, model.student_params(), model.cfg.ema_decay)
    return {
        "ctc_loss": parts["ctc"].item(),
        "sl1_L": parts["sl1"].item() if "sl1" in parts else 0.0,
        "sl1_U": parts["sl1_U"].item() if "sl1_U" in parts else 0.0,
        "total": parts["total"].item(),
        "lr": lr,
    }


def finetune_step(model: UniData2vec, batch_F: Batch, output_vocab, optimizer: Adam) -> dict[str, float]:
    """CTC-only update; no masking, no EMA, teacher untouched."""
    if len(output_vocab) != model.head_size:
        raise ValueError(f"output vocabulary has {len(output_vocab)} units but the head emits "
                         f"{model.head_size}; call reset_head first")
    optimizer.zero_grad()
    loss = model.ctc_only(batch_F)
    loss.backward()
    lr = optimizer.step()
    return {"ctc_loss": loss.item(), "lr": lr}


def phoneme_posteriors(model: UniData2vec, x: np.ndarray) -> tuple[np.ndarray, list[int], np.ndarray]:
    """Frame log-probs [T, V], greedy label ids, and one posterior row per label."""
    lp = model.frame_log_probs(x)
    labels, post = ctc_greedy_decode(lp)
    return lp, labels, post


def downsample_labels(frame_labels: np.ndarray, centres: np.ndarray) -> np.ndarray:
    """Label of the input frame at each latent frame's receptive-field centre."""
    labels = np.asarray(frame_labels)
    return labels[np.clip(np.asarray(centres), 0, len(labels) - 1)]
