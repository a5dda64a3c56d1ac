"""Transformer encoder-decoder ASR with optional audio-visual fusion.

The audio path subsamples log-mel frames with two stride-2 convolutions
(output length ceil(T_frames / 4), kernel 3, padding 1), adds sinusoidal
positions, and runs pre-norm self-attention blocks. Fused memory feeds a
pre-norm decoder that predicts subword tokens autoregressively.

Every weight is a named, component-tagged Parameter so checkpoints can be
transferred and frozen per component (audio_encoder / visual_encoder /
fusion / decoder).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import specaugment
from .autodiff import Parameter, Tensor
from .checkpoint import Checkpoint, ParamRecord
from .errors import CheckpointError, ConfigError, ShapeError
from .fusion import FusedSequence, fuse, init_fusion_params
from .tokenizer import EOS_ID, PAD_ID, SOS_ID
from .visual import VisualConfig, VisualEncoder

SUBSAMPLE_FACTOR = 4
ATTN_MASK_VALUE = -1e9

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class ModelConfig:
    vocab_size: int
    n_mels: int = 80
    d_model: int = 64
    n_heads: int = 4
    n_encoder_blocks: int = 4
    n_decoder_blocks: int = 2
    ff_dim: int = 128
    fusion_mode: str = "none"  # none | emb | seq
    speech_proj_dim: int = 16  # projection dims used by emb fusion
    visual_proj_dim: int = 16
    dropout: float = 0.1
    label_smoothing: float = 0.1
    max_target_len: int = 128
    visual: VisualConfig | None = None
    dtype: str = "f32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.fusion_mode not in ("none", "emb", "seq"):
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.fusion_mode != "none" and self.visual is None:
            raise ConfigError(f"fusion mode {self.fusion_mode!r} needs a visual config")
        if self.fusion_mode == "emb" and self.visual is not None and self.visual.use_grid:
            raise ConfigError("emb fusion needs a single visual vector, not a grid")
        if self.vocab_size <= 4:
            raise ConfigError("vocabulary must contain at least one non-special piece")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class Example:
    """One training utterance: features (T0 x n_mels), optional visual
    input (3 x H x W image or D_v x K embedding), tokens sos..eos."""

    features: np.ndarray
    visual: np.ndarray | None
    tokens: list[int]


@dataclass
class Hypothesis:
    ids: list[int]
    score: float
    finished: bool


@dataclass
class ComponentPlan:
    """Table-3-style per-component setting: how to init and whether to train."""

    init: str = "random"  # "random" or a checkpoint path
    train: str = "finetune"  # "finetune" | "frozen"

    def __post_init__(self):
        if self.train not in ("finetune", "frozen"):
            raise ConfigError(f"train must be finetune|frozen, got {self.train!r}")


def subsampled_length(n_frames: int) -> int:
    # two convs, kernel 3 stride 2 padding 1: each maps n -> ceil(n / 2)
    t1 = (n_frames + 1) // 2
    return (t1 + 1) // 2


def _xavier(rng, shape, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.dtype = cfg.np_dtype
        self.params: dict[str, Parameter] = {}
        self.visual_encoder: VisualEncoder | None = None
        self._pos_cache: Tensor | None = None
        self._mask_cache: dict[int, Tensor] = {}
        rng = np.random.default_rng(seed)

        self._build_audio_encoder(rng)
        if cfg.fusion_mode != "none":
            self.visual_encoder = VisualEncoder(cfg.visual, rng, dtype=self.dtype)
            self.params.update(self.visual_encoder.params)
            self.params.update(
                init_fusion_params(
                    cfg.fusion_mode,
                    cfg.d_model,
                    cfg.visual.embed_dim,
                    cfg.speech_proj_dim,
                    cfg.visual_proj_dim,
                    rng,
                    self.dtype,
                )
            )
        self._build_decoder(rng)

    # ------------------------------------------------------------------
    # parameter plumbing

    def _add(self, name: str, value: np.ndarray, component: str) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, value, component)

    def _p(self, name: str) -> Parameter:
        return self.params[name]

    def _add_attention(self, prefix: str, component: str, rng) -> None:
        d = self.cfg.d_model
        for gate in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.{gate}", _xavier(rng, (d, d), d, d, self.dtype), component)
        for gate in ("bq", "bk", "bv", "bo"):
            self._add(f"{prefix}.{gate}", np.zeros((1, d), dtype=self.dtype), component)

    def _add_ff(self, prefix: str, component: str, rng) -> None:
        d, f = self.cfg.d_model, self.cfg.ff_dim
        self._add(f"{prefix}.w1", _xavier(rng, (d, f), d, f, self.dtype), component)
        self._add(f"{prefix}.b1", np.zeros((1, f), dtype=self.dtype), component)
        self._add(f"{prefix}.w2", _xavier(rng, (f, d), f, d, self.dtype), component)
        self._add(f"{prefix}.b2", np.zeros((1, d), dtype=self.dtype), component)

    def _add_norm(self, prefix: str, component: str) -> None:
        d = self.cfg.d_model
        self._add(f"{prefix}.gain", np.ones(d, dtype=self.dtype), component)
        self._add(f"{prefix}.bias", np.zeros(d, dtype=self.dtype), component)

    def _build_audio_encoder(self, rng) -> None:
        cfg, dt = self.cfg, self.dtype
        d, mels = cfg.d_model, cfg.n_mels
        self._add("audio_encoder.subsample.conv0.w",
                  _xavier(rng, (d, mels, 3), mels * 3, d * 3, dt), "audio_encoder")
        self._add("audio_encoder.subsample.conv0.b", np.zeros(d, dtype=dt), "audio_encoder")
        self._add("audio_encoder.subsample.conv1.w",
                  _xavier(rng, (d, d, 3), d * 3, d * 3, dt), "audio_encoder")
        self._add("audio_encoder.subsample.conv1.b", np.zeros(d, dtype=dt), "audio_encoder")
        for i in range(cfg.n_encoder_blocks):
            base = f"audio_encoder.block{i}"
            self._add_norm(f"{base}.ln1", "audio_encoder")
            self._add_attention(f"{base}.attn", "audio_encoder", rng)
            self._add_norm(f"{base}.ln2", "audio_encoder")
            self._add_ff(f"{base}.ff", "audio_encoder", rng)
        self._add_norm("audio_encoder.ln", "audio_encoder")

    def _build_decoder(self, rng) -> None:
        cfg, dt = self.cfg, self.dtype
        d, v = cfg.d_model, cfg.vocab_size
        self._add("decoder.embed.table",
                  (rng.standard_normal((v, d)) / np.sqrt(d)).astype(dt), "decoder")
        for i in range(cfg.n_decoder_blocks):
            base = f"decoder.block{i}"
            self._add_norm(f"{base}.ln1", "decoder")
            self._add_attention(f"{base}.self_attn", "decoder", rng)
            self._add_norm(f"{base}.ln2", "decoder")
            self._add_attention(f"{base}.cross_attn", "decoder", rng)
            self._add_norm(f"{base}.ln3", "decoder")
            self._add_ff(f"{base}.ff", "decoder", rng)
        self._add_norm("decoder.ln", "decoder")
        self._add("decoder.out.w", _xavier(rng, (d, v), d, v, dt), "decoder")
        self._add("decoder.out.b", np.zeros((1, v), dtype=dt), "decoder")

    # ------------------------------------------------------------------
    # introspection

    @property
    def is_multimodal(self) -> bool:
        return self.cfg.fusion_mode != "none"

    @property
    def components(self) -> list[str]:
        present = []
        for component in Parameter.COMPONENTS:
            if any(p.component == component for p in self.params.values()):
                present.append(component)
        return present

    def parameter_count(self, component: str | None = None, trainable_only: bool = False) -> int:
        total = 0
        for p in self.params.values():
            if component is not None and p.component != component:
                continue
            if trainable_only and not p.trainable:
                continue
            total += p.data.size
        return total

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.params.items() if p.trainable}

    # ------------------------------------------------------------------
    # shared transformer pieces

    def _positions(self, length: int) -> Tensor:
        cached = self._pos_cache
        if cached is None or cached.shape[0] < length:
            d = self.cfg.d_model
            n = max(length, 64)
            pos = np.arange(n)[:, None]
            dim = np.arange(0, d, 2)[None, :]
            angle = pos / np.power(10000.0, dim / d)
            table = np.zeros((n, d))
            table[:, 0::2] = np.sin(angle)
            table[:, 1::2] = np.cos(angle)
            self._pos_cache = cached = Tensor(table.astype(self.dtype))
        return Tensor(cached.data[:length])

    def _causal_mask(self, length: int) -> Tensor:
        if length not in self._mask_cache:
            m = np.triu(np.full((length, length), ATTN_MASK_VALUE, dtype=self.dtype), k=1)
            self._mask_cache[length] = Tensor(m[None, :, :])
        return self._mask_cache[length]

    def _attention(self, prefix: str, x_q: Tensor, x_kv: Tensor, mask: Tensor | None, rng) -> Tensor:
        p = self._p
        d, h = self.cfg.d_model, self.cfg.n_heads
        dh = d // h
        q = ad.add(ad.matmul(x_q, p(f"{prefix}.wq")), p(f"{prefix}.bq"))
        k = ad.add(ad.matmul(x_kv, p(f"{prefix}.wk")), p(f"{prefix}.bk"))
        v = ad.add(ad.matmul(x_kv, p(f"{prefix}.wv")), p(f"{prefix}.bv"))
        tq, tk = q.shape[0], k.shape[0]
        qh = ad.transpose(ad.reshape(q, (tq, h, dh)), (1, 0, 2))
        kh = ad.transpose(ad.reshape(k, (tk, h, dh)), (1, 2, 0))
        vh = ad.transpose(ad.reshape(v, (tk, h, dh)), (1, 0, 2))
        scores = ad.scale(ad.matmul(qh, kh), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = ad.add(scores, mask)
        weights = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(weights, vh), (1, 0, 2)), (tq, d))
        out = ad.add(ad.matmul(ctx, p(f"{prefix}.wo")), p(f"{prefix}.bo"))
        if rng is not None and self.cfg.dropout > 0:
            out = ad.dropout(out, self.cfg.dropout, rng)
        return out

    def _ff(self, prefix: str, x: Tensor, rng) -> Tensor:
        p = self._p
        h = ad.relu(ad.add(ad.matmul(x, p(f"{prefix}.w1")), p(f"{prefix}.b1")))
        out = ad.add(ad.matmul(h, p(f"{prefix}.w2")), p(f"{prefix}.b2"))
        if rng is not None and self.cfg.dropout > 0:
            out = ad.dropout(out, self.cfg.dropout, rng)
        return out

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self._p(f"{prefix}.gain"), self._p(f"{prefix}.bias"))

    # ------------------------------------------------------------------
    # audio encoder

    def _encoder_blocks(self, x: Tensor, rng=None) -> Tensor:
        for i in range(self.cfg.n_encoder_blocks):
            base = f"audio_encoder.block{i}"
            n1 = self._norm(f"{base}.ln1", x)
            x = ad.add(x, self._attention(f"{base}.attn", n1, n1, None, rng))
            x = ad.add(x, self._ff(f"{base}.ff", self._norm(f"{base}.ln2", x), rng))
        return self._norm("audio_encoder.ln", x)

    def audio_encode(self, features: np.ndarray, rng=None, add_positions: bool = True) -> Tensor:
        """Features (T0 x n_mels) to encoder output (T x d), T = ceil(T0/4)."""
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.cfg.n_mels:
            raise ShapeError(
                f"expected T x {self.cfg.n_mels} features, got {features.shape}"
            )
        if features.shape[0] < SUBSAMPLE_FACTOR:
            raise ShapeError(
                f"need at least {SUBSAMPLE_FACTOR} frames, got {features.shape[0]}"
            )
        x = Tensor(np.ascontiguousarray(features.T, dtype=self.dtype))
        x = ad.relu(ad.conv1d(x, self._p("audio_encoder.subsample.conv0.w"),
                              self._p("audio_encoder.subsample.conv0.b"), stride=2, padding=1))
        x = ad.relu(ad.conv1d(x, self._p("audio_encoder.subsample.conv1.w"),
                              self._p("audio_encoder.subsample.conv1.b"), stride=2, padding=1))
        x = ad.transpose(x)  # (T, d)
        if add_positions:
            x = ad.add(x, self._positions(x.shape[0]))
        return self._encoder_blocks(x, rng)

    # ------------------------------------------------------------------
    # fusion

    def _visual_embedding(self, visual: np.ndarray | Tensor | None, rng=None) -> Tensor | None:
        if not self.is_multimodal:
            return None
        vcfg = self.cfg.visual
        if visual is None:
            # "none" pairing probes substitute a zero embedding
            return Tensor(np.zeros((vcfg.embed_dim, vcfg.n_positions), dtype=self.dtype))
        if isinstance(visual, Tensor):
            return visual
        visual = np.asarray(visual)
        if visual.ndim == 3:
            return self.visual_encoder.encode(visual.astype(self.dtype))
        if visual.ndim == 2:
            if visual.shape[0] != vcfg.embed_dim or visual.shape[1] != vcfg.n_positions:
                raise ShapeError(
                    f"precomputed visual embedding {visual.shape} does not match "
                    f"configured {vcfg.embed_dim} x {vcfg.n_positions}"
                )
            emb = Tensor(visual.astype(self.dtype))
            if vcfg.use_grid and vcfg.n_gmlp_layers:
                emb = self.visual_encoder.gmlp_stack(emb)
            return emb
        raise ShapeError(f"visual input must be 3-D image or 2-D embedding, got {visual.shape}")

    def encode_utterance(self, features: np.ndarray, visual=None, rng=None) -> FusedSequence:
        """Audio encoding plus fusion; returns decoder memory (d x T_out)."""
        speech = ad.transpose(self.audio_encode(features, rng))  # (d, T)
        visual_emb = self._visual_embedding(visual, rng)
        return fuse(self.cfg.fusion_mode, speech, visual_emb, self.params)

    # ------------------------------------------------------------------
    # decoder

    def decoder_logits(self, memory: Tensor, token_ids, rng=None) -> Tensor:
        """Causal decoder over the prefix; memory is (S, d). Returns (L, V)."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ShapeError("decoder prefix must be a nonempty id sequence")
        if ids.size > self.cfg.max_target_len:
            raise ShapeError(
                f"prefix length {ids.size} exceeds max_target_len {self.cfg.max_target_len}"
            )
        d = self.cfg.d_model
        x = ad.scale(ad.embedding(self._p("decoder.embed.table"), ids), math.sqrt(d))
        x = ad.add(x, self._positions(ids.size))
        mask = self._causal_mask(ids.size)
        for i in range(self.cfg.n_decoder_blocks):
            base = f"decoder.block{i}"
            n1 = self._norm(f"{base}.ln1", x)
            x = ad.add(x, self._attention(f"{base}.self_attn", n1, n1, mask, rng))
            n2 = self._norm(f"{base}.ln2", x)
            x = ad.add(x, self._attention(f"{base}.cross_attn", n2, memory, None, rng))
            x = ad.add(x, self._ff(f"{base}.ff", self._norm(f"{base}.ln3", x), rng))
        x = self._norm("decoder.ln", x)
        return ad.add(ad.matmul(x, self._p("decoder.out.w")), self._p("decoder.out.b"))

    def decode_step(self, fused: FusedSequence, prefix) -> np.ndarray:
        """Log-probability vector over the vocabulary for the next token."""
        prefix = list(prefix)
        if not prefix or prefix[0] != SOS_ID:
            raise ValueError("decoder prefix must start with the sos token")
        memory = ad.transpose(fused.values)
        logits = self.decoder_logits(memory, prefix)
        return ad.log_softmax(ad.slice_axis(logits, 0, len(prefix) - 1, 1), axis=-1).data[0]

    # ------------------------------------------------------------------
    # training loss

    def forward_loss(self, batch: list[Example], augment=None, rng=None, train: bool = False) -> Tensor:
        """Mean per-utterance smoothed cross-entropy over non-pad targets.

        SpecAugment (when given) and dropout apply only with train=True and
        an rng; decode-time callers pass neither.
        """
        if not batch:
            raise ValueError("empty batch")
        losses = []
        for example in batch:
            aug_rng = drop_rng = None
            if train and rng is not None:
                aug_rng, drop_rng = rng.spawn(2)
            feats = example.features
            if train and augment is not None and aug_rng is not None:
                feats = specaugment.apply(feats, augment, aug_rng)
            dropout_rng = drop_rng if train else None
            fused = self.encode_utterance(feats, example.visual, dropout_rng)
            memory = ad.transpose(fused.values)
            ids = np.asarray(example.tokens, dtype=np.int64)
            logits = self.decoder_logits(memory, ids[:-1], dropout_rng)
            losses.append(
                ad.cross_entropy(logits, ids[1:], self.cfg.label_smoothing, PAD_ID)
            )
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        return ad.scale(total, 1.0 / len(batch))

    # ------------------------------------------------------------------
    # search

    def beam_search(self, fused: FusedSequence, beam_size: int, max_len: int,
                    length_penalty: float = 0.0) -> Hypothesis:
        return run_beam_search(
            lambda ids: self.decode_step(fused, ids),
            eos_id=EOS_ID,
            vocab_size=self.cfg.vocab_size,
            beam_size=beam_size,
            max_len=max_len,
            length_penalty=length_penalty,
        )

    def greedy_decode(self, fused: FusedSequence, max_len: int) -> list[int]:
        return self.beam_search(fused, beam_size=1, max_len=max_len).ids

    # ------------------------------------------------------------------
    # checkpoint interface

    def snapshot(self) -> dict[str, ParamRecord]:
        return {
            name: ParamRecord(name, p.component, p.trainable, p.data.copy())
            for name, p in self.params.items()
        }

    def load_component(self, ckpt: Checkpoint, component: str) -> None:
        """Copy one component's weights from a checkpoint into this model.

        Every model parameter of the component must exist in the checkpoint
        with identical shape and dtype; extra checkpoint entries (e.g. a
        pretraining head) are ignored.
        """
        problems = []
        targets = [p for p in self.params.values() if p.component == component]
        if not targets:
            raise CheckpointError(f"model has no {component!r} parameters")
        for p in targets:
            rec = ckpt.params.get(p.name)
            if rec is None:
                problems.append(f"{p.name}: missing from checkpoint")
            elif rec.data.shape != p.data.shape:
                problems.append(f"{p.name}: shape {rec.data.shape} != {p.data.shape}")
            elif rec.data.dtype != p.data.dtype:
                problems.append(f"{p.name}: dtype {rec.data.dtype} != {p.data.dtype}")
        if problems:
            raise CheckpointError(
                f"cannot load component {component!r}: " + "; ".join(problems)
            )
        for p in targets:
            p.data = ckpt.params[p.name].data.copy()

    def load_all(self, ckpt: Checkpoint) -> None:
        for component in self.components:
            self.load_component(ckpt, component)

    def configure_components(self, plans: dict[str, ComponentPlan]) -> "Model":
        """Realize one cell of the init x train transfer grid per component."""
        from .checkpoint import load_checkpoint

        present = set(self.components)
        for component, plan in plans.items():
            if component not in present:
                raise ConfigError(f"model has no component {component!r} to configure")
            if plan.init != "random":
                self.load_component(load_checkpoint(plan.init), component)
            frozen = plan.train == "frozen"
            for p in self.params.values():
                if p.component == component:
                    p.trainable = not frozen
        return self


def run_beam_search(step_fn, eos_id: int, vocab_size: int, beam_size: int,
                    max_len: int, length_penalty: float = 0.0,
                    sos_id: int = SOS_ID) -> Hypothesis:
    """Standard beam expansion over an autoregressive step function.

    ``step_fn(ids)`` returns a log-probability vector over the vocabulary.
    Finished hypotheses rank by score / len^penalty; the best finished one
    wins, or the best live one when nothing finished within max_len.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    beams = [Hypothesis([sos_id], 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        candidates: list[Hypothesis] = []
        for hyp in beams:
            logp = step_fn(hyp.ids)
            k = min(beam_size, vocab_size)
            top = np.argsort(-logp, kind="stable")[:k]
            for token in top:
                token = int(token)
                candidates.append(
                    Hypothesis(hyp.ids + [token], hyp.score + float(logp[token]), token == eos_id)
                )
        candidates.sort(key=lambda h: -h.score)
        beams = []
        for hyp in candidates[:beam_size]:
            (finished if hyp.finished else beams).append(hyp)
        if not beams:
            break

    def ranked(h: Hypothesis) -> float:
        n_generated = max(len(h.ids) - 1, 1)
        return h.score / n_generated**length_penalty

    pool = finished if finished else beams
    return max(pool, key=ranked)
