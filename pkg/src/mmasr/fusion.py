"""Fusing speech and visual embeddings before the decoder.

Two operators over a speech matrix (D_a x T) and visual embeddings
(D_v x K):

* ``emb``: project both inputs, replicate the single visual vector across
  time, concatenate along the embedding axis, project back to D_a, and add
  the speech input back in. Output stays D_a x T, so a pretrained unimodal
  decoder can be reused unchanged; with a zero output projection the fused
  features equal the speech features exactly.
* ``seq``: project the visual embeddings to D_a and append them after the
  speech frames along the sequence axis, giving D_a x (T + K).

Fusion parameters live under their own ``fusion`` component tag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeError

FUSION_MODES = ("none", "emb", "seq")


@dataclass
class FusedSequence:
    """Decoder memory: values is D_a x T_out; positions < boundary are speech."""

    values: Tensor
    boundary: int

    @property
    def length(self) -> int:
        return self.values.shape[1]


def _xavier(rng, n_out, n_in, dtype):
    a = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-a, a, size=(n_out, n_in)).astype(dtype)


def init_fusion_params(
    mode: str,
    d_model: int,
    visual_dim: int,
    speech_proj_dim: int,
    visual_proj_dim: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> dict[str, Parameter]:
    """Create the projection parameters for one fusion mode.

    The ``emb`` output projection starts at zero so a fresh multimodal
    model reproduces the unimodal one bit-for-bit at step 0.
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    params: dict[str, Parameter] = {}

    def param(name, value):
        p = Parameter(f"fusion.{name}", value, "fusion")
        params[p.name] = p

    if mode == "emb":
        param("speech_proj.w", _xavier(rng, speech_proj_dim, d_model, dtype))
        param("speech_proj.b", np.zeros((speech_proj_dim, 1), dtype=dtype))
        param("visual_proj.w", _xavier(rng, visual_proj_dim, visual_dim, dtype))
        param("visual_proj.b", np.zeros((visual_proj_dim, 1), dtype=dtype))
        param("out_proj.w", np.zeros((d_model, speech_proj_dim + visual_proj_dim), dtype=dtype))
        param("out_proj.b", np.zeros((d_model, 1), dtype=dtype))
    elif mode == "seq":
        param("visual_proj.w", _xavier(rng, d_model, visual_dim, dtype))
        param("visual_proj.b", np.zeros((d_model, 1), dtype=dtype))
    return params


def _affine_cols(params: dict[str, Parameter], name: str, x) -> Tensor:
    """W @ x + b with x arranged one vector per column."""
    return ad.add(ad.matmul(params[f"fusion.{name}.w"], x), params[f"fusion.{name}.b"])


def fuse_emb(speech: Tensor, visual: Tensor, params: dict[str, Parameter]) -> FusedSequence:
    """Embedding-axis fusion; requires a single visual vector (K = 1)."""
    if visual.ndim != 2 or visual.shape[1] != 1:
        raise ValueError(f"emb fusion needs a D_v x 1 visual embedding, got {visual.shape}")
    w = params["fusion.speech_proj.w"]
    if speech.ndim != 2 or speech.shape[0] != w.data.shape[1]:
        raise ShapeError(
            f"emb fusion: speech {speech.shape} does not match projection "
            f"input dim {w.data.shape[1]}"
        )
    t_frames = speech.shape[1]
    projected_speech = _affine_cols(params, "speech_proj", speech)
    projected_visual = _affine_cols(params, "visual_proj", visual)
    # replicate the visual column T times via an outer product with ones
    ones_row = Tensor(np.ones((1, t_frames), dtype=speech.dtype))
    replicated = ad.matmul(projected_visual, ones_row)
    stacked = ad.concat([projected_speech, replicated], axis=0)
    fused = ad.add(speech, _affine_cols(params, "out_proj", stacked))
    return FusedSequence(values=fused, boundary=t_frames)


def fuse_seq(speech: Tensor, visual: Tensor, params: dict[str, Parameter]) -> FusedSequence:
    """Sequence-axis fusion: speech frames first, then projected visual slots."""
    if visual.ndim != 2 or visual.shape[1] < 1:
        raise ValueError(f"seq fusion needs a D_v x K visual embedding, got {visual.shape}")
    w = params["fusion.visual_proj.w"]
    if visual.shape[0] != w.data.shape[1]:
        raise ShapeError(
            f"seq fusion: visual {visual.shape} does not match projection "
            f"input dim {w.data.shape[1]}"
        )
    if speech.ndim != 2 or speech.shape[0] != w.data.shape[0]:
        raise ShapeError(
            f"seq fusion: speech {speech.shape} does not match model dim {w.data.shape[0]}"
        )
    projected = _affine_cols(params, "visual_proj", visual)
    fused = ad.concat([speech, projected], axis=1)
    return FusedSequence(values=fused, boundary=speech.shape[1])


def fuse(
    mode: str,
    speech: Tensor,
    visual: Tensor | None,
    params: dict[str, Parameter] | None = None,
) -> FusedSequence:
    """Dispatch on fusion mode; ``none`` passes speech through unchanged."""
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if mode == "none":
        return FusedSequence(values=speech, boundary=speech.shape[1])
    if visual is None:
        raise ValueError(f"fusion mode {mode!r} requires a visual embedding")
    if mode == "emb":
        return fuse_emb(speech, visual, params)
    return fuse_seq(speech, visual, params)
