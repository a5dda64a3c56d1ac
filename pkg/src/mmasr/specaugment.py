"""Train-time feature perturbation: time warp, frequency masks, time masks.

All functions are pure: they take a T x D feature array plus an injected
random generator and return a new array of the same shape. Masked regions
are filled with the pre-mask utterance mean, keeping feature statistics
stable. Never applied at decode time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AugmentPolicy:
    """Perturbation strengths; all-zero policy is the identity."""

    warp_window: int = 0        # max pivot displacement, frames
    freq_mask_width: int = 0    # max width of one frequency band, bins
    n_freq_masks: int = 0
    time_mask_width: int = 0    # max width of one time mask, frames
    n_time_masks: int = 0
    time_mask_ratio: float = 0.0  # cap on total masked frames as fraction of T

    def __post_init__(self):
        if min(self.warp_window, self.freq_mask_width, self.n_freq_masks,
               self.time_mask_width, self.n_time_masks) < 0:
            raise ValueError("augment policy values must be nonnegative")
        if not 0.0 <= self.time_mask_ratio <= 1.0:
            raise ValueError(f"time_mask_ratio must be in [0, 1], got {self.time_mask_ratio}")

    @classmethod
    def toy_default(cls) -> "AugmentPolicy":
        return cls(
            warp_window=5,
            freq_mask_width=10,
            n_freq_masks=2,
            time_mask_width=20,
            n_time_masks=2,
            time_mask_ratio=0.2,
        )


def time_warp(x: np.ndarray, warp_window: int, rng: np.random.Generator) -> np.ndarray:
    """Displace a random pivot frame by up to +-warp_window frames.

    The time axis is piecewise-linearly resampled around the pivot with
    linear interpolation; output shape equals input shape. Degenerate
    inputs (T <= 2W) pass through unchanged.
    """
    x = np.array(x, copy=True)
    t_frames = x.shape[0]
    w = int(warp_window)
    if w == 0 or t_frames <= 2 * w:
        return x
    pivot = int(rng.integers(w, t_frames - w))
    shift = int(rng.integers(-w, w + 1))
    if shift == 0:
        return x
    dest = int(np.clip(pivot + shift, 1, t_frames - 2))
    src = np.interp(
        np.arange(t_frames), [0, dest, t_frames - 1], [0.0, float(pivot), float(t_frames - 1)]
    )
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, t_frames - 1)
    frac = (src - lo)[:, None]
    return x[lo] * (1.0 - frac) + x[hi] * frac


def freq_mask(x: np.ndarray, max_width: int, n_masks: int, rng: np.random.Generator) -> np.ndarray:
    """Mask n_masks frequency bands of width ~ Uniform{0..max_width} each."""
    x = np.array(x, copy=True)
    n_bins = x.shape[1]
    f = min(int(max_width), n_bins)
    if f == 0 or n_masks == 0:
        return x
    fill = x.mean()
    for _ in range(n_masks):
        width = int(rng.integers(0, f + 1))
        start = int(rng.integers(0, n_bins - width + 1))
        x[:, start : start + width] = fill
    return x


def time_mask(
    x: np.ndarray,
    max_width: int,
    n_masks: int,
    max_ratio: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mask n_masks time spans, total width capped at floor(max_ratio * T)."""
    x = np.array(x, copy=True)
    t_frames = x.shape[0]
    budget = int(max_ratio * t_frames)
    if max_width == 0 or n_masks == 0 or budget == 0:
        return x
    fill = x.mean()
    for _ in range(n_masks):
        width = int(rng.integers(0, min(int(max_width), t_frames) + 1))
        width = min(width, budget)
        start = int(rng.integers(0, t_frames - width + 1))
        x[start : start + width, :] = fill
        budget -= width
    return x


def apply(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Warp, then frequency masks, then time masks, on split rng streams."""
    warp_rng, freq_rng, time_rng = rng.spawn(3)
    out = time_warp(x, policy.warp_window, warp_rng)
    out = freq_mask(out, policy.freq_mask_width, policy.n_freq_masks, freq_rng)
    out = time_mask(
        out, policy.time_mask_width, policy.n_time_masks, policy.time_mask_ratio, time_rng
    )
    return out
