"""Waveform handling and log-mel feature extraction.

Pure functions throughout; everything is computed in float64 and is
deterministic, so features can be recomputed bit-identically anywhere.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("waveform must be a nonempty 1-D sample array")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")


@dataclass
class FeatureMatrix:
    """Log-mel features, one row per frame: values is T_frames x n_mels."""

    values: np.ndarray
    frame_shift_ms: float
    frame_length_ms: float


@dataclass
class FrontendConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fft_size: int = 512
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None  # defaults to Nyquist


def read_wav(path) -> Waveform:
    """Read 16-bit signed little-endian mono PCM WAV."""
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
            if f.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as exc:
        raise DataError(f"{path}: not a valid WAV file: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def frame_count(n_samples: int, frame_length: int, frame_shift: int) -> int:
    if n_samples < frame_length:
        return 0
    return (n_samples - frame_length) // frame_shift + 1


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window (DFT-bin aligned when length == fft_size)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def stft(w: Waveform, frame_length_ms: float, frame_shift_ms: float, fft_size: int) -> np.ndarray:
    """Hann-windowed one-sided spectrogram, T_frames x (fft_size/2 + 1), complex."""
    frame_length = int(round(frame_length_ms * w.sample_rate / 1000.0))
    frame_shift = int(round(frame_shift_ms * w.sample_rate / 1000.0))
    if frame_length <= 0 or frame_shift <= 0:
        raise ConfigError("frame length and shift must be positive")
    if fft_size < frame_length:
        raise ConfigError(f"fft_size {fft_size} smaller than frame length {frame_length} samples")
    if fft_size & (fft_size - 1):
        raise ConfigError(f"fft_size must be a power of two, got {fft_size}")
    n_frames = frame_count(w.samples.size, frame_length, frame_shift)
    if n_frames == 0:
        raise DataError(
            f"waveform of {w.samples.size} samples shorter than one "
            f"{frame_length}-sample frame"
        )
    idx = np.arange(frame_length)[None, :] + frame_shift * np.arange(n_frames)[:, None]
    frames = w.samples[idx] * hann_window(frame_length)
    return np.fft.rfft(frames, n=fft_size, axis=1)


def mel_scale(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_inverse(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_weights(
    fft_size: int, sample_rate: int, n_mels: int, f_min: float, f_max: float
) -> np.ndarray:
    """Triangular mel filters, (fft_size/2 + 1) x n_mels, nonnegative weights."""
    if n_mels < 2:
        raise ConfigError(f"need at least 2 mel filters, got {n_mels}")
    if not 0.0 <= f_min < f_max <= sample_rate / 2.0:
        raise ConfigError(
            f"invalid band edges f_min={f_min}, f_max={f_max} at rate {sample_rate}"
        )
    edges = mel_inverse(np.linspace(mel_scale(f_min), mel_scale(f_max), n_mels + 2))
    bin_freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    left, center, right = edges[:-2], edges[1:-1], edges[2:]
    up = (bin_freqs[:, None] - left) / (center - left)
    down = (right - bin_freqs[:, None]) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def mel_filterbank(
    spec_power: np.ndarray, n_mels: int, f_min: float, f_max: float, sample_rate: int
) -> np.ndarray:
    """Apply triangular mel filters to a power spectrogram (T x bins)."""
    n_bins = spec_power.shape[1]
    fft_size = 2 * (n_bins - 1)
    weights = mel_filter_weights(fft_size, sample_rate, n_mels, f_min, f_max)
    return spec_power @ weights


def logmel(w: Waveform, cfg: FrontendConfig) -> FeatureMatrix:
    """log(mel energy + floor) features for one waveform."""
    spec = stft(w, cfg.frame_length_ms, cfg.frame_shift_ms, cfg.fft_size)
    power = np.abs(spec) ** 2
    f_max = cfg.f_max if cfg.f_max is not None else w.sample_rate / 2.0
    mel = mel_filterbank(power, cfg.n_mels, cfg.f_min, f_max, w.sample_rate)
    return FeatureMatrix(
        values=np.log(mel + LOG_FLOOR),
        frame_shift_ms=cfg.frame_shift_ms,
        frame_length_ms=cfg.frame_length_ms,
    )
