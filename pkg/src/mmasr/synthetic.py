"""Procedural audio-visual corpora with controlled homophone ambiguity.

Each vocabulary word renders as a fixed sequence of band-limited tones.
Homophone pairs share one audio signature bit-for-bit but carry distinct
visual patterns, so a speech-only model cannot tell the pair members
apart while an audio-visual model can. Images compose the patterns of the
grounded (homophone) words an utterance contains, each in its own fixed
cell. Generation is fully deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, write_wav
from .errors import ConfigError
from .tensorio import write_ppm

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

_PALETTE = [
    (0.90, 0.15, 0.15),
    (0.15, 0.60, 0.90),
    (0.15, 0.80, 0.25),
    (0.95, 0.80, 0.10),
    (0.80, 0.20, 0.85),
    (0.95, 0.55, 0.10),
    (0.10, 0.85, 0.80),
    (0.55, 0.35, 0.15),
    (0.25, 0.25, 0.95),
    (0.65, 0.85, 0.20),
    (0.90, 0.40, 0.60),
    (0.40, 0.75, 0.55),
]
_SHAPES = ("square", "disk", "stripes", "checker")


@dataclass
class SyntheticSpec:
    n_words: int = 40
    n_homophone_pairs: int = 4
    n_train: int = 400
    n_val: int = 50
    n_test: int = 50
    min_words: int = 5
    max_words: int = 9
    sample_rate: int = 16000
    tones_per_word: int = 3
    tone_ms: float = 40.0
    snr_db: float = 30.0
    image_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_words < 2 * self.n_homophone_pairs + 2:
            raise ConfigError("need more words than homophone-pair members")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError("invalid sentence length range")


class SyntheticDataset:
    """Derived word inventory: names, audio signatures, visual patterns."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.words = self._make_words(spec.n_words, rng)
        self.signatures = self._make_signatures(rng)
        self.grounded = list(range(2 * spec.n_homophone_pairs))
        self.pairs = [(2 * i, 2 * i + 1) for i in range(spec.n_homophone_pairs)]
        self._partner = {}
        for a, b in self.pairs:
            self._partner[a], self._partner[b] = b, a
        # one fixed image cell per grounded word
        self.cells_per_side = int(np.ceil(np.sqrt(max(len(self.grounded), 1))))

    @staticmethod
    def _make_words(n: int, rng) -> list[str]:
        words: list[str] = []
        seen = set()
        while len(words) < n:
            n_syll = int(rng.integers(2, 4))
            word = "".join(
                _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                for _ in range(n_syll)
            )
            if word not in seen:
                seen.add(word)
                words.append(word)
        return words

    def _make_signatures(self, rng) -> list[tuple[int, ...]]:
        """Tone-index tuples; homophone pair members share theirs exactly."""
        spec = self.spec
        n_tones = 24
        signatures: list[tuple[int, ...]] = []
        seen = set()
        for word_index in range(spec.n_words):
            if word_index < 2 * spec.n_homophone_pairs and word_index % 2 == 1:
                signatures.append(signatures[word_index - 1])
                continue
            while True:
                sig = tuple(int(rng.integers(n_tones)) for _ in range(spec.tones_per_word))
                if sig not in seen:
                    seen.add(sig)
                    signatures.append(sig)
                    break
        return signatures

    def tone_frequency(self, tone_index: int) -> float:
        return 300.0 + 150.0 * tone_index  # 300..3750 Hz at 24 tones

    # ------------------------------------------------------------------
    # audio

    def word_waveform(self, word_index: int) -> np.ndarray:
        """Noise-free tone template for one word (also the matched filter)."""
        spec = self.spec
        n = int(round(spec.tone_ms * spec.sample_rate / 1000.0))
        t = np.arange(n) / spec.sample_rate
        ramp = np.minimum(np.arange(n), np.arange(n)[::-1]) / (0.1 * n)
        envelope = np.clip(ramp, 0.0, 1.0)
        segments = [
            0.35 * envelope * np.sin(2 * np.pi * self.tone_frequency(tone) * t)
            for tone in self.signatures[word_index]
        ]
        return np.concatenate(segments)

    def render_audio(self, word_indices, rng) -> Waveform:
        """Concatenated word templates plus Gaussian noise at spec.snr_db."""
        spec = self.spec
        clean = np.concatenate([self.word_waveform(w) for w in word_indices])
        signal_power = float(np.mean(clean**2))
        noise_power = signal_power / (10.0 ** (spec.snr_db / 10.0))
        noisy = clean + rng.normal(0.0, np.sqrt(noise_power), clean.size)
        return Waveform(np.clip(noisy, -1.0, 1.0), spec.sample_rate)

    # ------------------------------------------------------------------
    # images

    def _draw_pattern(self, canvas: np.ndarray, grounded_index: int) -> None:
        size = self.spec.image_size
        g = self.cells_per_side
        cell = size // g
        row, col = divmod(grounded_index, g)
        y0, x0 = row * cell, col * cell
        color = np.array(_PALETTE[grounded_index % len(_PALETTE)])
        shape = _SHAPES[grounded_index % len(_SHAPES)]
        pad = max(1, cell // 8)
        ys, xs = np.mgrid[0:cell, 0:cell]
        if shape == "square":
            mask = (ys >= pad) & (ys < cell - pad) & (xs >= pad) & (xs < cell - pad)
        elif shape == "disk":
            c = (cell - 1) / 2.0
            mask = (ys - c) ** 2 + (xs - c) ** 2 <= (cell / 2.0 - pad) ** 2
        elif shape == "stripes":
            mask = ((ys + xs) // 2) % 2 == 0
        else:  # checker
            mask = ((ys // pad) + (xs // pad)) % 2 == 0
        region = canvas[y0 : y0 + cell, x0 : x0 + cell]
        region[mask] = color

    def render_image(self, word_indices) -> np.ndarray:
        """Mid-gray canvas with one pattern per distinct grounded word."""
        size = self.spec.image_size
        canvas = np.full((size, size, 3), 0.45)
        for word_index in sorted(set(word_indices)):
            if word_index in self.grounded:
                self._draw_pattern(canvas, word_index)
        return canvas

    # ------------------------------------------------------------------
    # sentences

    def sample_sentence(self, rng) -> list[int]:
        """Uniform word sequence; never both members of one homophone pair."""
        spec = self.spec
        length = int(rng.integers(spec.min_words, spec.max_words + 1))
        chosen: list[int] = []
        used_pairs = set()
        while len(chosen) < length:
            w = int(rng.integers(spec.n_words))
            partner = self._partner.get(w)
            if partner is not None and partner in used_pairs:
                continue
            if partner is not None:
                used_pairs.add(w)
            chosen.append(w)
        return chosen

    def transcript(self, word_indices) -> str:
        return " ".join(self.words[w] for w in word_indices)


def match_templates(dataset: SyntheticDataset, waveform: Waveform) -> list[int]:
    """Matched-filter oracle: per word slot, the best-correlating template.

    Homophone partners correlate identically, so the lower pair member is
    reported for them; non-homophone words are recovered exactly at high SNR.
    """
    spec = dataset.spec
    word_len = int(round(spec.tone_ms * spec.sample_rate / 1000.0)) * spec.tones_per_word
    templates = np.stack([dataset.word_waveform(w) for w in range(spec.n_words)])
    n_slots = waveform.samples.size // word_len
    out = []
    for slot in range(n_slots):
        window = waveform.samples[slot * word_len : (slot + 1) * word_len]
        scores = templates @ window
        out.append(int(np.argmax(scores)))
    return out


def generate(spec: SyntheticSpec, out_dir, manifest_prefix: str = "") -> dict[str, Path]:
    """Write WAVs, PPM images, train/val/test manifests, and dataset.json.

    ``manifest_prefix`` is prepended to the paths recorded in manifests so
    they can be made relative to a workspace root above ``out_dir``.
    """
    out_dir = Path(out_dir)
    prefix = f"{manifest_prefix.rstrip('/')}/" if manifest_prefix else ""
    dataset = SyntheticDataset(spec)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    split_rngs = dict(zip(("train", "val", "test"), rng.spawn(3)))
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    paths: dict[str, Path] = {}
    for split, size in sizes.items():
        split_rng = split_rngs[split]
        lines = []
        for i in range(size):
            utt_rng = split_rng.spawn(1)[0]
            words = dataset.sample_sentence(utt_rng)
            utt_id = f"{split}-{i:04d}"
            audio_rel = f"audio/{utt_id}.wav"
            image_rel = f"images/{utt_id}.ppm"
            write_wav(out_dir / audio_rel, dataset.render_audio(words, utt_rng))
            write_ppm(out_dir / image_rel, dataset.render_image(words))
            lines.append(
                json.dumps(
                    {
                        "utt_id": utt_id,
                        "audio": prefix + audio_rel,
                        "image": prefix + image_rel,
                        "text": dataset.transcript(words),
                    },
                    sort_keys=True,
                )
            )
        manifest = out_dir / f"{split}.jsonl"
        manifest.write_text("\n".join(lines) + "\n")
        paths[split] = manifest

    meta = {
        "spec": asdict(spec),
        "words": dataset.words,
        "homophone_pairs": [
            [dataset.words[a], dataset.words[b]] for a, b in dataset.pairs
        ],
        "grounded_words": [dataset.words[w] for w in dataset.grounded],
    }
    meta_path = out_dir / "dataset.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    paths["meta"] = meta_path
    return paths


def generate_visual_pretrain(spec: SyntheticSpec, n_per_class: int, out_dir,
                             manifest_prefix: str = "") -> Path:
    """Single-pattern classification images for visual-encoder pretraining.

    Each grounded word yields images containing only its own pattern; the
    manifest's text field holds the class word.
    """
    out_dir = Path(out_dir)
    prefix = f"{manifest_prefix.rstrip('/')}/" if manifest_prefix else ""
    dataset = SyntheticDataset(spec)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed + 1)
    lines = []
    for grounded_index, word_index in enumerate(dataset.grounded):
        for i in range(n_per_class):
            utt_id = f"vis-{grounded_index:02d}-{i:04d}"
            image_rel = f"images/{utt_id}.ppm"
            img = dataset.render_image([word_index])
            img = np.clip(img * rng.uniform(0.8, 1.2) + rng.normal(0, 0.02, img.shape), 0, 1)
            write_ppm(out_dir / image_rel, img)
            lines.append(
                json.dumps(
                    {
                        "utt_id": utt_id,
                        "image": prefix + image_rel,
                        "text": dataset.words[word_index],
                    },
                    sort_keys=True,
                )
            )
    manifest = out_dir / "visual_pretrain.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
