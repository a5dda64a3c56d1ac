"""Manifests and example assembly: audio -> normalized features -> tokens.

A manifest is JSON-lines; each line holds ``utt_id``, ``text``, and any of
``audio``, ``image``, ``visual_embedding`` with paths relative to the
workspace root. Referenced files must exist at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import FrontendConfig, logmel, read_wav
from .errors import DataError
from .metrics import WerReport
from .model import Example, Model
from .tensorio import read_ppm, read_tensor
from .tokenizer import EOS_ID, SOS_ID, Vocabulary, decode, encode, normalize
from .visual import VisualConfig, preprocess

STD_FLOOR = 1e-8


@dataclass
class ManifestEntry:
    utt_id: str
    text: str
    audio: str | None = None
    image: str | None = None
    visual_embedding: str | None = None


def load_manifest(path, root) -> list[ManifestEntry]:
    path, root = Path(path), Path(root)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        unknown = set(obj) - {"utt_id", "text", "audio", "image", "visual_embedding"}
        if unknown:
            raise DataError(f"{path}:{lineno}: unknown manifest keys {sorted(unknown)}")
        if "utt_id" not in obj or "text" not in obj:
            raise DataError(f"{path}:{lineno}: utt_id and text are required")
        entry = ManifestEntry(
            utt_id=obj["utt_id"],
            text=obj["text"],
            audio=obj.get("audio"),
            image=obj.get("image"),
            visual_embedding=obj.get("visual_embedding"),
        )
        if entry.utt_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate utt_id {entry.utt_id!r}")
        seen.add(entry.utt_id)
        for key in ("audio", "image", "visual_embedding"):
            rel = getattr(entry, key)
            if rel is not None and not (root / rel).exists():
                raise DataError(f"{path}:{lineno}: missing {key} file {root / rel}")
        entries.append(entry)
    if not entries:
        raise DataError(f"{path}: empty manifest")
    return entries


def compute_feature_stats(feature_list) -> tuple[np.ndarray, np.ndarray]:
    """Global per-mel-bin mean and std over a training set."""
    stacked = np.concatenate([f for f in feature_list], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return mean.astype(np.float64), std.astype(np.float64)


def normalize_features(values: np.ndarray, stats) -> np.ndarray:
    mean, std = stats
    return (values - mean) / std


def extract_features(entry: ManifestEntry, root, frontend: FrontendConfig) -> np.ndarray:
    if entry.audio is None:
        raise DataError(f"{entry.utt_id}: no audio path in manifest")
    path = Path(root) / entry.audio
    if path.suffix == ".mmt":
        return read_tensor(path)
    return logmel(read_wav(path), frontend).values


def load_visual(entry: ManifestEntry, root, visual_cfg: VisualConfig) -> np.ndarray | None:
    """Preprocessed C x H x W image, or a D_v x K embedding, or None."""
    root = Path(root)
    if entry.visual_embedding is not None:
        return read_tensor(root / entry.visual_embedding)
    if entry.image is None:
        return None
    path = root / entry.image
    pixels = read_tensor(path) if path.suffix == ".mmt" else read_ppm(path)
    return preprocess(pixels, visual_cfg)


def tokens_for(vocab: Vocabulary, text: str) -> list[int]:
    return [SOS_ID] + encode(vocab, text) + [EOS_ID]


def prepare_examples(
    entries: list[ManifestEntry],
    root,
    frontend: FrontendConfig,
    vocab: Vocabulary,
    stats=None,
    visual_cfg: VisualConfig | None = None,
) -> tuple[list[Example], tuple[np.ndarray, np.ndarray]]:
    """Assemble model-ready examples; computes stats when none are given."""
    raw = [extract_features(e, root, frontend) for e in entries]
    if stats is None:
        stats = compute_feature_stats(raw)
    examples = []
    for entry, feats in zip(entries, raw):
        visual = load_visual(entry, root, visual_cfg) if visual_cfg is not None else None
        examples.append(
            Example(normalize_features(feats, stats), visual, tokens_for(vocab, entry.text))
        )
    return examples, stats


@dataclass
class ProbeItem:
    utt_id: str
    features: np.ndarray
    visual: np.ndarray | None
    ref_words: list[str]


def prepare_probe_items(
    entries: list[ManifestEntry],
    root,
    frontend: FrontendConfig,
    stats,
    visual_cfg: VisualConfig | None,
) -> list[ProbeItem]:
    items = []
    for entry in entries:
        feats = normalize_features(extract_features(entry, root, frontend), stats)
        visual = load_visual(entry, root, visual_cfg) if visual_cfg is not None else None
        items.append(ProbeItem(entry.utt_id, feats, visual, normalize(entry.text).split()))
    return items


@dataclass
class Transcriber:
    """Model plus vocabulary: decodes features to text. Read-only model."""

    model: Model
    vocab: Vocabulary
    beam_size: int = 1
    length_penalty: float = 0.0
    max_len: int | None = None

    @property
    def is_multimodal(self) -> bool:
        return self.model.is_multimodal

    def transcribe(self, features, visual=None, beam_size: int | None = None) -> str:
        fused = self.model.encode_utterance(features, visual)
        limit = self.max_len or self.model.cfg.max_target_len - 1
        hyp = self.model.beam_search(
            fused,
            beam_size=beam_size or self.beam_size,
            max_len=limit,
            length_penalty=self.length_penalty,
        )
        return decode(self.vocab, hyp.ids)


def evaluate_transcriber(
    transcriber: Transcriber, items: list[ProbeItem], beam_size: int | None = None
) -> WerReport:
    from .metrics import wer

    refs, hyps, ids = [], [], []
    for item in items:
        hyps.append(transcriber.transcribe(item.features, item.visual, beam_size).split())
        refs.append(item.ref_words)
        ids.append(item.utt_id)
    return wer(refs, hyps, ids)
