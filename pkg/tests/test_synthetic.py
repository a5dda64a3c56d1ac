"""Synthetic corpus: determinism, homophone construction, matched-filter oracle."""

import json

import numpy as np
import pytest

from helpers import rng_for

from mmasr.errors import ConfigError
from mmasr.synthetic import (
    SyntheticDataset,
    SyntheticSpec,
    generate,
    generate_visual_pretrain,
    match_templates,
)


def small_spec(**kw):
    defaults = dict(n_words=14, n_homophone_pairs=3, n_train=6, n_val=3, n_test=3,
                    min_words=3, max_words=5, seed=11)
    defaults.update(kw)
    return SyntheticSpec(**defaults)


class TestInventory:
    def test_homophone_pairs_share_signature_exactly(self):
        ds = SyntheticDataset(small_spec())
        for a, b in ds.pairs:
            assert ds.signatures[a] == ds.signatures[b]
            assert np.array_equal(ds.word_waveform(a), ds.word_waveform(b))
            assert ds.words[a] != ds.words[b]

    def test_non_homophones_pairwise_distinct(self):
        ds = SyntheticDataset(small_spec())
        sigs = {}
        for w, sig in enumerate(ds.signatures):
            sigs.setdefault(sig, []).append(w)
        for sig, members in sigs.items():
            if len(members) > 1:
                assert tuple(members) in [tuple(p) for p in ds.pairs]

    def test_sentences_never_contain_both_pair_members(self):
        ds = SyntheticDataset(small_spec())
        rng = rng_for(200)
        for _ in range(300):
            words = set(ds.sample_sentence(rng))
            for a, b in ds.pairs:
                assert not (a in words and b in words)

    def test_too_few_words_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(n_words=8, n_homophone_pairs=4)


class TestRendering:
    def test_homophone_swap_keeps_audio_identical(self):
        ds = SyntheticDataset(small_spec())
        a, b = ds.pairs[0]
        words_a = [a, 10, 12]
        words_b = [b, 10, 12]
        wav_a = ds.render_audio(words_a, rng_for(7))
        wav_b = ds.render_audio(words_b, rng_for(7))
        assert np.array_equal(wav_a.samples, wav_b.samples)
        assert ds.transcript(words_a) != ds.transcript(words_b)
        assert not np.array_equal(ds.render_image(words_a), ds.render_image(words_b))

    def test_image_composes_grounded_patterns_in_fixed_cells(self):
        ds = SyntheticDataset(small_spec())
        a = ds.grounded[0]
        img_single = ds.render_image([a])
        img_with_filler = ds.render_image([a, 10, 12])  # non-grounded add nothing
        assert np.array_equal(img_single, img_with_filler)
        both = ds.render_image([ds.grounded[0], ds.grounded[2]])
        assert not np.array_equal(both, img_single)

    def test_matched_filter_recovers_transcripts(self):
        ds = SyntheticDataset(small_spec(snr_db=40.0))
        rng = rng_for(201)
        for _ in range(20):
            words = ds.sample_sentence(rng)
            wav = ds.render_audio(words, rng)
            decoded = match_templates(ds, wav)
            assert len(decoded) == len(words)
            for truth, guess in zip(words, decoded):
                if truth in ds._partner:
                    assert guess in (truth, ds._partner[truth])
                else:
                    assert guess == truth


class TestGenerate:
    def test_same_seed_identical_bytes(self, tmp_path):
        spec = small_spec()
        generate(spec, tmp_path / "a")
        generate(spec, tmp_path / "b")
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_manifests_and_metadata(self, tmp_path):
        spec = small_spec()
        paths = generate(spec, tmp_path / "d")
        train_lines = paths["train"].read_text().splitlines()
        assert len(train_lines) == spec.n_train
        entry = json.loads(train_lines[0])
        assert set(entry) == {"utt_id", "audio", "image", "text"}
        assert (tmp_path / "d" / entry["audio"]).exists()
        assert (tmp_path / "d" / entry["image"]).exists()
        meta = json.loads(paths["meta"].read_text())
        assert len(meta["homophone_pairs"]) == spec.n_homophone_pairs
        assert len(meta["grounded_words"]) == 2 * spec.n_homophone_pairs
        assert len(set(meta["words"])) == spec.n_words

    def test_utt_ids_unique(self, tmp_path):
        paths = generate(small_spec(), tmp_path / "u")
        ids = []
        for split in ("train", "val", "test"):
            for line in paths[split].read_text().splitlines():
                ids.append(json.loads(line)["utt_id"])
        assert len(ids) == len(set(ids))

    def test_visual_pretrain_manifest(self, tmp_path):
        spec = small_spec()
        manifest = generate_visual_pretrain(spec, 3, tmp_path / "v")
        lines = [json.loads(l) for l in manifest.read_text().splitlines()]
        assert len(lines) == 3 * 2 * spec.n_homophone_pairs
        classes = {l["text"] for l in lines}
        assert len(classes) == 2 * spec.n_homophone_pairs
