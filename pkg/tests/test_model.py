"""ASR model: shapes, causality, search, loss contracts, transfer grid."""

import math

import numpy as np
import pytest

from helpers import finite_difference, max_rel_err, rng_for

import mmasr.autodiff as ad
from mmasr.autodiff import Tape, Tensor
from mmasr.checkpoint import load_checkpoint, save_checkpoint
from mmasr.errors import CheckpointError, ConfigError, ShapeError
from mmasr.model import (
    ComponentPlan,
    Example,
    Hypothesis,
    Model,
    ModelConfig,
    run_beam_search,
    subsampled_length,
)
from mmasr.tokenizer import EOS_ID, PAD_ID, SOS_ID
from mmasr.visual import VisualConfig


def tiny_config(**kw):
    defaults = dict(
        vocab_size=12,
        n_mels=8,
        d_model=16,
        n_heads=2,
        n_encoder_blocks=1,
        n_decoder_blocks=1,
        ff_dim=24,
        dropout=0.0,
        label_smoothing=0.0,
        max_target_len=32,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


def tiny_visual(**kw):
    defaults = dict(image_size=8, embed_dim=4, n_blocks=3, stem_channels=2)
    defaults.update(kw)
    return VisualConfig(**defaults)


def random_example(rng, n_frames=13, n_mels=8, n_tokens=5, vocab=12, visual_shape=None):
    tokens = [SOS_ID] + [int(rng.integers(4, vocab)) for _ in range(n_tokens)] + [EOS_ID]
    visual = rng.standard_normal(visual_shape) if visual_shape else None
    return Example(rng.standard_normal((n_frames, n_mels)), visual, tokens)


class TestAudioEncode:
    def test_output_shape_and_subsampling(self):
        model = Model(tiny_config(), seed=1)
        for t0 in (4, 7, 16, 33):
            out = model.audio_encode(rng_for(0).standard_normal((t0, 8)))
            assert out.shape == (subsampled_length(t0), 16)
            assert out.shape[0] == math.ceil(t0 / 4)

    def test_too_short_input(self):
        model = Model(tiny_config(), seed=1)
        with pytest.raises(ShapeError):
            model.audio_encode(np.zeros((3, 8)))

    def test_wrong_feature_dim(self):
        model = Model(tiny_config(), seed=1)
        with pytest.raises(ShapeError):
            model.audio_encode(np.zeros((10, 9)))

    def test_blocks_permutation_equivariant_without_positions(self):
        model = Model(tiny_config(dtype="f64"), seed=2)
        x = rng_for(1).standard_normal((9, 16))
        perm = rng_for(2).permutation(9)
        out = model._encoder_blocks(Tensor(x)).data
        out_perm = model._encoder_blocks(Tensor(x[perm])).data
        np.testing.assert_allclose(out_perm, out[perm], rtol=1e-10, atol=1e-12)

    def test_gradient_check_one_block(self):
        model = Model(tiny_config(dtype="f64", d_model=8, n_heads=2, ff_dim=12), seed=3)
        feats = rng_for(3).uniform(-1, 1, (9, 8))
        w = rng_for(4).uniform(-1, 1, (3, 8))
        names = [
            "audio_encoder.subsample.conv0.w",
            "audio_encoder.block0.attn.wq",
            "audio_encoder.block0.ff.w1",
            "audio_encoder.block0.ln1.gain",
        ]
        arrays = [model.params[n].data for n in names]

        def loss():
            return ad.sum_all(ad.mul(model.audio_encode(feats), Tensor(w)))

        with Tape() as tape:
            out = loss()
        grads = tape.backward(out)
        fd = finite_difference(lambda: loss().item(), arrays)
        for name, ref in zip(names, fd):
            assert max_rel_err(grads[name].data, ref) < 1e-4, name


class TestDecodeStep:
    def setup_method(self):
        self.model = Model(tiny_config(), seed=4)
        self.fused = self.model.encode_utterance(rng_for(5).standard_normal((12, 8)))

    def test_distribution_shape_and_normalization(self):
        logp = self.model.decode_step(self.fused, [SOS_ID, 5, 6])
        assert logp.shape == (12,)
        assert abs(np.logaddexp.reduce(logp.astype(np.float64))) < 1e-6

    def test_prefix_must_start_with_sos(self):
        with pytest.raises(ValueError):
            self.model.decode_step(self.fused, [5, 6])

    def test_prefix_length_capped(self):
        with pytest.raises(ShapeError):
            self.model.decode_step(self.fused, [SOS_ID] + [5] * 40)

    def test_causality_future_tokens_irrelevant(self):
        model = Model(tiny_config(dtype="f64"), seed=6)
        fused = model.encode_utterance(rng_for(7).standard_normal((12, 8)))
        memory = ad.transpose(fused.values)
        ids_a = np.array([SOS_ID, 5, 6, 7, 8])
        ids_b = np.array([SOS_ID, 5, 6, 9, 10])  # differs only at positions >= 3
        la = model.decoder_logits(memory, ids_a).data
        lb = model.decoder_logits(memory, ids_b).data
        np.testing.assert_array_equal(la[:3], lb[:3])

    @pytest.mark.parametrize("dtype,tol", [("f32", 1e-6), ("f64", 1e-10)])
    def test_stepwise_equals_parallel(self, dtype, tol):
        model = Model(tiny_config(dtype=dtype), seed=7)
        fused = model.encode_utterance(rng_for(8).standard_normal((12, 8)))
        ids = [SOS_ID, 4, 9, 5, 7]
        memory = ad.transpose(fused.values)
        parallel = ad.log_softmax(model.decoder_logits(memory, np.array(ids)), axis=-1).data
        for k in range(1, len(ids) + 1):
            step = model.decode_step(fused, ids[:k])
            assert np.max(np.abs(step - parallel[k - 1])) < tol


class TestSearch:
    def test_rigged_eos_first_gives_empty_body(self):
        model = Model(tiny_config(), seed=8)
        model.params["decoder.out.w"].data = np.zeros_like(
            model.params["decoder.out.w"].data
        )
        bias = np.zeros_like(model.params["decoder.out.b"].data)
        bias[0, EOS_ID] = 10.0
        model.params["decoder.out.b"].data = bias
        fused = model.encode_utterance(rng_for(9).standard_normal((12, 8)))
        ids = model.greedy_decode(fused, max_len=8)
        assert ids == [SOS_ID, EOS_ID]

    def test_greedy_equals_beam_one_and_terminates(self):
        model = Model(tiny_config(), seed=9)
        fused = model.encode_utterance(rng_for(10).standard_normal((16, 8)))
        hyp = model.beam_search(fused, beam_size=1, max_len=6)
        assert model.greedy_decode(fused, max_len=6) == hyp.ids
        assert len(hyp.ids) <= 7

    def test_score_matches_stepwise_rescoring(self):
        model = Model(tiny_config(), seed=10)
        fused = model.encode_utterance(rng_for(11).standard_normal((16, 8)))
        hyp = model.beam_search(fused, beam_size=3, max_len=6)
        total = 0.0
        for k in range(1, len(hyp.ids)):
            logp = model.decode_step(fused, hyp.ids[:k])
            total += float(logp[hyp.ids[k]])
        assert abs(total - hyp.score) < 1e-5

    def test_exhaustive_beam_finds_global_optimum(self):
        # 3-step toy model with known Markov logits, enumerated exactly
        vocab, eos = 4, EOS_ID
        rng = rng_for(12)
        table = {}

        def step_fn(ids):
            key = (len(ids), ids[-1])
            if key not in table:
                local = np.random.default_rng(hash(key) % (2**32)).uniform(-3, 0, vocab)
                local -= np.logaddexp.reduce(local)
                table[key] = local
            return table[key]

        def enumerate_best(prefix, score, depth):
            if prefix[-1] == eos:
                return prefix, score
            if depth == 3:
                return prefix, score
            logp = step_fn(prefix)
            best = None
            for tok in range(vocab):
                seq, s = enumerate_best(prefix + [tok], score + logp[tok], depth + 1)
                if best is None or s > best[1]:
                    best = (seq, s)
            return best

        oracle_ids, oracle_score = enumerate_best([SOS_ID], 0.0, 0)
        hyp = run_beam_search(step_fn, eos_id=eos, vocab_size=vocab,
                              beam_size=vocab, max_len=3)
        assert hyp.score == pytest.approx(oracle_score, abs=1e-12)
        assert hyp.ids == oracle_ids

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            run_beam_search(lambda ids: np.zeros(4), EOS_ID, 4, beam_size=0, max_len=3)
        with pytest.raises(ValueError):
            run_beam_search(lambda ids: np.zeros(4), EOS_ID, 4, beam_size=1, max_len=0)


class TestForwardLoss:
    def test_fresh_model_loss_near_log_vocab(self):
        cfg = tiny_config(vocab_size=40, label_smoothing=0.0)
        model = Model(cfg, seed=11)
        rng = rng_for(13)
        batch = [random_example(rng, vocab=40) for _ in range(4)]
        loss = model.forward_loss(batch).item()
        assert abs(loss - math.log(40)) / math.log(40) < 0.10

    def test_batch_loss_is_mean_of_per_utterance(self):
        model = Model(tiny_config(), seed=12)
        rng = rng_for(14)
        batch = [random_example(rng, n_frames=9 + i) for i in range(3)]
        per_utt = [model.forward_loss([ex]).item() for ex in batch]
        together = model.forward_loss(batch).item()
        assert together == pytest.approx(np.mean(per_utt), rel=1e-6)

    def test_padding_contributes_zero_gradient(self):
        model = Model(tiny_config(dtype="f64"), seed=13)
        rng = rng_for(15)
        ex = random_example(rng)
        padded = Example(ex.features, None, ex.tokens + [PAD_ID, PAD_ID])

        def grads_for(example):
            with Tape() as tape:
                loss = model.forward_loss([example])
            return tape.backward(loss)

        ga, gb = grads_for(ex), grads_for(padded)
        assert set(ga) == set(gb)
        for name in ga:
            np.testing.assert_allclose(ga[name].data, gb[name].data, atol=1e-12)

    def test_out_of_range_token_rejected(self):
        model = Model(tiny_config(), seed=14)
        ex = Example(rng_for(16).standard_normal((12, 8)), None, [SOS_ID, 99, EOS_ID])
        with pytest.raises(IndexError):
            model.forward_loss([ex])

    def test_dropout_only_in_training(self):
        model = Model(tiny_config(dropout=0.3), seed=15)
        rng = rng_for(17)
        ex = random_example(rng)
        a = model.forward_loss([ex]).item()
        b = model.forward_loss([ex]).item()
        assert a == b  # eval path has no dropout
        ta = model.forward_loss([ex], rng=rng_for(1), train=True).item()
        tb = model.forward_loss([ex], rng=rng_for(2), train=True).item()
        assert ta != tb


class TestMultimodal:
    def test_zero_out_projection_matches_unimodal_bitwise(self):
        vcfg = tiny_visual()
        multi = Model(tiny_config(fusion_mode="emb", visual=vcfg), seed=16)
        uni = Model(tiny_config(), seed=17)
        ckpt = __import__("mmasr.checkpoint", fromlist=["Checkpoint"]).Checkpoint(
            params=multi.snapshot()
        )
        uni.load_component(ckpt, "audio_encoder")
        uni.load_component(ckpt, "decoder")
        rng = rng_for(18)
        for _ in range(3):
            ex_audio = random_example(rng)
            ex_multi = Example(ex_audio.features, rng.standard_normal((3, 8, 8)), ex_audio.tokens)
            lm = multi.forward_loss([ex_multi]).item()
            lu = uni.forward_loss([ex_audio]).item()
            assert lm == lu

    def test_seq_fusion_extends_memory(self):
        vcfg = tiny_visual(image_size=16, use_grid=True, n_gmlp_layers=1)
        model = Model(tiny_config(fusion_mode="seq", visual=vcfg), seed=18)
        feats = rng_for(19).standard_normal((12, 8))
        img = rng_for(20).standard_normal((3, 16, 16))
        fused = model.encode_utterance(feats, img)
        t = subsampled_length(12)
        assert fused.values.shape == (16, t + vcfg.n_positions)
        assert fused.boundary == t

    def test_none_visual_uses_zero_embedding(self):
        vcfg = tiny_visual()
        model = Model(tiny_config(fusion_mode="emb", visual=vcfg), seed=19)
        feats = rng_for(21).standard_normal((12, 8))
        a = model.encode_utterance(feats, None)
        b = model.encode_utterance(feats, np.zeros((4, 1)))
        np.testing.assert_array_equal(a.values.data, b.values.data)

    def test_precomputed_embedding_shape_checked(self):
        model = Model(tiny_config(fusion_mode="emb", visual=tiny_visual()), seed=20)
        with pytest.raises(ShapeError):
            model.encode_utterance(rng_for(22).standard_normal((12, 8)), np.zeros((5, 1)))

    def test_emb_fusion_rejects_grid_config(self):
        with pytest.raises(ConfigError):
            tiny_config(fusion_mode="emb", visual=tiny_visual(use_grid=True))


class TestComponentGrid:
    def test_load_save_roundtrip_bit_exact(self, tmp_path):
        model = Model(tiny_config(fusion_mode="emb", visual=tiny_visual()), seed=21)
        from mmasr.checkpoint import Checkpoint

        path = tmp_path / "m.ckpt"
        save_checkpoint(path, Checkpoint(params=model.snapshot(), metadata={"step": "7"}))
        ckpt = load_checkpoint(path)
        other = Model(tiny_config(fusion_mode="emb", visual=tiny_visual()), seed=99)
        other.load_all(ckpt)
        for name, p in model.params.items():
            assert np.array_equal(other.params[name].data, p.data), name
        assert ckpt.metadata["step"] == "7"

    def test_component_load_ignores_extra_params(self, tmp_path):
        from mmasr.checkpoint import Checkpoint, ParamRecord

        model = Model(tiny_config(), seed=22)
        records = model.snapshot()
        records["audio_encoder.extra.w"] = ParamRecord(
            "audio_encoder.extra.w", "audio_encoder", True, np.zeros(3, dtype=np.float32)
        )
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, Checkpoint(params=records))
        model.load_component(load_checkpoint(path), "audio_encoder")

    def test_shape_mismatch_lists_offenders(self, tmp_path):
        from mmasr.checkpoint import Checkpoint

        donor = Model(tiny_config(d_model=32), seed=23)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, Checkpoint(params=donor.snapshot()))
        model = Model(tiny_config(), seed=24)
        with pytest.raises(CheckpointError, match="audio_encoder.block0.attn.wq"):
            model.load_component(load_checkpoint(path), "audio_encoder")

    def test_freeze_grid_counts_monotone(self, tmp_path):
        model = Model(tiny_config(fusion_mode="emb", visual=tiny_visual()), seed=25)
        counts = []
        components = model.components
        for n_frozen in range(len(components) + 1):
            plans = {
                c: ComponentPlan(train="frozen" if i < n_frozen else "finetune")
                for i, c in enumerate(components)
            }
            model.configure_components(plans)
            counts.append(model.parameter_count(trainable_only=True))
        assert counts[0] == model.parameter_count()
        assert counts[-1] == 0
        assert all(a > b for a, b in zip(counts, counts[1:]))

    def test_frozen_components_get_no_gradients(self):
        model = Model(tiny_config(), seed=26)
        model.configure_components({"audio_encoder": ComponentPlan(train="frozen")})
        ex = random_example(rng_for(23))
        with Tape() as tape:
            loss = model.forward_loss([ex])
        grads = tape.backward(loss)
        assert not any(name.startswith("audio_encoder.") for name in grads)
        assert any(name.startswith("decoder.") for name in grads)

    def test_unknown_component_rejected(self):
        model = Model(tiny_config(), seed=27)
        with pytest.raises(ConfigError):
            model.configure_components({"visual_encoder": ComponentPlan()})
