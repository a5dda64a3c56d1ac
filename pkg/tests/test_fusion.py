"""Fusion operators: shape contracts, residual identity, oracle equivalence."""

import numpy as np
import pytest

from helpers import rng_for

import mmasr.autodiff as ad
from mmasr.autodiff import Tape, Tensor
from mmasr.errors import ShapeError
from mmasr.fusion import fuse, fuse_emb, fuse_seq, init_fusion_params


def emb_params(d_model, d_visual, d_sp, d_vp, seed, randomize_out=False):
    params = init_fusion_params("emb", d_model, d_visual, d_sp, d_vp, rng_for(seed),
                                dtype=np.float64)
    if randomize_out:
        rng = rng_for(seed + 1)
        params["fusion.out_proj.w"].data = rng.uniform(-1, 1, (d_model, d_sp + d_vp))
        params["fusion.out_proj.b"].data = rng.uniform(-1, 1, (d_model, 1))
    return params


def emb_oracle(speech, visual, params):
    """Scalar-loop re-implementation of embedding-axis fusion."""
    wa = params["fusion.speech_proj.w"].data
    ba = params["fusion.speech_proj.b"].data
    wv = params["fusion.visual_proj.w"].data
    bv = params["fusion.visual_proj.b"].data
    wo = params["fusion.out_proj.w"].data
    bo = params["fusion.out_proj.b"].data
    d_model, t_frames = speech.shape
    d_sp, d_vp = wa.shape[0], wv.shape[0]

    proj_v = np.zeros(d_vp)
    for i in range(d_vp):
        acc = bv[i, 0]
        for j in range(visual.shape[0]):
            acc += wv[i, j] * visual[j, 0]
        proj_v[i] = acc

    out = np.zeros_like(speech)
    for t in range(t_frames):
        stacked = np.zeros(d_sp + d_vp)
        for i in range(d_sp):
            acc = ba[i, 0]
            for j in range(d_model):
                acc += wa[i, j] * speech[j, t]
            stacked[i] = acc
        stacked[d_sp:] = proj_v
        for i in range(d_model):
            acc = bo[i, 0]
            for j in range(d_sp + d_vp):
                acc += wo[i, j] * stacked[j]
            out[i, t] = speech[i, t] + acc
    return out


class TestEmbFusion:
    def test_zero_out_projection_is_exact_residual_identity(self):
        rng = rng_for(120)
        speech = rng.standard_normal((6, 9))
        visual = rng.standard_normal((4, 1))
        params = emb_params(6, 4, 3, 2, seed=0)
        fused = fuse_emb(Tensor(speech), Tensor(visual), params)
        assert np.array_equal(fused.values.data, speech)
        assert fused.boundary == 9

    def test_output_shape_is_d_model_by_t(self):
        rng = rng_for(121)
        for _ in range(20):
            d_model = int(rng.integers(2, 12))
            t_frames = int(rng.integers(1, 20))
            d_visual = int(rng.integers(1, 9))
            params = emb_params(d_model, d_visual, 3, 2, seed=1, randomize_out=True)
            fused = fuse_emb(
                Tensor(rng.standard_normal((d_model, t_frames))),
                Tensor(rng.standard_normal((d_visual, 1))),
                params,
            )
            assert fused.values.shape == (d_model, t_frames)

    def test_matches_scalar_loop_oracle(self):
        rng = rng_for(122)
        speech = rng.uniform(-1, 1, (4, 3))
        visual = rng.uniform(-1, 1, (2, 1))
        params = emb_params(4, 2, 2, 2, seed=2, randomize_out=True)
        for name in ("speech_proj", "visual_proj"):
            p = params[f"fusion.{name}.b"]
            p.data = rng_for(3).uniform(-1, 1, p.data.shape)
        fused = fuse_emb(Tensor(speech), Tensor(visual), params)
        oracle = emb_oracle(speech, visual, params)
        np.testing.assert_allclose(fused.values.data, oracle, rtol=1e-12, atol=1e-13)

    def test_grid_visual_rejected(self):
        params = emb_params(4, 2, 2, 2, seed=4)
        with pytest.raises(ValueError):
            fuse_emb(Tensor(np.zeros((4, 3))), Tensor(np.zeros((2, 4))), params)

    def test_dim_mismatch_rejected(self):
        params = emb_params(4, 2, 2, 2, seed=5)
        with pytest.raises(ShapeError):
            fuse_emb(Tensor(np.zeros((5, 3))), Tensor(np.zeros((2, 1))), params)


class TestSeqFusion:
    def test_output_shape_is_d_model_by_t_plus_k(self):
        rng = rng_for(123)
        for _ in range(20):
            d_model = int(rng.integers(2, 12))
            t_frames = int(rng.integers(1, 20))
            d_visual = int(rng.integers(1, 9))
            k = int(rng.integers(1, 17))
            params = init_fusion_params("seq", d_model, d_visual, 0, 0, rng, np.float64)
            fused = fuse_seq(
                Tensor(rng.standard_normal((d_model, t_frames))),
                Tensor(rng.standard_normal((d_visual, k))),
                params,
            )
            assert fused.values.shape == (d_model, t_frames + k)
            assert fused.boundary == t_frames

    def test_speech_columns_bit_exact(self):
        rng = rng_for(124)
        speech = rng.standard_normal((5, 7))
        visual = rng.standard_normal((3, 4))
        params = init_fusion_params("seq", 5, 3, 0, 0, rng, np.float64)
        fused = fuse_seq(Tensor(speech), Tensor(visual), params)
        assert np.array_equal(fused.values.data[:, :7], speech)

    def test_single_slot_matches_projection_oracle(self):
        rng = rng_for(125)
        speech = rng.uniform(-1, 1, (5, 7))
        visual = rng.uniform(-1, 1, (3, 1))
        params = init_fusion_params("seq", 5, 3, 0, 0, rng, np.float64)
        fused = fuse_seq(Tensor(speech), Tensor(visual), params)
        w = params["fusion.visual_proj.w"].data
        b = params["fusion.visual_proj.b"].data
        oracle = np.array(
            [b[i, 0] + sum(w[i, j] * visual[j, 0] for j in range(3)) for i in range(5)]
        )
        np.testing.assert_allclose(fused.values.data[:, 7], oracle, rtol=1e-12)


class TestDispatch:
    def test_none_is_identity(self):
        speech = Tensor(rng_for(126).standard_normal((4, 6)))
        fused = fuse("none", speech, None)
        assert fused.values is speech
        assert fused.boundary == 6

    def test_emb_with_zero_out_proj_equals_none(self):
        rng = rng_for(127)
        speech = rng.standard_normal((4, 6))
        visual = rng.standard_normal((3, 1))
        params = emb_params(4, 3, 2, 2, seed=6)
        a = fuse("emb", Tensor(speech), Tensor(visual), params)
        b = fuse("none", Tensor(speech), None)
        assert np.array_equal(a.values.data, b.values.data)

    def test_dispatch_equals_direct_call(self):
        rng = rng_for(128)
        speech = rng.standard_normal((4, 6))
        visual = rng.standard_normal((3, 2))
        params = init_fusion_params("seq", 4, 3, 0, 0, rng_for(7), np.float64)
        a = fuse("seq", Tensor(speech), Tensor(visual), params)
        b = fuse_seq(Tensor(speech), Tensor(visual), params)
        assert np.array_equal(a.values.data, b.values.data)

    def test_missing_visual_rejected(self):
        params = emb_params(4, 3, 2, 2, seed=8)
        with pytest.raises(ValueError):
            fuse("emb", Tensor(np.zeros((4, 6))), None, params)

    def test_gradients_reach_both_modalities(self):
        rng = rng_for(129)
        speech_arr = rng.uniform(-1, 1, (4, 6))
        visual_arr = rng.uniform(-1, 1, (3, 1))
        params = emb_params(4, 3, 2, 2, seed=9, randomize_out=True)
        from mmasr.autodiff import Parameter

        sp = Parameter("speech_in", speech_arr, "audio_encoder")
        vp = Parameter("visual_in", visual_arr, "visual_encoder")
        with Tape() as tape:
            fused = fuse_emb(ad.scale(sp, 1.0), ad.scale(vp, 1.0), params)
            loss = ad.sum_all(fused.values)
        grads = tape.backward(loss)
        assert np.linalg.norm(grads["speech_in"].data) > 0
        assert np.linalg.norm(grads["visual_in"].data) > 0
        assert np.linalg.norm(grads["fusion.out_proj.w"].data) > 0
