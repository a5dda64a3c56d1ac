"""Visual encoder: preprocessing, shape contracts, gMLP, gradients."""

import numpy as np
import pytest

from helpers import check_grads, rng_for

import mmasr.autodiff as ad
from mmasr.autodiff import Tape, Tensor
from mmasr.errors import DataError, ShapeError
from mmasr.visual import VisualConfig, VisualEncoder, preprocess, resize_bilinear


class AlwaysFlip:
    def random(self):
        return 0.0


class NeverFlip:
    def random(self):
        return 1.0


def small_cfg(**kw):
    defaults = dict(image_size=16, embed_dim=8, n_blocks=3, stem_channels=4)
    defaults.update(kw)
    return VisualConfig(**defaults)


class TestPreprocess:
    def test_deterministic_without_flip(self):
        img = rng_for(100).random((20, 24, 3))
        cfg = small_cfg()
        a = preprocess(img, cfg)
        b = preprocess(img, cfg)
        assert np.array_equal(a, b)
        assert a.shape == (3, 16, 16)

    def test_flip_twice_is_identity(self):
        img = rng_for(101).random((16, 16, 3))
        cfg = small_cfg()
        once = preprocess(img, cfg, flip=True, rng=AlwaysFlip())
        twice = once[:, :, ::-1][:, :, ::-1]
        assert np.array_equal(twice, once)
        # flipping the flipped image recovers the unflipped output
        unflipped = preprocess(img, cfg, flip=True, rng=NeverFlip())
        assert np.array_equal(once[:, :, ::-1], unflipped)

    def test_constant_image_resizes_to_constant(self):
        img = np.full((25, 31, 3), 0.7)
        out = resize_bilinear(img, 16)
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_rejects_non_rgb(self):
        with pytest.raises(DataError):
            preprocess(np.zeros((16, 16)), small_cfg())
        with pytest.raises(DataError):
            preprocess(np.zeros((16, 16, 4)), small_cfg())

    def test_standardization(self):
        cfg = small_cfg(channel_mean=0.5, channel_std=0.25)
        img = np.full((16, 16, 3), 0.75)
        out = preprocess(img, cfg)
        np.testing.assert_allclose(out, 1.0, atol=1e-12)


class TestEncoderShapes:
    def test_global_is_dv_by_one(self):
        cfg = small_cfg()
        enc = VisualEncoder(cfg, rng_for(102))
        out = enc.encode_global(rng_for(1).standard_normal((3, 16, 16)).astype(np.float32))
        assert out.shape == (8, 1)

    def test_grid_is_dv_by_k(self):
        cfg = small_cfg(use_grid=True)
        enc = VisualEncoder(cfg, rng_for(103))
        out = enc.encode_grid(rng_for(2).standard_normal((3, 16, 16)).astype(np.float32))
        assert out.shape == (8, cfg.grid_size**2)
        assert cfg.grid_size == 2

    def test_global_equals_mean_of_grid(self):
        cfg = small_cfg(use_grid=True)
        enc = VisualEncoder(cfg, rng_for(104))
        img = rng_for(3).standard_normal((3, 16, 16)).astype(np.float32)
        grid = enc.encode_grid(img).data
        glob = enc.encode_global(img).data
        np.testing.assert_allclose(glob[:, 0], grid.mean(axis=1), rtol=1e-5, atol=1e-6)

    def test_grid_flattening_row_major(self):
        cfg = small_cfg(use_grid=True)
        enc = VisualEncoder(cfg, rng_for(105))
        img = rng_for(4).standard_normal((3, 16, 16)).astype(np.float32)
        fmap = enc._feature_map(img).data  # (D_v, G, G)
        grid = enc.encode_grid(img).data
        g = cfg.grid_size
        for i in range(g):
            for j in range(g):
                np.testing.assert_array_equal(grid[:, i * g + j], fmap[:, i, j])

    def test_shape_contracts_random_configs(self):
        rng = rng_for(106)
        for _ in range(10):
            size = int(rng.choice([8, 16, 24, 32]))
            dv = int(rng.choice([4, 8, 12]))
            n_blocks = int(rng.choice([3, 5]))
            cfg = VisualConfig(image_size=size, embed_dim=dv, n_blocks=n_blocks,
                               stem_channels=4, use_grid=True)
            enc = VisualEncoder(cfg, rng)
            img = rng.standard_normal((3, size, size)).astype(np.float32)
            assert enc.encode_grid(img).shape == (dv, (size // 8) ** 2)
            assert enc.encode_global(img).shape == (dv, 1)

    def test_deterministic_inference(self):
        cfg = small_cfg()
        enc = VisualEncoder(cfg, rng_for(107))
        img = rng_for(5).standard_normal((3, 16, 16)).astype(np.float32)
        assert np.array_equal(enc.encode(img).data, enc.encode(img).data)

    def test_all_params_tagged_visual_encoder(self):
        enc = VisualEncoder(small_cfg(use_grid=True, n_gmlp_layers=2), rng_for(108))
        assert all(p.component == "visual_encoder" for p in enc.params.values())

    def test_too_small_image_rejected(self):
        enc = VisualEncoder(small_cfg(), rng_for(109))
        with pytest.raises(ShapeError):
            enc.encode(np.zeros((3, 4, 4), dtype=np.float32))


class TestGmlp:
    def make(self, n_layers, k_side=4):
        cfg = VisualConfig(image_size=8 * k_side // 2 if k_side != 4 else 16,
                           embed_dim=6, n_blocks=3, stem_channels=4,
                           use_grid=True, n_gmlp_layers=n_layers)
        return VisualEncoder(cfg, rng_for(110), dtype=np.float64)

    def test_zero_layers_identity(self):
        enc = self.make(0)
        x = Tensor(rng_for(6).standard_normal((6, 4)))
        out = enc.gmlp_stack(x)
        assert np.array_equal(out.data, x.data)

    def test_single_position_rejected(self):
        enc = self.make(2)
        with pytest.raises(ValueError):
            enc.gmlp_stack(Tensor(np.zeros((6, 1))))

    def test_shape_preserved(self):
        enc = self.make(2)
        x = Tensor(rng_for(7).standard_normal((6, 4)))
        assert enc.gmlp_stack(x).shape == (6, 4)

    def test_exact_near_identity_limit_gates_to_one(self):
        enc = self.make(1)
        enc.params["visual_encoder.gmlp0.spatial.w"].data = np.zeros((4, 4))
        x = rng_for(8).standard_normal((6, 4))
        out = enc.gmlp_stack(Tensor(x)).data
        # with gate == 1 the layer is residual + plain MLP of the norm
        h = x.T.copy()
        mu = h.mean(axis=1, keepdims=True)
        sd = np.sqrt(h.var(axis=1, keepdims=True) + 1e-5)
        hn = (h - mu) / sd
        from scipy.special import erf

        z = hn @ enc.params["visual_encoder.gmlp0.expand.w"].data
        z = z * 0.5 * (1 + erf(z / np.sqrt(2)))
        u = z[:, :6]
        expect = (x.T + u @ enc.params["visual_encoder.gmlp0.project.w"].data).T
        np.testing.assert_allclose(out, expect, rtol=1e-10, atol=1e-12)

    def test_gradient_check_per_layer(self):
        enc = self.make(1)
        x64 = rng_for(9).uniform(-1, 1, (6, 4))
        names = [
            "visual_encoder.gmlp0.spatial.w",
            "visual_encoder.gmlp0.expand.w",
            "visual_encoder.gmlp0.project.w",
        ]
        arrays = [enc.params[n].data for n in names]
        w = rng_for(10).uniform(-1, 1, (6, 4))

        def loss(*_):
            return ad.sum_all(ad.mul(enc.gmlp_stack(Tensor(x64)), Tensor(w)))

        from helpers import finite_difference, max_rel_err

        with Tape() as tape:
            out = loss()
        grads = tape.backward(out)
        fd = finite_difference(lambda: loss().item(), arrays)
        for name, g_ref in zip(names, fd):
            assert max_rel_err(grads[name].data, g_ref) < 1e-4


class TestEncoderGradients:
    def test_full_encoder_gradient_on_8x8_input(self):
        cfg = VisualConfig(image_size=8, embed_dim=5, n_blocks=3, stem_channels=3)
        enc = VisualEncoder(cfg, rng_for(111), dtype=np.float64)
        img = rng_for(12).uniform(-1, 1, (3, 8, 8))
        w = rng_for(13).uniform(-1, 1, (5, 1))
        names = ["visual_encoder.stem.w", "visual_encoder.block2.conv2.w",
                 "visual_encoder.block0.skip.w"]
        arrays = [enc.params[n].data for n in names]

        def loss():
            return ad.sum_all(ad.mul(enc.encode_global(img), Tensor(w)))

        from helpers import finite_difference, max_rel_err

        with Tape() as tape:
            out = loss()
        grads = tape.backward(out)
        fd = finite_difference(lambda: loss().item(), arrays)
        for name, g_ref in zip(names, fd):
            assert max_rel_err(grads[name].data, g_ref) < 1e-4
