"""Image preprocessing and the small residual CNN visual encoder.

The encoder maps a standardized C x H x W image to a grid of embeddings
(one per spatial cell after three stride-2 stages) or to a single global
vector (the grid mean). An optional stack of gated-MLP layers refines
grid embeddings before sequence fusion. All parameters carry the
``visual_encoder`` component tag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DataError, ShapeError

MIN_INPUT_SIZE = 8  # three stride-2 stages need at least one output cell


@dataclass
class VisualConfig:
    image_size: int = 32
    embed_dim: int = 64          # D_v
    n_blocks: int = 3            # 3 = small capacity, 5 = large
    stem_channels: int = 16
    n_gmlp_layers: int = 0
    use_grid: bool = False       # grid of K = G^2 embeddings vs single vector
    channel_mean: float = 0.5
    channel_std: float = 0.5

    def __post_init__(self):
        if self.image_size < MIN_INPUT_SIZE:
            raise ValueError(f"image_size must be >= {MIN_INPUT_SIZE}")
        if self.n_blocks < 3:
            raise ValueError("need at least the three stride-2 blocks")
        if self.n_gmlp_layers and (not self.use_grid or self.image_size // 8 < 2):
            raise ValueError("gMLP layers need a grid of more than one embedding")

    @property
    def grid_size(self) -> int:
        return self.image_size // 8

    @property
    def n_positions(self) -> int:
        """K: grid cells when use_grid, else 1."""
        return self.grid_size**2 if self.use_grid else 1


def resize_bilinear(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an H x W x C image to size x size."""
    h, w, c = pixels.shape
    if (h, w) == (size, size):
        return pixels.astype(np.float64, copy=True)

    def sample_axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo)

    ylo, yhi, fy = sample_axis(h, size)
    xlo, xhi, fx = sample_axis(w, size)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = pixels[ylo][:, xlo] * (1 - fx) + pixels[ylo][:, xhi] * fx
    bot = pixels[yhi][:, xlo] * (1 - fx) + pixels[yhi][:, xhi] * fx
    return top * (1 - fy) + bot * fy


def preprocess(
    pixels: np.ndarray,
    cfg: VisualConfig,
    flip: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Resize, standardize, and optionally random-flip an H x W x 3 image.

    Returns a C x H x W float array. Flipping (probability 0.5) only
    happens when ``flip`` is set and an rng is supplied, i.e. at train time.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DataError(f"expected an H x W x 3 RGB image, got shape {pixels.shape}")
    out = resize_bilinear(pixels.astype(np.float64), cfg.image_size)
    if flip and rng is not None and rng.random() < 0.5:
        out = out[:, ::-1, :]
    out = (out - cfg.channel_mean) / cfg.channel_std
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def _xavier(rng, shape, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class VisualEncoder:
    """Stem conv + residual blocks + optional gMLP stack.

    Three of the residual blocks downsample by 2 so ``image_size`` maps to
    a grid of G = image_size / 8 cells per side; extra blocks (large
    capacity) keep stride 1.
    """

    def __init__(self, cfg: VisualConfig, rng: np.random.Generator, dtype=np.float32,
                 n_classes: int | None = None):
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}
        self._block_plan: list[tuple[int, int, int]] = []  # (c_in, c_out, stride)

        def param(name, value):
            p = Parameter(f"visual_encoder.{name}", value, "visual_encoder")
            self.params[p.name] = p
            return p

        stem = cfg.stem_channels
        param("stem.w", _xavier(rng, (stem, 3, 3, 3), 27, stem * 9, dtype))
        param("stem.b", np.zeros(stem, dtype=dtype))

        n_blocks = cfg.n_blocks
        strides = [2 if i in self._downsample_indices(n_blocks) else 1 for i in range(n_blocks)]
        c_prev = stem
        for i in range(n_blocks):
            c_out = int(round(stem + (cfg.embed_dim - stem) * (i + 1) / n_blocks))
            self._block_plan.append((c_prev, c_out, strides[i]))
            fan = c_prev * 9
            param(f"block{i}.conv1.w", _xavier(rng, (c_out, c_prev, 3, 3), fan, c_out * 9, dtype))
            param(f"block{i}.conv1.b", np.zeros(c_out, dtype=dtype))
            param(f"block{i}.conv2.w", _xavier(rng, (c_out, c_out, 3, 3), c_out * 9, c_out * 9, dtype))
            param(f"block{i}.conv2.b", np.zeros(c_out, dtype=dtype))
            if strides[i] != 1 or c_out != c_prev:
                param(f"block{i}.skip.w", _xavier(rng, (c_out, c_prev, 1, 1), c_prev, c_out, dtype))
                param(f"block{i}.skip.b", np.zeros(c_out, dtype=dtype))
            c_prev = c_out

        k = cfg.grid_size**2
        for layer in range(cfg.n_gmlp_layers):
            d = cfg.embed_dim
            param(f"gmlp{layer}.norm.gain", np.ones(d, dtype=dtype))
            param(f"gmlp{layer}.norm.bias", np.zeros(d, dtype=dtype))
            param(f"gmlp{layer}.expand.w", _xavier(rng, (d, 2 * d), d, 2 * d, dtype))
            param(f"gmlp{layer}.expand.b", np.zeros((1, 2 * d), dtype=dtype))
            # spatial gating starts near identity: tiny weights, unit bias
            param(f"gmlp{layer}.spatial.w", (rng.normal(0.0, 1e-3, (k, k))).astype(dtype))
            param(f"gmlp{layer}.spatial.b", np.ones((k, 1), dtype=dtype))
            param(f"gmlp{layer}.project.w", _xavier(rng, (d, d), d, d, dtype))
            param(f"gmlp{layer}.project.b", np.zeros((1, d), dtype=dtype))

        if n_classes is not None:
            param("head.w", _xavier(rng, (cfg.embed_dim, n_classes), cfg.embed_dim, n_classes, dtype))
            param("head.b", np.zeros((1, n_classes), dtype=dtype))

    @staticmethod
    def _downsample_indices(n_blocks: int) -> set[int]:
        # exactly three stride-2 blocks, spread out when capacity is larger
        if n_blocks == 3:
            return {0, 1, 2}
        return {0, (n_blocks - 1) // 2, n_blocks - 1}

    def _p(self, name: str) -> Parameter:
        return self.params[f"visual_encoder.{name}"]

    def _feature_map(self, image: np.ndarray | Tensor) -> Tensor:
        if isinstance(image, Tensor):
            x = image
        else:
            x = Tensor(np.asarray(image, dtype=self.dtype))
        if x.ndim != 3 or x.shape[0] != 3:
            raise ShapeError(f"encoder expects a 3 x H x W image, got {x.shape}")
        if min(x.shape[1], x.shape[2]) < MIN_INPUT_SIZE:
            raise ShapeError(f"image {x.shape} below minimum input size {MIN_INPUT_SIZE}")
        x = ad.relu(ad.conv2d(x, self._p("stem.w"), self._p("stem.b"), stride=1, padding=1))
        for i, (c_in, c_out, stride) in enumerate(self._block_plan):
            h = ad.relu(ad.conv2d(x, self._p(f"block{i}.conv1.w"), self._p(f"block{i}.conv1.b"),
                                  stride=stride, padding=1))
            h = ad.conv2d(h, self._p(f"block{i}.conv2.w"), self._p(f"block{i}.conv2.b"),
                          stride=1, padding=1)
            if f"visual_encoder.block{i}.skip.w" in self.params:
                skip = ad.conv2d(x, self._p(f"block{i}.skip.w"), self._p(f"block{i}.skip.b"),
                                 stride=stride, padding=0)
            else:
                skip = x
            x = ad.relu(ad.add(h, skip))
        return x  # (D_v, G, G)

    def encode_grid(self, image) -> Tensor:
        """Grid embeddings (D_v x K); cell (i, j) lands at column i*G + j."""
        fmap = self._feature_map(image)
        d, g1, g2 = fmap.shape
        return ad.reshape(fmap, (d, g1 * g2))

    def encode_global(self, image) -> Tensor:
        """Single global embedding (D_v x 1): mean over grid cells."""
        return ad.mean_axis(self.encode_grid(image), axis=1, keepdims=True)

    def encode(self, image) -> Tensor:
        """Embedding in the configured layout, gMLP-refined when grid."""
        if self.cfg.use_grid:
            return self.gmlp_stack(self.encode_grid(image))
        return self.encode_global(image)

    def gmlp_stack(self, embeddings: Tensor) -> Tensor:
        """Apply the configured gated-MLP layers to D_v x K grid embeddings."""
        k = embeddings.shape[1]
        if k <= 1:
            raise ValueError("gMLP needs more than one embedding to gate over")
        if self.cfg.n_gmlp_layers == 0:
            return embeddings
        x = ad.transpose(embeddings)  # (K, D_v)
        for layer in range(self.cfg.n_gmlp_layers):
            pre = f"gmlp{layer}"
            h = ad.layer_norm(x, self._p(f"{pre}.norm.gain"), self._p(f"{pre}.norm.bias"))
            h = ad.gelu(ad.add(ad.matmul(h, self._p(f"{pre}.expand.w")), self._p(f"{pre}.expand.b")))
            d = self.cfg.embed_dim
            u = ad.slice_axis(h, 1, 0, d)
            v = ad.slice_axis(h, 1, d, d)
            gate = ad.add(ad.matmul(self._p(f"{pre}.spatial.w"), v), self._p(f"{pre}.spatial.b"))
            gated = ad.mul(u, gate)
            out = ad.add(ad.matmul(gated, self._p(f"{pre}.project.w")), self._p(f"{pre}.project.b"))
            x = ad.add(x, out)
        return ad.transpose(x)

    def classify(self, image) -> Tensor:
        """Logits for the synthetic pretraining task (global embedding head)."""
        pooled = ad.transpose(self.encode_global(image))  # (1, D_v)
        return ad.add(ad.matmul(pooled, self._p("head.w")), self._p("head.b"))

    def snapshot(self):
        from .checkpoint import ParamRecord

        return {
            name: ParamRecord(name, p.component, p.trainable, p.data.copy())
            for name, p in self.params.items()
        }
