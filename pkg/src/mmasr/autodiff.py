"""Dense-tensor engine with reverse-mode automatic differentiation.

All model math runs through the ops in this module. Arrays are row-major
numpy float32/float64. Gradients are recorded on an explicit :class:`Tape`;
with no tape active, ops run forward-only (inference mode).

A tape and the tensors recorded on it belong to one thread; independent
model instances with independent tapes may run concurrently.
"""

from __future__ import annotations

import math
import os
import threading

import numpy as np
from scipy.special import erf

from .errors import NumericsError, ShapeError, TapeError

FLOAT_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# When enabled every op asserts its output is finite (debug builds).
_debug_checks = os.environ.get("MMASR_DEBUG", "") not in ("", "0")

_state = threading.local()


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf assertions (slow; meant for tests)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """Dense row-major array of f32 or f64 values."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class Parameter:
    """Named, component-tagged model weight.

    ``component`` groups parameters for selective transfer and freezing:
    one of {audio_encoder, visual_encoder, fusion, decoder}.
    """

    COMPONENTS = ("audio_encoder", "visual_encoder", "fusion", "decoder")

    __slots__ = ("name", "tensor", "component")

    def __init__(self, name: str, value, component: str, trainable: bool = True):
        if component not in self.COMPONENTS:
            raise ValueError(f"unknown component tag {component!r} for parameter {name!r}")
        self.name = name
        self.tensor = Tensor(value, requires_grad=trainable)
        self.component = component

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.tensor.requires_grad = bool(flag)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        if value.shape != self.tensor.data.shape:
            raise ShapeError(
                f"parameter {self.name}: cannot assign shape {value.shape} "
                f"over {self.tensor.data.shape}"
            )
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, component={self.component})"


class Tape:
    """Ordered record of executed ops for one forward pass.

    Usable as a context manager; ops executed inside the block record the
    backward rules needed by :meth:`backward`. One backward per forward:
    calling :meth:`backward` twice raises :class:`TapeError`.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, object]] = []
        self._params: dict[int, Parameter] = {}
        self._spent = False

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise TapeError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.tape = None

    def _watch(self, param: Parameter) -> None:
        self._params[id(param.tensor)] = param

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        """Propagate d(loss)/d(x) back through the recorded ops.

        Returns gradients keyed by parameter name for every trainable
        parameter reachable from ``loss``; frozen or unreachable
        parameters get no entry.
        """
        if self._spent:
            raise TapeError("backward already ran on this tape; rerun the forward pass")
        self._spent = True
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._nodes):
            gout = grads.pop(id(out), None)
            if gout is None:
                continue
            for tin, gin in zip(inputs, backward_fn(gout)):
                if gin is None or not tin.requires_grad:
                    continue
                acc = grads.get(id(tin))
                grads[id(tin)] = gin if acc is None else acc + gin

        result: dict[str, Tensor] = {}
        for tid, param in self._params.items():
            g = grads.get(tid)
            if g is not None and param.trainable:
                result[param.name] = Tensor(g)
        return result


def _active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Parameter):
        tape = _active_tape()
        if tape is not None:
            tape._watch(x)
        return x.tensor
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _finish(op_name: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NumericsError(f"{op_name} produced non-finite values")
    tape = _active_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape._nodes.append((out, inputs, backward_fn))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product. 2-D operands, or 3-D with equal leading batch extent."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    ok = (
        ad.ndim in (2, 3)
        and bd.ndim == ad.ndim
        and ad.shape[-1] == bd.shape[-2]
        and (ad.ndim == 2 or ad.shape[0] == bd.shape[0])
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} x {bd.shape}")
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return ga, gb

    return _finish("matmul", out, (a, b), backward)


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...], op: str) -> None:
    # Equal shapes, or equal rank with singleton axes broadcasting.
    if sa == sb:
        return
    if len(sa) != len(sb) or any(x != y and x != 1 and y != 1 for x, y in zip(sa, sb)):
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _finish("mul", out, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = a.data * s

    def backward(g):
        return (g * s,)

    return _finish("scale", out, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def backward(g):
        return (g * mask,)

    return _finish("relu", out, (a,), backward)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _finish("gelu", out, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _finish("tanh", out, (a,), backward)


# ---------------------------------------------------------------------------
# normalization and attention pieces


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _finish("softmax", out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _finish("log_softmax", out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},) "
            f"for input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gg = g * gain.data
        gx = inv * (
            gg
            - gg.mean(axis=-1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _finish("layer_norm", out, (x, gain, bias), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other extents must match exactly."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    ndim = ts[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} invalid for rank {ndim}")
    axis = axis % ndim
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != ndim or any(
            i != axis and other[i] != ref[i] for i in range(ndim)
        ):
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {ts[0].shape} on axis {axis}"
            )
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(ts)):
            idx = [slice(None)] * ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _finish("concat", out, tuple(ts), backward)


def slice_axis(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"slice_axis: [{start}, {start + length}) out of range for "
            f"axis {axis} of shape {x.shape}"
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _finish("slice_axis", out, (x,), backward)


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = _as_tensor(x)
    perm = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    out = np.transpose(x.data, perm).copy()
    inv = np.argsort(perm)

    def backward(g):
        return (np.transpose(g, inv),)

    return _finish("transpose", out, (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape).copy()

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _finish("reshape", out, (x,), backward)


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (V x d) by integer id."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range 0..{table.shape[0] - 1}: "
            f"min {ids.min()}, max {ids.max()}"
        )
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _finish("embedding", out, (table,), backward)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=True),)

    return _finish("sum_all", out, (x,), backward)


def mean_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.data.shape).astype(x.dtype, copy=True),)

    return _finish("mean_axis", out, (x,), backward)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identical mask reused in backward."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return _finish("dropout", out, (x,), backward)


def cross_entropy(logits, targets, label_smoothing: float = 0.0, pad_id: int | None = None) -> Tensor:
    """Mean smoothed negative log-likelihood over non-pad positions.

    ``logits`` is T x V; ``targets`` a length-T integer sequence. The
    smoothed target distribution is (1-s)*onehot + s/V uniform.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    n_pos, vocab = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(
            f"cross_entropy: target id out of range 0..{vocab - 1}"
        )
    s = float(label_smoothing)
    if not 0.0 <= s < 1.0:
        raise ValueError(f"label_smoothing must be in [0, 1), got {s}")

    valid = np.ones(n_pos, dtype=bool) if pad_id is None else targets != pad_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no non-pad target positions")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    nll = -(1.0 - s) * logp[np.arange(n_pos), targets] - (s / vocab) * logp.sum(axis=1)
    out = np.asarray(nll[valid].sum() / n_valid, dtype=logits.dtype)

    def backward(g):
        q = np.full((n_pos, vocab), s / vocab, dtype=logits.dtype)
        q[np.arange(n_pos), targets] += 1.0 - s
        gl = (np.exp(logp) - q) * (g / n_valid)
        gl[~valid] = 0.0
        return (gl.astype(logits.dtype, copy=False),)

    return _finish("cross_entropy", out, (logits,), backward)


# ---------------------------------------------------------------------------
# convolution (im2col-backed)


def _conv_out_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv1d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over the last axis. x: (C_in, T); w: (C_out, C_in, K); b: (C_out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv1d: x {x.shape} vs w {w.shape}")
    c_in, t = x.shape
    c_out, _, k = w.shape
    if b.shape != (c_out,):
        raise ShapeError(f"conv1d: bias {b.shape} must be ({c_out},)")
    t_out = _conv_out_len(t, k, stride, padding)
    if t_out <= 0:
        raise ShapeError(f"conv1d: input length {t} too short for kernel {k}")

    xp = np.pad(x.data, ((0, 0), (padding, padding)))
    cols = np.empty((c_in, k, t_out), dtype=x.dtype)
    for j in range(k):
        cols[:, j, :] = xp[:, j : j + stride * t_out : stride]
    cols2 = cols.reshape(c_in * k, t_out)
    w2 = w.data.reshape(c_out, c_in * k)
    out = w2 @ cols2 + b.data[:, None]

    def backward(g):
        gw = (g @ cols2.T).reshape(w.shape)
        gb = g.sum(axis=1)
        gcols = (w2.T @ g).reshape(c_in, k, t_out)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j : j + stride * t_out : stride] += gcols[:, j, :]
        gx = gxp[:, padding : padding + t] if padding else gxp
        return gx, gw, gb

    return _finish("conv1d", out, (x, w, b), backward)


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution. x: (C_in, H, W); w: (C_out, C_in, KH, KW); b: (C_out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape} vs w {w.shape}")
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {b.shape} must be ({c_out},)")
    h_out = _conv_out_len(h, kh, stride, padding)
    w_out = _conv_out_len(wd, kw, stride, padding)
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c_in, kh, kw, h_out, w_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    cols2 = cols.reshape(c_in * kh * kw, h_out * w_out)
    w2 = w.data.reshape(c_out, c_in * kh * kw)
    out = (w2 @ cols2 + b.data[:, None]).reshape(c_out, h_out, w_out)

    def backward(g):
        g2 = g.reshape(c_out, h_out * w_out)
        gw = (g2 @ cols2.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        gcols = (w2.T @ g2).reshape(c_in, kh, kw, h_out, w_out)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += gcols[:, i, j]
        gx = gxp[:, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw, gb

    return _finish("conv2d", out, (x, w, b), backward)
