"""Dense rank-4 tensors (batch, channel, height, width) with a reverse-mode tape.

Every op has a hand-written forward and vector-Jacobian backward; correctness
is established by central-difference checks (see grad_check). Compute is
float32 by default and float64 in gradient-check mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import config


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message carries both shapes."""


class NumericError(ArithmeticError):
    """Raised in checked mode when an op produces NaN or Inf."""


class OpNode:
    """Tape record: op-kind tag, input tensors, and a vjp closure over the
    activations saved by forward."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor4:
    """Rank-4 array with an optional gradient buffer and tape node."""

    __slots__ = ("data", "grad", "node")

    def __init__(self, data, node: Optional[OpNode] = None):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 requires 4 dims, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.node = node

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        """Reverse-topological tape replay; each node is visited once."""
        topo: list[Tensor4] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for t in reversed(topo):
            if t.node is None or t.grad is None:
                continue
            grads = t.node.vjp(t.grad)
            for p, g in zip(t.node.parents, grads):
                if g is None:
                    continue
                if p.grad is None:
                    p.grad = g.astype(p.data.dtype, copy=False)
                else:
                    p.grad = p.grad + g

    def __repr__(self):
        return f"Tensor4(dims={self.dims}, dtype={self.data.dtype.name})"


def make_op(out_data: np.ndarray, op: str, parents: Sequence[Tensor4],
            vjp: Callable) -> Tensor4:
    """Wrap an op result, scanning for non-finite values in checked mode and
    recording a tape node when gradients are enabled."""
    if config.checked_mode() and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    node = OpNode(op, tuple(parents), vjp) if config.grad_enabled() else None
    return Tensor4(out_data, node)


@dataclass
class ConvWeights:
    """k x k convolution kernel (c_out, c_in, k, k) plus bias (1, c_out, 1, 1)."""

    kernel: Tensor4
    bias: Tensor4

    def __post_init__(self):
        co, ci, k, k2 = self.kernel.dims
        if k != k2 or k % 2 == 0:
            raise ShapeError(f"kernel must be square with odd k, got {self.kernel.dims}")
        if self.bias.dims != (1, co, 1, 1):
            raise ShapeError(
                f"bias dims {self.bias.dims} do not match kernel c_out {co}")

    @property
    def c_in(self):
        return self.kernel.dims[1]

    @property
    def c_out(self):
        return self.kernel.dims[0]

    @property
    def k(self):
        return self.kernel.dims[2]

    @classmethod
    def create(cls, c_out: int, c_in: int, k: int, rng: np.random.Generator,
               dtype=np.float32) -> "ConvWeights":
        # Uniform +-sqrt(6 / fan_in), biases 0.
        fan_in = c_in * k * k
        bound = np.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
        bias = np.zeros((1, c_out, 1, 1), dtype=dtype)
        return cls(Tensor4(kernel), Tensor4(bias))


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride,
                                  j:j + stride * wo:stride]
    return cols, ho, wo


def conv(x: Tensor4, w: ConvWeights, stride: int = 1, pad: Optional[int] = None) -> Tensor4:
    """2-D convolution, k in {1, 3}, stride in {1, 2}, same-style padding."""
    k = w.k
    if pad is None:
        pad = (k - 1) // 2
    if pad != (k - 1) // 2:
        raise ShapeError(f"pad must be (k-1)/2 = {(k - 1) // 2}, got {pad}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if x.dims[1] != w.c_in:
        raise ShapeError(
            f"conv channel mismatch: input {x.dims} vs kernel {w.kernel.dims}")
    kern = w.kernel.data
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    out = np.einsum("ncklhw,ockl->nohw", cols, kern, optimize=True)
    out = out + w.bias.data

    n, c, h, wdt = x.dims

    def vjp(gout):
        grad_kernel = np.einsum("nohw,ncklhw->ockl", gout, cols, optimize=True)
        grad_bias = gout.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        # Scatter-add back through the im2col taps.
        gx_pad = np.zeros((n, c, h + 2 * pad, wdt + 2 * pad), dtype=gout.dtype)
        gcols = np.einsum("nohw,ockl->ncklhw", gout, kern, optimize=True)
        for i in range(k):
            for j in range(k):
                gx_pad[:, :, i:i + stride * ho:stride,
                       j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gx_pad[:, :, pad:pad + h, pad:pad + wdt] if pad else gx_pad
        return gx, grad_kernel, grad_bias

    return make_op(out, "conv", (x, w.kernel, w.bias), vjp)


def relu(x: Tensor4) -> Tensor4:
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient at 0 defined as 0

    def vjp(gout):
        return (gout * mask,)

    return make_op(out, "relu", (x,), vjp)


def sigmoid(x: Tensor4) -> Tensor4:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(gout):
        return (gout * out * (1.0 - out),)

    return make_op(out, "sigmoid", (x,), vjp)


def softmax_channels(x: Tensor4) -> Tensor4:
    """Softmax over the channel axis at every (n, h, w) location."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(gout):
        dot = (gout * out).sum(axis=1, keepdims=True)
        return ((gout - dot) * out,)

    return make_op(out, "softmax_channels", (x,), vjp)


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.dims != b.dims:
        raise ShapeError(f"add dims mismatch: {a.dims} vs {b.dims}")
    out = a.data + b.data

    def vjp(gout):
        return gout, gout

    return make_op(out, "add", (a, b), vjp)


def add_const(x: Tensor4, c: np.ndarray) -> Tensor4:
    """x + constant (no gradient to the constant)."""
    out = x.data + np.asarray(c, dtype=x.dtype)
    if out.shape != x.dims:
        raise ShapeError(f"add_const broadcast changed shape: {x.dims} -> {out.shape}")

    def vjp(gout):
        return (gout,)

    return make_op(out, "add_const", (x,), vjp)


def scale(x: Tensor4, s: float) -> Tensor4:
    out = x.data * s

    def vjp(gout):
        return (gout * s,)

    return make_op(out, "scale", (x,), vjp)


def concat_channels(tensors: Sequence[Tensor4]) -> Tensor4:
    if not tensors:
        raise ShapeError("concat_channels requires at least one tensor")
    n, _, h, w = tensors[0].dims
    for t in tensors:
        if (t.dims[0], t.dims[2], t.dims[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels (n,h,w) mismatch: {tensors[0].dims} vs {t.dims}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.dims[1] for t in tensors])[:-1]

    def vjp(gout):
        return tuple(np.split(gout, splits, axis=1))

    return make_op(out, "concat_channels", tuple(tensors), vjp)


def concat_batch(tensors: Sequence[Tensor4]) -> Tensor4:
    if not tensors:
        raise ShapeError("concat_batch requires at least one tensor")
    tail = tensors[0].dims[1:]
    for t in tensors:
        if t.dims[1:] != tail:
            raise ShapeError(
                f"concat_batch (c,h,w) mismatch: {tensors[0].dims} vs {t.dims}")
    out = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum([t.dims[0] for t in tensors])[:-1]

    def vjp(gout):
        return tuple(np.split(gout, splits, axis=0))

    return make_op(out, "concat_batch", tuple(tensors), vjp)


def slice_channels(x: Tensor4, start: int, stop: int) -> Tensor4:
    out = x.data[:, start:stop].copy()

    def vjp(gout):
        g = np.zeros_like(x.data)
        g[:, start:stop] = gout
        return (g,)

    return make_op(out, "slice_channels", (x,), vjp)


def upsample2x_nearest(x: Tensor4) -> Tensor4:
    """Pixel (i, j) fills the 2x2 block (2i..2i+1, 2j..2j+1)."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.dims

    def vjp(gout):
        return (gout.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_op(out, "upsample2x_nearest", (x,), vjp)


def maxpool2x2(x: Tensor4) -> Tensor4:
    n, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 requires even spatial dims, got {x.dims}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(gout):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], gout[..., None], axis=-1)
        return (gflat.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_op(out, "maxpool2x2", (x,), vjp)


def avgpool2x2(x: Tensor4) -> Tensor4:
    n, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x2 requires even spatial dims, got {x.dims}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(gout):
        return (gout.repeat(2, axis=2).repeat(2, axis=3) * 0.25,)

    return make_op(out, "avgpool2x2", (x,), vjp)


def flatten(x: Tensor4) -> Tensor4:
    """(n, c, h, w) -> (n, c*h*w, 1, 1)."""
    n = x.dims[0]
    out = x.data.reshape(n, -1, 1, 1).copy()

    def vjp(gout):
        return (gout.reshape(x.dims),)

    return make_op(out, "flatten", (x,), vjp)


def reshape(x: Tensor4, dims) -> Tensor4:
    dims = tuple(dims)
    if int(np.prod(dims)) != x.data.size or len(dims) != 4:
        raise ShapeError(f"cannot reshape {x.dims} to {dims}")
    out = x.data.reshape(dims).copy()

    def vjp(gout):
        return (gout.reshape(x.dims),)

    return make_op(out, "reshape", (x,), vjp)


def fully_connected(x: Tensor4, w: Tensor4, b: Tensor4) -> Tensor4:
    """x (n, c_in, 1, 1) @ w (c_out, c_in, 1, 1) + b (1, c_out, 1, 1)."""
    n, ci, h, wd = x.dims
    if (h, wd) != (1, 1):
        raise ShapeError(f"fully_connected expects (n, c, 1, 1), got {x.dims}")
    co = w.dims[0]
    if w.dims[1] != ci:
        raise ShapeError(f"fully_connected mismatch: x {x.dims} vs w {w.dims}")
    xm = x.data.reshape(n, ci)
    wm = w.data.reshape(co, ci)
    out = (xm @ wm.T + b.data.reshape(1, co)).reshape(n, co, 1, 1)

    def vjp(gout):
        g = gout.reshape(n, co)
        gx = (g @ wm).reshape(x.dims)
        gw = (g.T @ xm).reshape(w.dims)
        gb = g.sum(axis=0).reshape(b.dims)
        return gx, gw, gb

    return make_op(out, "fully_connected", (x, w, b), vjp)


EPS_NORM = 1e-12


def channel_l2norm_scale(x: Tensor4, gamma: Tensor4) -> Tensor4:
    """Per-location channel L2 normalization with learned per-channel scale."""
    if gamma.dims != (1, x.dims[1], 1, 1):
        raise ShapeError(
            f"gamma dims {gamma.dims} do not match channels of {x.dims}")
    s = (x.data * x.data).sum(axis=1, keepdims=True)
    r = 1.0 / np.sqrt(s + EPS_NORM)
    xn = x.data * r
    out = gamma.data * xn

    def vjp(gout):
        gg = gamma.data
        t = (gout * gg * x.data).sum(axis=1, keepdims=True)
        gx = gg * r * gout - x.data * (r ** 3) * t
        ggamma = (gout * xn).sum(axis=(0, 2, 3)).reshape(gamma.dims)
        return gx, ggamma

    return make_op(out, "channel_l2norm_scale", (x, gamma), vjp)


def index_channels(x: Tensor4, idx: np.ndarray) -> Tensor4:
    """Select one channel per batch item: (n, c, h, w), idx (n,) -> (n, 1, h, w)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.dims[0]
    if idx.shape != (n,):
        raise ShapeError(f"index_channels idx shape {idx.shape} vs batch {n}")
    out = x.data[np.arange(n), idx][:, None]

    def vjp(gout):
        g = np.zeros_like(x.data)
        g[np.arange(n), idx] = gout[:, 0]
        return (g,)

    return make_op(out, "index_channels", (x,), vjp)


def sum_all(x: Tensor4) -> Tensor4:
    out = np.array(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)

    def vjp(gout):
        return (np.full(x.dims, gout.reshape(()), dtype=x.dtype),)

    return make_op(out, "sum_all", (x,), vjp)


def mul_const(x: Tensor4, c: np.ndarray) -> Tensor4:
    """Elementwise x * constant (no gradient to the constant)."""
    c = np.asarray(c, dtype=x.dtype)
    out = x.data * c
    if out.shape != x.dims:
        raise ShapeError(f"mul_const broadcast changed shape: {x.dims} -> {out.shape}")

    def vjp(gout):
        return (gout * c,)

    return make_op(out, "mul_const", (x,), vjp)


def grad_check(fn: Callable[..., Tensor4], inputs: Sequence[Tensor4], *,
               tolerance: float = 1e-4, step: float = 1e-5,
               max_elements: Optional[int] = None,
               rng: Optional[np.random.Generator] = None,
               name: str = "") -> dict:
    """Central-difference check of fn's gradients w.r.t. each input.

    fn maps the inputs to a scalar Tensor4 (1,1,1,1). Inputs must be float64.
    Returns per-input max relative error max_i |g_a - g_n| / max(1, |g_n|)
    and an overall pass flag. max_elements subsamples coordinates (seeded)
    for expensive composites.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.zero_grad()
    out = fn(*inputs)
    if out.data.size != 1:
        raise ShapeError(f"grad_check fn must return a scalar, got {out.dims}")
    out.backward()
    label = name or getattr(fn, "__name__", "op")
    errors = []
    for t in inputs:
        ga = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(ga)):
            raise NumericError(f"non-finite analytic gradient in '{label}'")
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_elements, replace=False)
        max_err = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            with config.no_grad():
                fp = float(fn(*inputs).data.reshape(()))
            flat[i] = orig - step
            with config.no_grad():
                fm = float(fn(*inputs).data.reshape(()))
            flat[i] = orig
            gn = (fp - fm) / (2.0 * step)
            err = abs(ga.reshape(-1)[i] - gn) / max(1.0, abs(gn))
            if err > max_err:
                max_err = err
        errors.append(max_err)
    return {
        "name": label,
        "max_rel_error": errors,
        "worst": max(errors) if errors else 0.0,
        "passed": all(e <= tolerance for e in errors),
        "tolerance": tolerance,
    }
