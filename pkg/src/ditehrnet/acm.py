"""Adaptive context modelling: pool, shift, weight.

Pooling uses a single-channel 1x1 mask convolution.  The mask logits are
softmaxed within each adaptive-pooling bin, and every output cell is the
mask-weighted sum of the input pixels in its bin.  At output size 1x1 this
is the global-context attention pooling; with a constant mask it is plain
adaptive average pooling.  Each output cell is therefore a convex
combination of input pixels, channel by channel.

The shift is a 1x1 bottleneck (conv, batch norm, ReLU, conv) applied at
every pooled position, and the weight step gates the input with
``sigmoid(context)``, broadcasting or upsampling the context as needed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module, Recorder, numel, trace_act, trace_elementwise
from .tensor import ConvSpec, DEFAULT_DTYPE, ShapeError


@dataclass(frozen=True)
class AcmSpec:
    channels: int
    out_size: tuple[int, int] = (1, 1)
    ratio: int = 4

    def __post_init__(self):
        if self.out_size[0] < 1 or self.out_size[1] < 1:
            raise ValueError(f"pooled size must be positive, got {self.out_size}")
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @property
    def hidden(self) -> int:
        return max(1, self.channels // self.ratio)


def _bins(h: int, w: int, out_size) -> list[tuple[int, int, slice, slice]]:
    oh, ow = out_size
    if oh > h:
        raise ShapeError(f"pooled height {oh} exceeds input height {h}", dim="height")
    if ow > w:
        raise ShapeError(f"pooled width {ow} exceeds input width {w}", dim="width")
    return [(i, j, slice(a, b), slice(c, d))
            for i, (a, b) in enumerate(T.pool_bins(h, oh))
            for j, (c, d) in enumerate(T.pool_bins(w, ow))]


def bin_softmax(logits: np.ndarray, out_size) -> list[np.ndarray]:
    """Per-bin spatial softmax of ``logits`` (B, 1, H, W); one array per bin."""
    _, _, h, w = logits.shape
    return [T.softmax(logits[:, :, hs, ws], axis=(2, 3)) for _, _, hs, ws in _bins(h, w, out_size)]


def masked_pool(x, logits, out_size):
    """``out[b, c, i, j] = sum over bin (i, j) of softmax(logits) * x``."""
    xv, zv = ag.value(x), ag.value(logits)
    b, c, h, w = xv.shape
    if zv.shape != (b, 1, h, w):
        raise ShapeError(f"mask logits {zv.shape} do not match input {xv.shape}")
    bins = _bins(h, w, out_size)
    probs = bin_softmax(zv, out_size)
    out = np.empty((b, c) + tuple(out_size), dtype=np.result_type(xv, zv))
    for (i, j, hs, ws), p in zip(bins, probs):
        out[:, :, i, j] = (p * xv[:, :, hs, ws]).sum(axis=(2, 3))

    def vjp(g):
        gx = np.zeros_like(xv, dtype=out.dtype)
        gz = np.zeros_like(zv, dtype=out.dtype)
        for (i, j, hs, ws), p in zip(bins, probs):
            gij = g[:, :, i, j][:, :, None, None]
            gx[:, :, hs, ws] += p * gij
            # d out_c / d z = p * (x_c - out_c), contracted with g over channels
            s = (gij * xv[:, :, hs, ws]).sum(axis=1, keepdims=True)
            s0 = (g[:, :, i, j] * out[:, :, i, j]).sum(axis=1)[:, None, None, None]
            gz[:, :, hs, ws] += p * (s - s0)
        return gx, gz

    return ag.apply("masked_pool", out, (x, logits), vjp)


def adaptive_context_pool(x, mask_weight, mask_bias, out_size):
    """Attention pooling to ``out_size`` with a 1x1 mask conv (C -> 1)."""
    c = ag.value(x).shape[1]
    z = ag.conv2d(x, mask_weight, ConvSpec(c, 1, (1, 1)), mask_bias)
    return masked_pool(x, z, out_size)


def context_shift(ctx, w1, b1, bn_args, w2, b2):
    """1x1 conv to C/r, batch norm, ReLU, 1x1 conv back to C.

    ``bn_args`` is (scale, shift, mean, var).
    """
    c = ag.value(ctx).shape[1]
    hdim = ag.value(w1).shape[0]
    h = ag.conv2d(ctx, w1, ConvSpec(c, hdim, (1, 1)), b1)
    h = ag.relu(ag.batchnorm(h, *bn_args))
    return ag.conv2d(h, w2, ConvSpec(hdim, c, (1, 1)), b2)


def context_weight(x, ctx):
    """``x * sigmoid(ctx)`` with ``ctx`` broadcast over x."""
    xs, cs = ag.value(x).shape, ag.value(ctx).shape
    try:
        np.broadcast_shapes(xs, cs)
    except ValueError:
        raise ShapeError(f"context {cs} does not broadcast to {xs}") from None
    return ag.mul(x, ag.sigmoid(ctx))


class ContextShift(Module):
    def __init__(self, channels: int, ratio: int, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        hidden = max(1, channels // ratio)
        self.conv1 = Conv2d(ConvSpec(channels, hidden, (1, 1)), rng, bias=True, dtype=dtype)
        self.bn = BatchNorm2d(hidden, dtype=dtype)
        self.conv2 = Conv2d(ConvSpec(hidden, channels, (1, 1)), rng, bias=True, dtype=dtype)

    def forward(self, ctx):
        return self.conv2(ag.relu(self.bn(self.conv1(ctx))))

    def trace(self, rec: Recorder, shape, name: str = "shift"):
        h = self.conv1.trace(rec, shape, name + ".conv1")
        self.bn.trace(rec, h, name + ".bn")
        trace_act(rec, h, "relu", name + ".relu")
        return self.conv2.trace(rec, h, name + ".conv2")


class ContextPool(Module):
    """The mask convolution plus bin-wise softmax pooling."""

    def __init__(self, channels: int, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.mask = Conv2d(ConvSpec(channels, 1, (1, 1)), rng, bias=True, dtype=dtype)

    def forward(self, x, out_size):
        return masked_pool(x, self.mask(x), out_size)

    def trace(self, rec: Recorder, shape, out_size, name: str = "pool"):
        b, c, h, w = shape
        z = self.mask.trace(rec, shape, name + ".mask")
        area = sum((hs.stop - hs.start) * (ws.stop - ws.start) for _, _, hs, ws in _bins(h, w, out_size))
        trace_act(rec, z, "softmax", name + ".softmax")
        out = (b, c) + tuple(out_size)
        rec.add(name + ".matmul", "context_pool", shape, out, macs=b * c * area)
        return out


class GlobalContext(Module):
    """Context modelling with 1x1 pooled context, applied per branch."""

    def __init__(self, channels: int, rng, ratio: int = 4, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = AcmSpec(channels, (1, 1), ratio)
        self.pool = ContextPool(channels, rng, dtype)
        self.shift = ContextShift(channels, ratio, rng, dtype)

    def forward(self, x):
        return context_weight(x, self.shift(self.pool(x, (1, 1))))

    def trace(self, rec: Recorder, shape, name: str = "gcm"):
        ctx = self.pool.trace(rec, shape, (1, 1), name + ".pool")
        self.shift.trace(rec, ctx, name + ".shift")
        trace_act(rec, ctx, "sigmoid", name + ".sigmoid")
        return trace_elementwise(rec, name + ".weight", "context_weight", shape, shape)


def gcm_forward(x, mask_weight, mask_bias, shift_args):
    """Functional global context: ``shift_args`` as for :func:`context_shift`."""
    return context_weight(x, context_shift(adaptive_context_pool(x, mask_weight, mask_bias, (1, 1)),
                                           *shift_args))


class DenseContext(Module):
    """Context modelling across all branches of a stage.

    Branches above the lowest resolution are attention-pooled down to it;
    the lowest branch joins unpooled.  One shift runs on the concatenation,
    the result is split back, upsampled and used to gate each branch.
    """

    def __init__(self, channels: list[int], rng, ratio: int = 4, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels = list(channels)
        self.pools = [self.add_child(f"pool{k}", ContextPool(c, rng, dtype))
                      for k, c in enumerate(self.channels[:-1])]
        self.shift = ContextShift(sum(self.channels), ratio, rng, dtype)

    def _check(self, shapes):
        if len(shapes) != len(self.channels):
            raise ShapeError(f"expected {len(self.channels)} branches, got {len(shapes)}")
        for k, (s, c) in enumerate(zip(shapes, self.channels)):
            if s[1] != c:
                raise ShapeError(f"branch {k}: expected {c} channels, got {s[1]}", dim="channels")
        low = tuple(shapes[-1][2:])
        for k, s in enumerate(shapes[:-1]):
            if s[2] < low[0] or s[3] < low[1]:
                raise ShapeError(f"branch {k} is smaller than the lowest branch")
        return low

    def forward(self, xs):
        low = self._check([ag.value(x).shape for x in xs])
        pooled = [p(x, low) for p, x in zip(self.pools, xs)] + [xs[-1]]
        ctx = self.shift(ag.channel_concat(pooled) if len(xs) > 1 else pooled[0])
        parts = ag.channel_split(ctx, self.channels) if len(xs) > 1 else [ctx]
        out = []
        for x, cpart in zip(xs, parts):
            size = tuple(ag.value(x).shape[2:])
            if size != low:
                cpart = ag.bilinear_upsample(cpart, size)
            out.append(context_weight(x, cpart))
        return out

    def trace(self, rec: Recorder, shapes, name: str = "dcm"):
        low = self._check(shapes)
        pooled = [p.trace(rec, s, low, f"{name}.pool{k}") for k, (p, s) in enumerate(zip(self.pools, shapes))]
        pooled.append(tuple(shapes[-1]))
        cat = (shapes[0][0], sum(self.channels)) + low
        self.shift.trace(rec, cat, name + ".shift")
        for k, s in enumerate(shapes):
            part = (s[0], self.channels[k]) + low
            if tuple(s[2:]) != low:
                trace_elementwise(rec, f"{name}.up{k}", "upsample", part, s)
            trace_act(rec, s, "sigmoid", f"{name}.sigmoid{k}")
            trace_elementwise(rec, f"{name}.weight{k}", "context_weight", s, s)
        return [tuple(s) for s in shapes]


def dcm_forward(xs, mask_args, shift_args):
    """Functional dense context.  ``mask_args[k]`` = (weight, bias) for
    branches 0..n-2; ``shift_args`` as for :func:`context_shift`."""
    low = tuple(ag.value(xs[-1]).shape[2:])
    if len(mask_args) != len(xs) - 1:
        raise ShapeError(f"{len(xs)} branches need {len(xs) - 1} mask convs, got {len(mask_args)}")
    pooled = [adaptive_context_pool(x, w, b, low) for x, (w, b) in zip(xs, mask_args)] + [xs[-1]]
    chans = [ag.value(x).shape[1] for x in xs]
    ctx = context_shift(ag.channel_concat(pooled), *shift_args)
    parts = ag.channel_split(ctx, chans) if len(xs) > 1 else [ctx]
    out = []
    for x, cpart in zip(xs, parts):
        size = tuple(ag.value(x).shape[2:])
        out.append(context_weight(x, cpart if size == low else ag.bilinear_upsample(cpart, size)))
    return out
