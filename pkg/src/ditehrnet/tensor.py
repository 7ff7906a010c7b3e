"""Dense NCHW tensor primitives.

Every higher-level operator in the package is composed from the functions in
this module.  Tensors are plain ``numpy.ndarray`` objects in batch, channel,
height, width order; the functions never mutate their inputs.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

# Finite-value assertions on op outputs; off unless requested.
DEBUG = os.environ.get("DITEHRNET_DEBUG", "") not in ("", "0")

_DIMS = ("batch", "channels", "height", "width")


class ShapeError(ValueError):
    """Raised when tensor shapes do not conform; ``dim`` names the culprit."""

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return out


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate (and optionally cast) a 4-D NCHW array."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D NCHW tensor, got shape {arr.shape}")
    for name, d in zip(_DIMS, arr.shape):
        if d < 1:
            raise ShapeError(f"{name} must be >= 1, got {d}", dim=name)
    return arr


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        else:
            object.__setattr__(self, "kernel", tuple(self.kernel))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ValueError(f"channel counts and groups must be positive: {self}")
        if self.in_channels % self.groups:
            raise ShapeError(
                f"in_channels={self.in_channels} not divisible by groups={self.groups}",
                dim="channels")
        if self.out_channels % self.groups:
            raise ShapeError(
                f"out_channels={self.out_channels} not divisible by groups={self.groups}",
                dim="channels")
        if self.stride < 1 or self.padding < 0 or min(self.kernel) < 1:
            raise ValueError(f"invalid stride/padding/kernel: {self}")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.kernel
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}", dim="height" if ho < 1 else "width")
        return ho, wo

    def macs(self, h_out: int, w_out: int) -> int:
        kh, kw = self.kernel
        return h_out * w_out * self.out_channels * (self.in_channels // self.groups) * kh * kw


def _check_conv(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> None:
    x = as_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, spec expects {spec.in_channels}", dim="channels")
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {tuple(w.shape)} != expected {spec.weight_shape}",
                         dim="weight")
    spec.output_size(x.shape[2], x.shape[3])


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv_windows(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Strided patch view of shape (B, G, Cin/G, Ho, Wo, kh, kw)."""
    b, c, h, w = x.shape
    kh, kw = spec.kernel
    ho, wo = spec.output_size(h, w)
    xp = _pad(x, spec.padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    s = spec.stride
    win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    g = spec.groups
    return win.reshape(b, g, c // g, ho, wo, kh, kw)


def conv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec, bias: np.ndarray | None = None) -> np.ndarray:
    """Grouped 2-D cross-correlation, NCHW input, OIHW weight."""
    _check_conv(x, w, spec)
    b = x.shape[0]
    g = spec.groups
    cout = spec.out_channels
    kh, kw = spec.kernel
    if (kh, kw) == (1, 1) and spec.stride == 1 and spec.padding == 0 and g == 1:
        out = np.einsum("oc,bchw->bohw", w[:, :, 0, 0], x, optimize=True)
    else:
        win = conv_windows(x, spec)
        wg = w.reshape(g, cout // g, spec.in_channels // g, kh, kw)
        if spec.in_channels // g == 1 and cout // g == 1:
            out = np.einsum("bghwij,gij->bghw", win[:, :, 0], wg[:, 0, 0], optimize=True)
        else:
            out = np.einsum("bgchwij,gocij->bgohw", win, wg, optimize=True)
        out = out.reshape(b, cout, *out.shape[-2:])
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return _check_finite(np.ascontiguousarray(out), "conv2d")


def naive_conv_oracle(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Literal nested-loop grouped convolution, used only as a reference."""
    _check_conv(x, w, spec)
    b, cin, h, wd = x.shape
    kh, kw = spec.kernel
    ho, wo = spec.output_size(h, wd)
    cin_g = cin // spec.groups
    cout_g = spec.out_channels // spec.groups
    p, s = spec.padding, spec.stride
    out = np.zeros((b, spec.out_channels, ho, wo), dtype=np.result_type(x, w))
    for n in range(b):
        for o in range(spec.out_channels):
            grp = o // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin_g):
                        ci = grp * cin_g + c
                        for u in range(kh):
                            for v in range(kw):
                                r = i * s + u - p
                                q = j * s + v - p
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[n, ci, r, q] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def channel_split(x: np.ndarray, parts: int | Sequence[int]) -> list[np.ndarray]:
    """Split along channels into ``parts`` equal chunks, or explicit sizes."""
    c = x.shape[1]
    if isinstance(parts, int):
        if parts < 1 or c % parts:
            raise ShapeError(f"cannot split {c} channels into {parts} equal parts", dim="channels")
        sizes = [c // parts] * parts
    else:
        sizes = list(parts)
        if sum(sizes) != c or min(sizes) < 1:
            raise ShapeError(f"split sizes {sizes} do not partition {c} channels", dim="channels")
    bounds = np.cumsum([0] + sizes)
    return [x[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes))]


def channel_concat(xs: Sequence[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ShapeError("nothing to concatenate")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate {ref} with {t.shape}", dim="height")
    return np.concatenate(xs, axis=1)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Source channel index for each output channel of ``channel_shuffle``."""
    if groups < 1 or channels % groups:
        raise ShapeError(f"{channels} channels not divisible by {groups} groups", dim="channels")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"{c} channels not divisible by {groups} groups", dim="channels")
    y = x.reshape(b, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(y.reshape(b, c, h, w))


def pool_bins(n_in: int, n_out: int) -> list[tuple[int, int]]:
    """Contiguous adaptive-pooling bins ``[floor(i*n/m), ceil((i+1)*n/m))``."""
    if not 1 <= n_out <= n_in:
        raise ShapeError(f"cannot pool {n_in} -> {n_out}", dim="height")
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i, (lo, hi) in enumerate(pool_bins(n_in, n_out)):
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: np.ndarray, out: tuple[int, int]) -> np.ndarray:
    _, _, h, w = as_tensor(x).shape
    oh, ow = out
    if oh > h:
        raise ShapeError(f"output height {oh} exceeds input height {h}", dim="height")
    if ow > w:
        raise ShapeError(f"output width {ow} exceeds input width {w}", dim="width")
    if h % oh == 0 and w % ow == 0:
        y = x.reshape(x.shape[0], x.shape[1], oh, h // oh, ow, w // ow).mean(axis=(3, 5))
        return y.astype(x.dtype, copy=False)
    ph = pool_matrix(h, oh, x.dtype)
    pw = pool_matrix(w, ow, x.dtype)
    return np.einsum("ih,bchw,jw->bcij", ph, x, pw, optimize=True)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel-centre linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for j in range(n_out):
        src = max((j + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[j, lo] += 1.0 - frac
        m[j, hi] += frac
    return m


def bilinear_upsample(x: np.ndarray, out: tuple[int, int]) -> np.ndarray:
    _, _, h, w = as_tensor(x).shape
    oh, ow = out
    if oh < h:
        raise ShapeError(f"target height {oh} < input height {h}; use pooling", dim="height")
    if ow < w:
        raise ShapeError(f"target width {ow} < input width {w}; use pooling", dim="width")
    if (oh, ow) == (h, w):
        return x.copy()
    mh = interp_matrix(h, oh, x.dtype)
    mw = interp_matrix(w, ow, x.dtype)
    return np.einsum("ih,bchw,jw->bcij", mh, x, mw, optimize=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def softmax(x: np.ndarray, axis: int | tuple[int, ...] = -1) -> np.ndarray:
    x = np.asarray(x)
    axes = axis if isinstance(axis, tuple) else (axis,)
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise ShapeError(f"axis {a} out of range for {x.ndim}-D input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``weight @ x + bias`` for a vector, or row-wise for a (batch, in) matrix."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input length {x.shape[-1]} != weight columns {weight.shape[1]}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def batchnorm_inference(x, scale, shift, mean, var, eps: float = 1e-5) -> np.ndarray:
    var = np.asarray(var)
    if np.any(var < 0):
        raise ValueError("batchnorm variance must be non-negative")
    c = x.shape[1]
    for name, v in (("scale", scale), ("shift", shift), ("mean", mean), ("var", var)):
        if np.shape(v) != (c,):
            raise ShapeError(f"{name} has shape {np.shape(v)}, expected ({c},)", dim="channels")
    k = (np.asarray(scale) / np.sqrt(var + eps)).reshape(1, c, 1, 1)
    y = (x - np.asarray(mean).reshape(1, c, 1, 1)) * k + np.asarray(shift).reshape(1, c, 1, 1)
    return _check_finite(y.astype(np.result_type(x, scale), copy=False), "batchnorm")


# -- fixture files -----------------------------------------------------------
# Layout: four little-endian uint32 dims (N, C, H, W), then the raw
# little-endian elements in row-major order.  Element width (float32 or
# float64) follows from the file size.

def save_fixture(path: str | os.PathLike, x: np.ndarray) -> None:
    x = as_tensor(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    dt = "<f4" if x.dtype == np.float32 else "<f8"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", *x.shape))
        fh.write(np.ascontiguousarray(x, dtype=dt).tobytes())


def load_fixture(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated fixture header")
    shape = struct.unpack("<4I", raw[:16])
    n = int(np.prod(shape))
    body = len(raw) - 16
    if n == 0 or body not in (4 * n, 8 * n):
        raise ValueError(f"{path}: {body} data bytes do not match shape {shape}")
    dt = "<f4" if body == 4 * n else "<f8"
    return np.frombuffer(raw, dtype=dt, offset=16).reshape(shape).astype(dt[1:])
