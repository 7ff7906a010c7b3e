"""Dynamic split convolution: multi-kernel split depthwise conv with kernel attention.

The attention network looks at the whole input once (global average pool,
two fully connected layers, sigmoid) and produces N weights.  Each group's
depthwise kernel is the weighted sum of that group's bank of N kernels, and
one convolution per group is executed with the aggregated kernel.  Weights
are sigmoid outputs, so they are not normalised to sum to one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .nn import BatchNorm2d, Module, Recorder, he_normal, numel
from .tensor import ConvSpec, DEFAULT_DTYPE, ShapeError


@dataclass(frozen=True)
class ScsSpec:
    channels: int
    groups: int = 1

    def __post_init__(self):
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if self.channels % self.groups:
            raise ShapeError(f"{self.channels} channels do not split into {self.groups} groups")

    @property
    def kernel_sizes(self) -> list[int]:
        return [2 * i + 1 for i in range(1, self.groups + 1)]

    @property
    def group_channels(self) -> int:
        return self.channels // self.groups

    def conv_specs(self) -> list[ConvSpec]:
        c = self.group_channels
        return [ConvSpec(c, c, (k, k), 1, k // 2, c) for k in self.kernel_sizes]

    @property
    def num_params(self) -> int:
        return sum(self.group_channels * k * k for k in self.kernel_sizes)


@dataclass(frozen=True)
class DkaSpec:
    channels: int
    num_kernels: int = 4
    reduction: int = 4

    def __post_init__(self):
        if self.num_kernels < 1:
            raise ValueError("num_kernels must be >= 1")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @property
    def hidden(self) -> int:
        return max(1, self.channels // self.reduction)

    @property
    def num_params(self) -> int:
        h = self.hidden
        return self.channels * h + h + h * self.num_kernels + self.num_kernels


def dka_overhead_flops(channels: int, height: int, width: int, num_kernels: int) -> int:
    """Cost of kernel attention: pooling plus the two fully connected layers."""
    c = channels
    return height * width * c + c * c // 4 + c * num_kernels // 4


# -- functional forms ---------------------------------------------------------

def dka_attention(x, fc1_w, fc1_b, fc2_w, fc2_b):
    """Per-sample kernel weights ``(B, N)`` in (0, 1)."""
    xv = ag.value(x)
    if np.ndim(xv) != 4:
        raise ShapeError(f"expected a 4-D input, got shape {np.shape(xv)}")
    if xv.shape[1] != np.shape(ag.value(fc1_w))[1]:
        raise ShapeError(f"attention expects {np.shape(ag.value(fc1_w))[1]} channels, got {xv.shape[1]}", dim="channels")
    g = ag.reshape(ag.global_avg_pool(x), (xv.shape[0], xv.shape[1]))
    h = ag.relu(ag.fully_connected(g, fc1_w, fc1_b))
    return ag.sigmoid(ag.fully_connected(h, fc2_w, fc2_b))


def dka_aggregate(bank, a):
    """``sum_i a[i] * bank[i]``: one kernel from a bank of N."""
    return ag.weighted_sum(a, bank)


def scs_forward(x, spec: ScsSpec, weights):
    """Split into groups, depthwise conv with kernel 2i+1 per group, concat, shuffle."""
    xv = ag.value(x)
    if xv.shape[1] != spec.channels:
        raise ShapeError(f"expected {spec.channels} channels, got {xv.shape[1]}", dim="channels")
    if len(weights) != spec.groups:
        raise ValueError(f"need {spec.groups} kernels, got {len(weights)}")
    parts = ag.channel_split(x, spec.groups)
    outs = [ag.conv2d(p, w, cs) for p, w, cs in zip(parts, weights, spec.conv_specs())]
    y = outs[0] if spec.groups == 1 else ag.channel_concat(outs)
    return ag.channel_shuffle(y, spec.groups)


def _per_sample(x, a, build):
    """Run ``build(x_b, a_b)`` per sample and stack along the batch axis."""
    b = ag.value(x).shape[0]
    if b == 1:
        return build(x, ag.index(a, 0))
    return ag.concat([build(ag.index(x, slice(i, i + 1)), ag.index(a, i)) for i in range(b)], axis=0)


def dsc_forward(x, scs: ScsSpec, banks, attention):
    """Dynamic split conv.  ``banks[i]`` has shape (N, C/G, 1, K_i, K_i);
    ``attention`` is (fc1_w, fc1_b, fc2_w, fc2_b), or None for a static
    single-kernel bank."""
    if attention is None:
        return scs_forward(x, scs, [ag.index(bk, 0) for bk in banks])
    a = dka_attention(x, *attention)
    return _per_sample(x, a, lambda xb, ab: scs_forward(xb, scs, [dka_aggregate(bk, ab) for bk in banks]))


# -- modules ------------------------------------------------------------------

class KernelAttention(Module):
    def __init__(self, spec: DkaSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        c, h, n = spec.channels, spec.hidden, spec.num_kernels
        self.add_param("fc1_weight", he_normal(rng, (h, c), c, dtype))
        self.add_param("fc1_bias", np.zeros(h, dtype=dtype))
        self.add_param("fc2_weight", he_normal(rng, (n, h), h, dtype))
        self.add_param("fc2_bias", np.zeros(n, dtype=dtype))

    def args(self):
        return tuple(self.param(k) for k in ("fc1_weight", "fc1_bias", "fc2_weight", "fc2_bias"))

    def forward(self, x):
        return dka_attention(x, *self.args())

    def trace(self, rec: Recorder, shape, name: str = "dka"):
        b, c, h, w = shape
        rec.add(name, "dka_attention", shape, (b, self.spec.num_kernels),
                params=self.spec.num_params,
                dka=b * dka_overhead_flops(c, h, w, self.spec.num_kernels))
        return (b, self.spec.num_kernels)


def _bank(rng, n, spec: ConvSpec, dtype):
    fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
    return he_normal(rng, (n,) + spec.weight_shape, fan_in, dtype)


class DynamicConv(Module):
    """A convolution whose kernel is aggregated from N candidates per input.

    With ``dynamic=False`` the bank holds a single static kernel and no
    attention is built.  ``calls`` counts attention evaluations.
    """

    def __init__(self, spec: ConvSpec, num_kernels: int, rng, dynamic: bool = True,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        self.dynamic = dynamic
        self.num_kernels = num_kernels if dynamic else 1
        self.calls = 0
        self.add_param("bank", _bank(rng, self.num_kernels, spec, dtype))
        if dynamic:
            self.attention = KernelAttention(DkaSpec(spec.in_channels, num_kernels), rng, dtype)

    def forward(self, x):
        bank = self.param("bank")
        if not self.dynamic:
            return ag.conv2d(x, ag.index(bank, 0), self.spec)
        self.calls += 1
        a = self.attention(x)
        return _per_sample(x, a, lambda xb, ab: ag.conv2d(xb, dka_aggregate(bank, ab), self.spec))

    def trace(self, rec: Recorder, shape, name: str = "conv"):
        if self.dynamic:
            self.attention.trace(rec, shape, name + ".dka")
        s = self.spec
        ho, wo = s.output_size(shape[2], shape[3])
        out = (shape[0], s.out_channels, ho, wo)
        kind = "dynconv_dw" if s.depthwise else ("dynconv1x1" if s.kernel == (1, 1) else "dynconv")
        rec.add(name, kind, shape, out, params=self.num_kernels * numel(s.weight_shape),
                macs=shape[0] * s.macs(ho, wo))
        return out


class DynamicSplitConv(Module):
    """Dynamic split convolution followed by batch norm (no activation)."""

    def __init__(self, channels: int, groups: int, num_kernels: int, rng,
                 dynamic: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.scs = ScsSpec(channels, groups)
        self.dynamic = dynamic
        self.num_kernels = num_kernels if dynamic else 1
        self.calls = 0
        for i, cs in enumerate(self.scs.conv_specs()):
            self.add_param(f"bank{i}", _bank(rng, self.num_kernels, cs, dtype))
        if dynamic:
            self.attention = KernelAttention(DkaSpec(channels, num_kernels), rng, dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)

    def banks(self):
        return [self.param(f"bank{i}") for i in range(self.scs.groups)]

    def forward(self, x):
        att = None
        if self.dynamic:
            self.calls += 1
            att = self.attention.args()
        return self.bn(dsc_forward(x, self.scs, self.banks(), att))

    def trace(self, rec: Recorder, shape, name: str = "dsc"):
        b, c, h, w = shape
        if c != self.scs.channels:
            raise ShapeError(f"expected {self.scs.channels} channels, got {c}", dim="channels")
        if self.dynamic:
            self.attention.trace(rec, shape, name + ".dka")
        for i, cs in enumerate(self.scs.conv_specs()):
            part = (b, cs.in_channels, h, w)
            rec.add(f"{name}.g{i}", "dynconv_dw" if self.dynamic else "conv_dw", part, part,
                    params=self.num_kernels * numel(cs.weight_shape), macs=b * cs.macs(h, w))
        self.bn.trace(rec, shape, name + ".bn")
        return shape
