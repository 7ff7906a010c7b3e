"""Network blocks: the stage-level multi-scale context block, the stem block,
multi-scale fusion and branch transitions.

Norm/activation convention everywhere: batch norm after each convolution,
ReLU after pointwise convolutions only.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .acm import DenseContext, GlobalContext
from .dsc import DynamicConv, DynamicSplitConv
from .nn import BatchNorm2d, ConvBN, Module, Recorder, conv_spec, trace_act, trace_elementwise
from .tensor import DEFAULT_DTYPE, ShapeError


def _check_branches(shapes, channels, what: str):
    if len(shapes) != len(channels):
        raise ShapeError(f"{what}: expected {len(channels)} branches, got {len(shapes)}")
    for k, (s, c) in enumerate(zip(shapes, channels)):
        if s[1] != c:
            raise ShapeError(f"{what}: branch {k} has {s[1]} channels, expected {c}", dim="channels")


class DynConvBN(Module):
    """Dynamic convolution, batch norm, optional ReLU."""

    def __init__(self, spec, num_kernels: int, rng, relu: bool = False, dynamic: bool = True,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv = DynamicConv(spec, num_kernels, rng, dynamic=dynamic, dtype=dtype)
        self.bn = BatchNorm2d(spec.out_channels, dtype=dtype)
        self.relu = relu

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ag.relu(y) if self.relu else y

    def trace(self, rec: Recorder, shape, name: str = "conv"):
        out = self.conv.trace(rec, shape, name)
        self.bn.trace(rec, out, name + ".bn")
        if self.relu:
            trace_act(rec, out, "relu", name + ".relu")
        return out


class DmcBlock(Module):
    """Shuffle-style block over all branches of a stage.

    Each branch is split in half.  The active halves of every branch pass
    through dense context modelling together, then each goes through its own
    dynamic split conv and global context.  The passive half is concatenated
    back and the result is shuffled with two groups.

    ``use_acm=False`` drops both context steps and ``use_dsc=False`` swaps the
    dynamic split conv for a plain 3x3 depthwise conv (ablation toggles).
    """

    def __init__(self, channels, groups, kernels, rng, *, use_acm: bool = True,
                 use_dsc: bool = True, static_single_kernel: bool = True, ratio: int = 4,
                 dcm_ratio: int = 16, dtype=DEFAULT_DTYPE):
        super().__init__()
        if not (len(channels) == len(groups) == len(kernels)):
            raise ValueError("channels, groups and kernels need one entry per branch")
        for c in channels:
            if c % 2:
                raise ShapeError(f"branch width {c} is odd and cannot be halved", dim="channels")
        self.channels = list(channels)
        self.active = [c // 2 for c in channels]
        self.use_acm = use_acm
        self.use_dsc = use_dsc
        if use_acm:
            self.dcm = DenseContext(self.active, rng, dcm_ratio, dtype)
        self.dsc = []
        self.gcm = []
        for k, (c, g, n) in enumerate(zip(self.active, groups, kernels)):
            if use_dsc:
                dyn = not (static_single_kernel and n == 1)
                conv = DynamicSplitConv(c, g, n, rng, dynamic=dyn, dtype=dtype)
            else:
                conv = ConvBN(conv_spec(c, c, 3, depthwise=True), rng, dtype=dtype)
            self.dsc.append(self.add_child(f"dsc{k}", conv))
            if use_acm:
                self.gcm.append(self.add_child(f"gcm{k}", GlobalContext(c, rng, ratio, dtype)))

    def forward(self, xs):
        _check_branches([ag.value(x).shape for x in xs], self.channels, "DMC block")
        halves = [ag.channel_split(x, 2) for x in xs]
        act = [h[1] for h in halves]
        if self.use_acm:
            act = self.dcm(act)
        out = []
        for k, (h, a) in enumerate(zip(halves, act)):
            a = self.dsc[k](a)
            if self.use_acm:
                a = self.gcm[k](a)
            out.append(ag.channel_shuffle(ag.channel_concat([h[0], a]), 2))
        return out

    def trace(self, rec: Recorder, shapes, name: str = "dmc"):
        shapes = [tuple(s) for s in shapes]
        _check_branches(shapes, self.channels, "DMC block")
        act = [(s[0], s[1] // 2, s[2], s[3]) for s in shapes]
        with rec.scope(name, block=name):
            if self.use_acm:
                self.dcm.trace(rec, act, "dcm")
            for k, a in enumerate(act):
                with rec.scope(f"b{k}", branch=k):
                    if self.use_dsc:
                        self.dsc[k].trace(rec, a, "dsc")
                    else:
                        with rec.scope("dsc"):
                            self.dsc[k].trace(rec, a)
                    if self.use_acm:
                        self.gcm[k].trace(rec, a, "gcm")
        return shapes


class DgcBlock(Module):
    """Stride-2 stem block with two dynamic-conv paths, each with a global context.

    Path A: strided 3x3 depthwise, context, 1x1.  Path B: 3x3 depthwise,
    context, 1x1, strided 3x3 depthwise.  Every conv draws its kernel from
    kernel attention (unless ``N == 1`` with static single kernels).
    """

    def __init__(self, in_channels: int, out_channels: int, num_kernels: int, rng, *,
                 static_single_kernel: bool = True, ratio: int = 4, dtype=DEFAULT_DTYPE):
        super().__init__()
        if in_channels % 2 or out_channels % 2:
            raise ShapeError("DGC block needs even channel counts", dim="channels")
        self.in_channels, self.out_channels = in_channels, out_channels
        h, o = in_channels // 2, out_channels // 2
        dyn = not (static_single_kernel and num_kernels == 1)

        def dconv(spec, relu=False):
            return DynConvBN(spec, num_kernels, rng, relu=relu, dynamic=dyn, dtype=dtype)

        self.a_dw = dconv(conv_spec(h, h, 3, 2, depthwise=True))
        self.a_gcm = GlobalContext(h, rng, ratio, dtype)
        self.a_pw = dconv(conv_spec(h, o, 1), relu=True)
        self.b_dw = dconv(conv_spec(h, h, 3, 1, depthwise=True))
        self.b_gcm = GlobalContext(h, rng, ratio, dtype)
        self.b_pw = dconv(conv_spec(h, o, 1), relu=True)
        self.b_down = dconv(conv_spec(o, o, 3, 2, depthwise=True))

    def dynamic_convs(self) -> list[DynamicConv]:
        return [m.conv for m in (self.a_dw, self.a_pw, self.b_dw, self.b_pw, self.b_down)]

    def forward(self, x):
        xv = ag.value(x)
        if xv.shape[1] != self.in_channels:
            raise ShapeError(f"DGC block expects {self.in_channels} channels, got {xv.shape[1]}",
                             dim="channels")
        xa, xb = ag.channel_split(x, 2)
        ya = self.a_pw(self.a_gcm(self.a_dw(xa)))
        yb = self.b_down(self.b_pw(self.b_gcm(self.b_dw(xb))))
        if ag.value(ya).shape != ag.value(yb).shape:
            raise ShapeError(f"DGC paths disagree: {ag.value(ya).shape} vs {ag.value(yb).shape}")
        return ag.channel_shuffle(ag.channel_concat([ya, yb]), 2)

    def trace(self, rec: Recorder, shape, name: str = "dgc"):
        b, c, h, w = shape
        half = (b, c // 2, h, w)
        with rec.scope(name, block=name):
            sa = self.a_dw.trace(rec, half, "a.dw")
            sa = self.a_gcm.trace(rec, sa, "a.gcm")
            sa = self.a_pw.trace(rec, sa, "a.pw")
            sb = self.b_dw.trace(rec, half, "b.dw")
            sb = self.b_gcm.trace(rec, sb, "b.gcm")
            sb = self.b_pw.trace(rec, sb, "b.pw")
            sb = self.b_down.trace(rec, sb, "b.down")
        return (b, sa[1] + sb[1], sa[2], sa[3])


class _Sequential(Module):
    def __init__(self, layers):
        super().__init__()
        self.layers = [self.add_child(str(i), m) for i, m in enumerate(layers)]

    def forward(self, x):
        for m in self.layers:
            x = m(x)
        return x

    def trace(self, rec: Recorder, shape, name: str = "seq"):
        with rec.scope(name):
            for i, m in enumerate(self.layers):
                with rec.scope(str(i)):
                    shape = m.trace(rec, shape)
        return shape


def _down_path(cin: int, cout: int, steps: int, rng, dtype) -> _Sequential:
    layers = []
    for k in range(steps):
        last = k == steps - 1
        layers.append(ConvBN(conv_spec(cin, cin, 3, 2, depthwise=True), rng, dtype=dtype))
        layers.append(ConvBN(conv_spec(cin, cout if last else cin, 1), rng, relu=not last, dtype=dtype))
    return _Sequential(layers)


class MultiScaleFusion(Module):
    """Every output branch sums resampled contributions of all input branches.

    Higher-index (lower-resolution) inputs are mapped by 1x1 conv + BN and
    bilinear upsampling; lower-index inputs by repeated strided depthwise and
    pointwise convs, one per halving.  The sum is followed by ReLU.  A single
    branch passes through unchanged.
    """

    def __init__(self, channels, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels = list(channels)
        n = len(channels)
        self.paths: dict[tuple[int, int], Module] = {}
        if n == 1:
            return
        for i in range(n):
            for j in range(n):
                if j > i:
                    m = ConvBN(conv_spec(channels[j], channels[i], 1), rng, dtype=dtype)
                elif j < i:
                    m = _down_path(channels[j], channels[i], i - j, rng, dtype)
                else:
                    continue
                self.paths[(i, j)] = self.add_child(f"p{i}_{j}", m)

    def forward(self, xs):
        _check_branches([ag.value(x).shape for x in xs], self.channels, "fusion")
        n = len(xs)
        if n == 1:
            return list(xs)
        out = []
        for i in range(n):
            size = tuple(ag.value(xs[i]).shape[2:])
            y = None
            for j in range(n):
                if j == i:
                    t = xs[j]
                else:
                    t = self.paths[(i, j)](xs[j])
                    if j > i:
                        t = ag.bilinear_upsample(t, size)
                if ag.value(t).shape != ag.value(xs[i]).shape:
                    raise ShapeError(f"fusion path {j}->{i} gives {ag.value(t).shape}, "
                                     f"expected {ag.value(xs[i]).shape}")
                y = t if y is None else ag.add(y, t)
            out.append(ag.relu(y))
        return out

    def trace(self, rec: Recorder, shapes, name: str = "fuse"):
        shapes = [tuple(s) for s in shapes]
        _check_branches(shapes, self.channels, "fusion")
        n = len(shapes)
        if n == 1:
            return shapes
        with rec.scope(name, block=name):
            for i in range(n):
                with rec.scope(f"to{i}", branch=i):
                    for j in range(n):
                        if j == i:
                            continue
                        m = self.paths[(i, j)]
                        if j > i:
                            with rec.scope(f"from{j}"):
                                t = m.trace(rec, shapes[j])
                            trace_elementwise(rec, f"from{j}.up", "upsample", t, shapes[i])
                        else:
                            m.trace(rec, shapes[j], f"from{j}")
                    trace_elementwise(rec, "sum", "add", shapes[i], shapes[i],
                                      count=(n - 1) * int(np.prod(shapes[i])))
                    trace_act(rec, shapes[i], "relu", "relu")
        return shapes


class Transition(Module):
    """Stage boundary: adapt existing branch widths and append a new branch.

    A width change uses 3x3 depthwise + 1x1; a new branch comes from the last
    existing branch through a strided 3x3 depthwise + 1x1.
    """

    def __init__(self, prev_channels, channels, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        if len(channels) < len(prev_channels):
            raise ValueError("a transition cannot remove branches")
        self.prev = list(prev_channels)
        self.channels = list(channels)
        self.maps: list[Module | None] = []
        for i, c in enumerate(channels):
            if i < len(prev_channels):
                p = prev_channels[i]
                m = None if p == c else _Sequential([
                    ConvBN(conv_spec(p, p, 3, depthwise=True), rng, dtype=dtype),
                    ConvBN(conv_spec(p, c, 1), rng, relu=True, dtype=dtype)])
            else:
                p = prev_channels[-1] if i == len(prev_channels) else channels[i - 1]
                m = _Sequential([
                    ConvBN(conv_spec(p, p, 3, 2, depthwise=True), rng, dtype=dtype),
                    ConvBN(conv_spec(p, c, 1), rng, relu=True, dtype=dtype)])
            self.maps.append(None if m is None else self.add_child(f"t{i}", m))

    def forward(self, xs):
        _check_branches([ag.value(x).shape for x in xs], self.prev, "transition")
        out = []
        for i, m in enumerate(self.maps):
            if i < len(xs):
                out.append(xs[i] if m is None else m(xs[i]))
            else:
                out.append(m(out[-1] if i > len(xs) else xs[-1]))
        return out

    def trace(self, rec: Recorder, shapes, name: str = "transition"):
        shapes = [tuple(s) for s in shapes]
        _check_branches(shapes, self.prev, "transition")
        out = []
        with rec.scope(name, block=name):
            for i, m in enumerate(self.maps):
                with rec.scope(f"b{i}", branch=i):
                    src = shapes[i] if i < len(shapes) else (out[-1] if i > len(shapes) else shapes[-1])
                    out.append(src if m is None else m.trace(rec, src, "map"))
        return out
