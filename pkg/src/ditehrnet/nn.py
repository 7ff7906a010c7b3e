"""Parameter containers, basic layers and the static cost recorder.

A :class:`Module` owns named parameter arrays and child modules.  Two things
can be done with one: run it (``forward``) on arrays or autograd values, and
trace it (``trace``) on shapes, which records a :class:`LayerNode` per
primitive into a :class:`Recorder` without touching any data.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .tensor import ConvSpec, DEFAULT_DTYPE

Shape = tuple[int, int, int, int]


@dataclass
class LayerNode:
    """One primitive in the traced graph with its cost terms.

    ``macs`` covers convolutions, fully connected layers and matrix products
    (one multiply-add each); ``dka`` the kernel-attention overhead;
    ``elementwise`` pooling, resampling, gating products and sums (one per
    element); ``norm_act`` normalisation and activation (one per element).
    """

    name: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    params: int = 0
    macs: int = 0
    dka: int = 0
    elementwise: int = 0
    norm_act: int = 0
    tags: dict = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return self.macs + self.dka + self.elementwise

    @property
    def flops_with_norm_act(self) -> int:
        return self.flops + self.norm_act


class Recorder:
    def __init__(self):
        self.nodes: list[LayerNode] = []
        self._scopes: list[tuple[str, dict]] = []

    @contextlib.contextmanager
    def scope(self, name: str, **tags):
        self._scopes.append((name, tags))
        try:
            yield self
        finally:
            self._scopes.pop()

    def add(self, local: str, kind: str, in_shape, out_shape, **costs) -> LayerNode:
        tags: dict = {}
        for _, t in self._scopes:
            tags.update(t)
        name = "/".join([s for s, _ in self._scopes] + [local])
        node = LayerNode(name, kind, tuple(in_shape), tuple(out_shape), tags=tags, **costs)
        self.nodes.append(node)
        return node


def numel(shape) -> int:
    return int(np.prod(shape))


class Module:
    """Base class: named parameters, buffers and children, in creation order."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def __setattr__(self, name, val):
        if isinstance(val, Module) and "_children" in self.__dict__:
            self._children[name] = val
        object.__setattr__(self, name, val)

    def add_param(self, name: str, arr: np.ndarray) -> np.ndarray:
        self._params[name] = arr
        return arr

    def add_child(self, name: str, mod: "Module") -> "Module":
        self._children[name] = mod
        object.__setattr__(self, name, mod)
        return mod

    def param(self, name: str):
        """The named parameter, or its tape leaf when a tape is watching it."""
        tape = ag.current_tape()
        if tape is not None:
            v = tape.bound(self, name)
            if v is not None:
                return v
        return self._params[name]

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._children.items())

    def parameter_slots(self, prefix: str = ""):
        for pname, arr in self._params.items():
            yield self, pname, prefix + pname, arr
        for cname, child in self._children.items():
            yield from child.parameter_slots(f"{prefix}{cname}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for _, _, full, arr in self.parameter_slots(prefix):
            yield full, arr

    def num_parameters(self) -> int:
        return sum(int(a.size) for _, a in self.named_parameters())

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        slots = {full: (owner, pname) for owner, pname, full, _ in self.parameter_slots()}
        missing = set(slots) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for full, arr in values.items():
            if full not in slots:
                raise KeyError(f"unexpected parameter {full!r}")
            owner, pname = slots[full]
            if owner._params[pname].shape != np.shape(arr):
                raise ValueError(f"{full}: shape {np.shape(arr)} != {owner._params[pname].shape}")
            owner._params[pname] = np.asarray(arr, dtype=owner._params[pname].dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def trace(self, rec: Recorder, shape):
        raise NotImplementedError


def gradcheck_module(module: Module, run, inputs: dict[str, np.ndarray], **kwargs):
    """Finite-difference check of ``run(inputs)`` w.r.t. inputs and all parameters.

    ``run`` receives the input dict and must return a scalar.  Parameter
    names are prefixed with ``p.`` to keep them apart from inputs.
    """
    slots = [(owner, pname, "p." + full) for owner, pname, full, _ in module.parameter_slots()]
    params = {full: owner._params[pname] for owner, pname, full in slots}
    params.update(inputs)

    def f(vals):
        tape = ag.current_tape()
        saved = []
        for owner, pname, full in slots:
            v = vals[full]
            if isinstance(v, ag.Var):
                tape.bind(owner, pname, v)
            else:
                saved.append((owner, pname, owner._params[pname]))
                owner._params[pname] = v
        try:
            return run({k: vals[k] for k in inputs})
        finally:
            for owner, pname, arr in saved:
                owner._params[pname] = arr

    return ag.finite_diff_check(f, params, **kwargs)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = False,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
        self.add_param("weight", he_normal(rng, spec.weight_shape, fan_in, dtype))
        self.has_bias = bias
        if bias:
            self.add_param("bias", np.zeros(spec.out_channels, dtype=dtype))

    def forward(self, x):
        return ag.conv2d(x, self.param("weight"), self.spec,
                         self.param("bias") if self.has_bias else None)

    def out_shape(self, shape: Shape) -> Shape:
        ho, wo = self.spec.output_size(shape[2], shape[3])
        return (shape[0], self.spec.out_channels, ho, wo)

    def trace(self, rec: Recorder, shape: Shape, name: str = "conv") -> Shape:
        out = self.out_shape(shape)
        s = self.spec
        kind = "conv_dw" if s.depthwise else ("conv1x1" if s.kernel == (1, 1) else "conv")
        params = numel(s.weight_shape) + (s.out_channels if self.has_bias else 0)
        # a bias add is folded into the multiply-add count
        rec.add(name, kind, shape, out, params=params, macs=shape[0] * s.macs(out[2], out[3]))
        return out


class BatchNorm2d(Module):
    """Inference-mode batch norm; scale/shift learnable, running stats buffers."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.add_param("scale", np.ones(channels, dtype=dtype))
        self.add_param("shift", np.zeros(channels, dtype=dtype))
        self._buffers["mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["var"] = np.ones(channels, dtype=dtype)

    def forward(self, x):
        return ag.batchnorm(x, self.param("scale"), self.param("shift"),
                            self._buffers["mean"], self._buffers["var"], self.eps)

    def trace(self, rec: Recorder, shape: Shape, name: str = "bn") -> Shape:
        rec.add(name, "batchnorm", shape, shape, params=2 * self.channels, norm_act=numel(shape))
        return shape


def trace_act(rec: Recorder, shape, kind: str = "relu", name: str | None = None):
    rec.add(name or kind, kind, shape, shape, norm_act=numel(shape))
    return shape


def trace_elementwise(rec: Recorder, name: str, kind: str, in_shape, out_shape, count: int | None = None):
    rec.add(name, kind, in_shape, out_shape, elementwise=numel(out_shape) if count is None else count)
    return out_shape


class ConvBN(Module):
    """Convolution, batch norm and an optional ReLU."""

    def __init__(self, spec: ConvSpec, rng, relu: bool = False, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv = Conv2d(spec, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(spec.out_channels, dtype=dtype)
        self.relu = relu

    @property
    def spec(self) -> ConvSpec:
        return self.conv.spec

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ag.relu(y) if self.relu else y

    def trace(self, rec: Recorder, shape: Shape) -> Shape:
        out = self.conv.trace(rec, shape)
        self.bn.trace(rec, out)
        if self.relu:
            trace_act(rec, out)
        return out


def conv_spec(cin: int, cout: int, k: int = 1, stride: int = 1, depthwise: bool = False) -> ConvSpec:
    return ConvSpec(cin, cout, (k, k), stride, k // 2, cin if depthwise else 1)
