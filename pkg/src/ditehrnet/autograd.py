"""Tape-based reverse-mode differentiation over the tensor primitives.

Only meant for gradient-checking the network's operators at tiny sizes.  The
functions here accept plain arrays or :class:`Var` values; when no input is a
``Var`` they fall through to the plain numpy implementation, so model code can
be written once and run either way.

>>> with Tape() as tape:
...     x = tape.leaf(np.zeros((1, 1, 2, 2)), "x")
...     loss = sum(sigmoid(x))
>>> backward(tape, loss)["x"].ravel().tolist()
[0.25, 0.25, 0.25, 0.25]
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

_local = threading.local()


def current_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    shape = property(lambda self: self.value.shape)
    dtype = property(lambda self: self.value.dtype)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, item):
        return index(self, item)


@dataclass
class _Node:
    op: str
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's inputs precede it.
    """

    nodes: list[_Node | None] = field(default_factory=list)
    leaves: dict[str, Var] = field(default_factory=dict)
    _bound: dict[tuple[int, str], Var] = field(default_factory=dict)

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def leaf(self, value, name: str | None = None) -> Var:
        name = name or f"leaf{len(self.leaves)}"
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        v = Var(np.asarray(value), self, len(self.nodes), name)
        self.nodes.append(None)
        self.leaves[name] = v
        return v

    def watch(self, module, prefix: str = "") -> dict[str, Var]:
        """Create a leaf for every parameter of ``module`` and bind it."""
        out = {}
        for owner, pname, full, arr in module.parameter_slots(prefix):
            v = self.leaf(arr, full)
            self._bound[(id(owner), pname)] = v
            out[full] = v
        return out

    def bind(self, owner, pname: str, var: Var) -> None:
        self._bound[(id(owner), pname)] = var

    def bound(self, owner, pname: str):
        return self._bound.get((id(owner), pname))

    def record(self, op: str, value: np.ndarray, inputs: Sequence, vjp) -> Var:
        self.nodes.append(_Node(op, tuple(inputs), vjp))
        return Var(value, self, len(self.nodes) - 1)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(inputs) -> Tape | None:
    for x in inputs:
        if isinstance(x, Var):
            return x.tape
    return None


def apply(op: str, out: np.ndarray, inputs: Sequence, vjp) -> "np.ndarray | Var":
    """Record ``out`` as a function of ``inputs`` if any of them is a Var.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return out
    return tape.record(op, out, inputs, vjp)


def backward(tape: Tape, output: Var) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to every leaf of ``tape``."""
    if not isinstance(output, Var) or output.tape is not tape:
        raise ValueError("output was not recorded on this tape")
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
    grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
    for i in range(output.index, -1, -1):
        node = tape.nodes[i]
        g = grads.get(i)
        if node is None or g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not isinstance(inp, Var) or gi is None:
                continue
            gi = np.asarray(gi)
            if inp.index in grads:
                grads[inp.index] = grads[inp.index] + gi
            else:
                grads[inp.index] = gi
        if i != output.index:
            del grads[i]
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(leaf.index)
        out[name] = np.zeros_like(leaf.value) if g is None else g.reshape(leaf.value.shape)
    return out


# -- elementwise ------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return apply("add", av + bv, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return apply("sub", av - bv, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return apply("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def sum(x):  # noqa: A001 - mirrors numpy naming
    xv = value(x)
    return apply("sum", np.asarray(xv.sum()).reshape(()), (x,),
                 lambda g: (np.broadcast_to(g, xv.shape).copy(),))


def relu(x):
    xv = value(x)
    return apply("relu", T.relu(xv), (x,), lambda g: (g * (xv > 0),))


def sigmoid(x):
    xv = value(x)
    s = T.sigmoid(xv)
    return apply("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def softmax(x, axis=-1):
    p = T.softmax(value(x), axis)
    return apply("softmax", p, (x,),
                 lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def reshape(x, shape):
    xv = value(x)
    return apply("reshape", xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def index(x, item):
    xv = value(x)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, item, g)
        return (gx,)

    return apply("index", xv[item], (x,), vjp)


# -- structural ---------------------------------------------------------------

def concat(xs: Sequence, axis: int = 1):
    vals = [value(x) for x in xs]
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    out = T.channel_concat(vals) if axis == 1 else np.concatenate(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(vals)))

    return apply("concat", out, tuple(xs), vjp)


def channel_concat(xs: Sequence):
    return concat(xs, axis=1)


def channel_split(x, parts):
    xv = value(x)
    pieces = T.channel_split(xv, parts)
    if not isinstance(x, Var):
        return pieces
    out = []
    start = 0
    for p in pieces:
        out.append(index(x, (slice(None), slice(start, start + p.shape[1]))))
        start += p.shape[1]
    return out


def channel_shuffle(x, groups: int):
    xv = value(x)
    c = xv.shape[1]
    inv = np.argsort(T.shuffle_permutation(c, groups))
    return apply("channel_shuffle", T.channel_shuffle(xv, groups), (x,),
                 lambda g: (g[:, inv],))


# -- linear maps -----------------------------------------------------------

def conv2d(x, w, spec: T.ConvSpec, bias=None):
    xv, wv = value(x), value(w)
    bv = value(bias) if bias is not None else None
    out = T.conv2d(xv, wv, spec, bv)

    def vjp(g):
        gx = conv2d_input_grad(g, wv, spec, xv.shape) if isinstance(x, Var) else None
        gw = conv2d_weight_grad(g, xv, spec) if isinstance(w, Var) else None
        gb = g.sum(axis=(0, 2, 3)) if isinstance(bias, Var) else None
        return gx, gw, gb

    return apply("conv2d", out, (x, w, bias), vjp)


def conv2d_input_grad(g: np.ndarray, w: np.ndarray, spec: T.ConvSpec, x_shape) -> np.ndarray:
    b, cin, h, wd = x_shape
    grp = spec.groups
    kh, kw = spec.kernel
    s, p = spec.stride, spec.padding
    ho, wo = g.shape[2:]
    gg = g.reshape(b, grp, spec.out_channels // grp, ho, wo)
    wg = w.reshape(grp, spec.out_channels // grp, cin // grp, kh, kw)
    gxp = np.zeros((b, grp, cin // grp, h + 2 * p, wd + 2 * p), dtype=np.result_type(g, w))
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, :, u:u + (ho - 1) * s + 1:s, v:v + (wo - 1) * s + 1:s] += np.einsum(
                "bgohw,goc->bgchw", gg, wg[:, :, :, u, v], optimize=True)
    gxp = gxp.reshape(b, cin, h + 2 * p, wd + 2 * p)
    return gxp[:, :, p:p + h, p:p + wd]


def conv2d_weight_grad(g: np.ndarray, x: np.ndarray, spec: T.ConvSpec) -> np.ndarray:
    grp = spec.groups
    win = T.conv_windows(x, spec)
    b, _, ho, wo = g.shape
    gg = g.reshape(b, grp, spec.out_channels // grp, ho, wo)
    gw = np.einsum("bgohw,bgchwij->gocij", gg, win, optimize=True)
    return gw.reshape(spec.weight_shape)


def resample(x, mh: np.ndarray, mw: np.ndarray, op: str = "resample"):
    """Separable linear map ``y[i, j] = sum_hw mh[i, h] x[h, w] mw[j, w]``."""
    xv = value(x)
    out = np.einsum("ih,bchw,jw->bcij", mh, xv, mw, optimize=True)
    return apply(op, out, (x,),
                 lambda g: (np.einsum("ih,bcij,jw->bchw", mh, g, mw, optimize=True),))


def adaptive_avg_pool(x, out_size):
    xv = value(x)
    if not isinstance(x, Var):
        return T.adaptive_avg_pool(xv, out_size)
    T.adaptive_avg_pool(xv[:1, :1], out_size)  # validates the request
    _, _, h, w = xv.shape
    return resample(x, T.pool_matrix(h, out_size[0], xv.dtype),
                    T.pool_matrix(w, out_size[1], xv.dtype), "adaptive_avg_pool")


def global_avg_pool(x):
    xv = value(x)
    n = xv.shape[2] * xv.shape[3]
    return apply("global_avg_pool", T.global_avg_pool(xv), (x,),
                 lambda g: (np.broadcast_to(g / n, xv.shape).copy(),))


def bilinear_upsample(x, out_size):
    xv = value(x)
    if not isinstance(x, Var):
        return T.bilinear_upsample(xv, out_size)
    T.bilinear_upsample(xv[:1, :1], out_size)  # validates the request
    _, _, h, w = xv.shape
    return resample(x, T.interp_matrix(h, out_size[0], xv.dtype),
                    T.interp_matrix(w, out_size[1], xv.dtype), "bilinear_upsample")


def fully_connected(x, weight, bias=None):
    xv, wv = value(x), value(weight)
    out = T.fully_connected(xv, wv, value(bias) if bias is not None else None)

    def vjp(g):
        g2 = g.reshape(-1, wv.shape[0])
        x2 = xv.reshape(-1, wv.shape[1])
        return ((g @ wv).reshape(xv.shape),
                g2.T @ x2,
                g2.sum(axis=0) if bias is not None else None)

    return apply("fully_connected", out, (x, weight, bias), vjp)


def matmul(a, b):
    av, bv = value(a), value(b)
    return apply("matmul", T.matmul(av, bv), (a, b),
                 lambda g: (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g))


def weighted_sum(weights, bank):
    """``sum_i weights[i] * bank[i]`` over the leading axis."""
    av, bv = value(weights), value(bank)
    if av.shape != bv.shape[:1]:
        raise T.ShapeError(f"{av.shape[0] if av.ndim else av} weights for a bank of {bv.shape[0]}")
    out = np.tensordot(av, bv, axes=(0, 0))
    return apply("weighted_sum", out, (weights, bank),
                 lambda g: (np.tensordot(bv, g, axes=(tuple(range(1, bv.ndim)), tuple(range(g.ndim)))),
                            av.reshape((-1,) + (1,) * g.ndim) * g[None]))


def batchnorm(x, scale, shift, mean, var, eps: float = 1e-5):
    """Inference-mode batch normalisation; running statistics are constants."""
    xv, sv, bv = value(x), value(scale), value(shift)
    mean, var = np.asarray(mean), np.asarray(var)
    out = T.batchnorm_inference(xv, sv, bv, mean, var, eps)
    c = xv.shape[1]
    inv = 1.0 / np.sqrt(var + eps)
    k = (sv * inv).reshape(1, c, 1, 1)
    xhat = (xv - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    return apply("batchnorm", out, (x, scale, shift),
                 lambda g: (g * k, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))))


# -- finite differences ------------------------------------------------------

NEGLIGIBLE = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    finite: bool
    passed: bool


@dataclass
class GradCheckReport:
    results: list[GradCheckResult]
    step: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    def lines(self) -> list[str]:
        return [f"{'ok  ' if r.passed else 'FAIL'} {r.name:<48} rel={r.max_rel_error:.2e} "
                f"n={r.checked}{'' if r.finite else ' NON-FINITE'}" for r in self.results]


def finite_diff_check(f: Callable[[dict], "Var | np.ndarray"], params: dict[str, np.ndarray],
                      step: float = 1e-5, tol: float = 1e-4,
                      max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` receives a dict of parameter values (leaves during the analytic
    pass, perturbed arrays during the numeric pass) and returns a scalar.
    The error for one parameter is ``max|analytic - numeric|`` scaled by the
    larger of the two gradients' max magnitudes.  That scale is floored at
    ``NEGLIGIBLE`` times the largest gradient seen anywhere in the check, so a
    parameter whose true gradient is zero is not judged on round-off alone.
    ``max_entries`` limits the number of (randomly chosen) entries probed per
    parameter.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with Tape() as tape:
        leaves = {k: tape.leaf(v, k) for k, v in params.items()}
        out = f(leaves)
    analytic = backward(tape, out)
    rng = np.random.default_rng(seed)
    probes = []
    for name, p in params.items():
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = np.sort(rng.choice(p.size, max_entries, replace=False))
        num = np.empty(len(flat_idx))
        probe = dict(params)
        for n, i in enumerate(flat_idx):
            q = p.copy()
            q.flat[i] += step
            probe[name] = q
            fp = float(np.asarray(value(f(probe))).reshape(()))
            q.flat[i] -= 2 * step
            fm = float(np.asarray(value(f(probe))).reshape(()))
            num[n] = (fp - fm) / (2 * step)
        probes.append((name, analytic[name].reshape(-1)[flat_idx], num))
    overall = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for _, a, n in probes),
                  default=0.0)
    results = []
    for name, ana, num in probes:
        finite = bool(np.all(np.isfinite(num)) and np.all(np.isfinite(ana)))
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0),
                    NEGLIGIBLE * overall, 1e-12)
        err = float(np.abs(ana - num).max(initial=0.0) / scale) if finite else float("inf")
        results.append(GradCheckResult(name, err, len(ana), finite, finite and err < tol))
    return GradCheckReport(results, step, tol)
