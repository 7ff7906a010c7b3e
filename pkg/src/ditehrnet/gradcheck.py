"""Finite-difference checks for the network's building blocks, in double precision.

Each check builds a small seeded instance, projects the output onto a fixed
random tensor to get a scalar, and compares tape gradients against central
differences for the inputs and every parameter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .acm import DenseContext, GlobalContext
from .blocks import DgcBlock, DmcBlock, MultiScaleFusion, Transition
from .dsc import DynamicSplitConv
from .network import ModelConfig, build
from .nn import Module, gradcheck_module

OP_TOL = 1e-4
E2E_TOL = 1e-3


@dataclass
class NamedCheck:
    name: str
    report: ag.GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _projection(rng, shapes):
    return [rng.standard_normal(s) for s in shapes]


def _scalar(outs, weights):
    total = None
    for o, w in zip(outs, weights):
        t = ag.sum(ag.mul(o, w))
        total = t if total is None else ag.add(total, t)
    return total


def check_module(module: Module, inputs: dict[str, np.ndarray], call, seed: int = 0,
                 tol: float = OP_TOL, max_entries: int | None = 12) -> ag.GradCheckReport:
    """Gradient check of ``call(module, inputs)``, which returns a tensor or list."""
    first = call(module, inputs)
    outs = first if isinstance(first, list) else [first]
    weights = _projection(np.random.default_rng(seed + 1), [np.shape(o) for o in outs])

    def run(vals):
        y = call(module, vals)
        return _scalar(y if isinstance(y, list) else [y], weights)

    return gradcheck_module(module, run, inputs, tol=tol, max_entries=max_entries, seed=seed)


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def check_dsc(seed: int = 0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    m = DynamicSplitConv(6, 3, 3, rng, dtype=np.float64)
    return check_module(m, {"x": _rand(rng, 2, 6, 6, 6)}, lambda m, v: m(v["x"]), seed)


def check_gcm(seed: int = 0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    m = GlobalContext(4, rng, dtype=np.float64)
    return check_module(m, {"x": _rand(rng, 1, 4, 6, 6)}, lambda m, v: m(v["x"]), seed)


def check_dcm(seed: int = 0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    m = DenseContext([4, 8], rng, ratio=4, dtype=np.float64)
    inputs = {"x0": _rand(rng, 1, 4, 8, 8), "x1": _rand(rng, 1, 8, 4, 4)}
    return check_module(m, inputs, lambda m, v: m([v["x0"], v["x1"]]), seed)


def check_dgc(seed: int = 0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    m = DgcBlock(4, 4, 2, rng, dtype=np.float64)
    return check_module(m, {"x": _rand(rng, 1, 4, 8, 8)}, lambda m, v: m(v["x"]), seed)


def check_dmc(seed: int = 0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    m = DmcBlock([4, 8], [1, 2], [2, 2], rng, dcm_ratio=4, dtype=np.float64)
    inputs = {"x0": _rand(rng, 1, 4, 8, 8), "x1": _rand(rng, 1, 8, 4, 4)}
    return check_module(m, inputs, lambda m, v: m([v["x0"], v["x1"]]), seed)


def check_fusion(seed: int = 0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    m = MultiScaleFusion([4, 8, 16], rng, dtype=np.float64)
    inputs = {"x0": _rand(rng, 1, 4, 8, 8), "x1": _rand(rng, 1, 8, 4, 4), "x2": _rand(rng, 1, 16, 2, 2)}
    return check_module(m, inputs, lambda m, v: m([v["x0"], v["x1"], v["x2"]]), seed)


def check_transition(seed: int = 0) -> ag.GradCheckReport:
    rng = np.random.default_rng(seed)
    m = Transition([6], [4, 8], rng, dtype=np.float64)
    return check_module(m, {"x": _rand(rng, 1, 6, 8, 8)}, lambda m, v: m([v["x"]]), seed)


def check_end_to_end(seed: int = 0, max_entries: int | None = 4) -> ag.GradCheckReport:
    """Tiny two-stage model (width 4) on a 1x3x32x32 input, through the head."""
    model = build(ModelConfig.tiny(), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    return check_module(model, {"x": _rand(rng, 1, 3, 32, 32)}, lambda m, v: m.heatmaps(v["x"]),
                        seed, tol=E2E_TOL, max_entries=max_entries)


SUITE = {
    "dsc": check_dsc,
    "gcm": check_gcm,
    "dcm": check_dcm,
    "dgc": check_dgc,
    "dmc": check_dmc,
    "fusion": check_fusion,
    "transition": check_transition,
    "end_to_end": check_end_to_end,
}


def run_suite(seed: int = 0, names=None) -> list[NamedCheck]:
    return [NamedCheck(n, SUITE[n](seed)) for n in (names or SUITE)]
