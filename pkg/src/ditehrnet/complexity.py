"""Static parameter and FLOP analysis.

One FLOP is one multiply-add.  The headline total counts convolutions,
fully connected layers and matrix products (as multiply-adds), the kernel
attention overhead, and one op per element for pooling, resampling, gating
products and branch sums.  Normalisation and activations are counted too but
kept out of the headline; :attr:`ComplexityReport.flops_with_norm_act`
includes them.  The keypoint head is part of the headline and is also
itemised on its own.
"""
from __future__ import annotations

import csv
import io
import json
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .dsc import DynamicConv
from .network import DiteHRNet, ModelConfig, build
from .nn import Conv2d, LayerNode, Recorder
from .tensor import ConvSpec

TABLE5_G = ((1, 1, 1, 1), (1, 1, 2, 4), (4, 2, 1, 1), (4, 4, 4, 4))
TABLE5_N = ((1, 1, 1, 1), (4, 4, 2, 1), (1, 2, 4, 4), (4, 4, 4, 4))

_COST_FIELDS = ("params", "macs", "dka", "elementwise", "norm_act")


@dataclass
class ComplexityReport:
    config: dict
    input_size: tuple[int, int]
    nodes: list[LayerNode]
    model_params: int | None = None

    def _total(self, attr: str, nodes=None) -> int:
        return sum(getattr(n, attr) for n in (self.nodes if nodes is None else nodes))

    @property
    def params(self) -> int:
        return self._total("params")

    @property
    def flops(self) -> int:
        return self._total("flops")

    @property
    def flops_with_norm_act(self) -> int:
        return self._total("flops_with_norm_act")

    @property
    def head_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.tags.get("stage") == "head"]

    @property
    def head_flops(self) -> int:
        return self._total("flops", self.head_nodes)

    @property
    def head_params(self) -> int:
        return self._total("params", self.head_nodes)

    @property
    def backbone_flops(self) -> int:
        return self.flops - self.head_flops

    def breakdown(self, key: str) -> "OrderedDict[str, dict]":
        """Totals grouped by a tag: ``stage``, ``branch`` or ``block``."""
        out: OrderedDict[str, dict] = OrderedDict()
        for n in self.nodes:
            k = str(n.tags.get(key, "-"))
            agg = out.setdefault(k, {f: 0 for f in _COST_FIELDS} | {"flops": 0})
            for f in _COST_FIELDS:
                agg[f] += getattr(n, f)
            agg["flops"] += n.flops
        return out

    def by_stage(self):
        return self.breakdown("stage")

    def by_branch(self):
        return self.breakdown("branch")

    def by_block(self):
        return self.breakdown("block")

    def totals(self) -> dict:
        return {
            "params": self.params,
            "flops": self.flops,
            "mflops": self.flops / 1e6,
            "flops_with_norm_act": self.flops_with_norm_act,
            "backbone_flops": self.backbone_flops,
            "head_flops": self.head_flops,
            "head_params": self.head_params,
            **{f: self._total(f) for f in _COST_FIELDS if f != "params"},
        }

    def to_json(self, nodes: bool = True) -> dict:
        d = {"config": self.config, "input": list(self.input_size), "totals": self.totals(),
             "by_stage": self.by_stage(), "by_branch": self.by_branch()}
        if nodes:
            d["nodes"] = [{**asdict(n), "flops": n.flops} for n in self.nodes]
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "kind", "stage", "branch", "block", "in_shape", "out_shape",
                    *_COST_FIELDS, "flops"])
        for n in self.nodes:
            w.writerow([n.name, n.kind, n.tags.get("stage", ""), n.tags.get("branch", ""),
                        n.tags.get("block", ""), "x".join(map(str, n.in_shape)),
                        "x".join(map(str, n.out_shape)), *(getattr(n, f) for f in _COST_FIELDS), n.flops])
        return buf.getvalue()

    def table(self) -> str:
        t = self.totals()
        h, w = self.input_size
        lines = [f"input {h}x{w}",
                 f"  params            {t['params'] / 1e6:8.4f} M",
                 f"  FLOPs (headline)  {t['mflops']:8.2f} M   (1 FLOP = 1 multiply-add)",
                 f"    backbone        {t['backbone_flops'] / 1e6:8.2f} M",
                 f"    head            {t['head_flops'] / 1e6:8.2f} M   ({t['head_params']} params)",
                 f"    conv/fc/matmul  {t['macs'] / 1e6:8.2f} M",
                 f"    kernel attn     {t['dka'] / 1e6:8.2f} M",
                 f"    elementwise     {t['elementwise'] / 1e6:8.2f} M",
                 f"  norm + act        {t['norm_act'] / 1e6:8.2f} M   (not in headline)",
                 f"  with norm + act   {t['flops_with_norm_act'] / 1e6:8.2f} M",
                 "  by stage:"]
        for k, v in self.by_stage().items():
            lines.append(f"    {k:<8} params {v['params'] / 1e6:7.4f} M  FLOPs {v['flops'] / 1e6:8.2f} M")
        return "\n".join(lines)


def analyze(model: DiteHRNet | ModelConfig, input_size=None) -> ComplexityReport:
    if isinstance(model, ModelConfig):
        model = build(model)
    size = tuple(input_size or model.config.input)
    rec = Recorder()
    model.trace(rec, (1, 3) + size)
    return ComplexityReport(model.config.to_json(), size, rec.nodes, model.num_parameters())


def dka_flop_delta(spec: ConvSpec, num_kernels: int, height: int, width: int) -> int:
    """Analyzer FLOPs of a kernel-attention conv minus those of the plain conv."""
    rng = np.random.default_rng(0)
    shape = (1, spec.in_channels, height, width)
    r1, r2 = Recorder(), Recorder()
    DynamicConv(spec, num_kernels, rng).trace(r1, shape)
    Conv2d(spec, rng).trace(r2, shape)
    return sum(n.flops for n in r1.nodes) - sum(n.flops for n in r2.nodes)


# -- sweep --------------------------------------------------------------------

@dataclass
class SweepCell:
    G: tuple[int, ...]
    N: tuple[int, ...]
    params: int | None = None
    flops: int | None = None
    error: str | None = None

    @property
    def gflops(self) -> float | None:
        return None if self.flops is None else self.flops / 1e9

    def row(self) -> dict:
        return {"G": list(self.G), "N": list(self.N), "params": self.params,
                "params_m": None if self.params is None else self.params / 1e6,
                "gflops": self.gflops, "error": self.error}


def sweep_hyperparams(base: ModelConfig, G_grid=TABLE5_G, N_grid=TABLE5_N,
                      input_size=None) -> list[SweepCell]:
    """One analysis per (G, N) cell, rows over G and columns over N."""
    cells = []
    for g in G_grid:
        for n in N_grid:
            cell = SweepCell(tuple(g), tuple(n))
            try:
                cfg = ModelConfig.from_json({**base.to_json(), "G": list(g), "N": list(n)})
                rep = analyze(cfg, input_size or base.input)
                cell.params, cell.flops = rep.params, rep.flops
            except ValueError as e:
                cell.error = str(e)
            cells.append(cell)
    return cells


def sweep_table(cells: list[SweepCell]) -> str:
    ns = list(OrderedDict.fromkeys(c.N for c in cells))
    gs = list(OrderedDict.fromkeys(c.G for c in cells))
    fmt = lambda t: " ".join(map(str, t))  # noqa: E731
    lines = ["G \\ N".ljust(10) + "".join(fmt(n).center(16) for n in ns)]
    look = {(c.G, c.N): c for c in cells}
    for g in gs:
        row = fmt(g).ljust(10)
        for n in ns:
            c = look[(g, n)]
            row += ("error" if c.error else f"{c.params / 1e6:.3f} / {c.gflops:.4f}").center(16)
        lines.append(row)
    return "\n".join(lines)


# -- expectations ---------------------------------------------------------------

@dataclass
class Expectation:
    config_id: str
    input_h: int
    input_w: int
    params: float  # millions
    mflops: float
    tol_params: float
    tol_flops: float
    note: str = ""


_ID = re.compile(r"^dite-(18|30)((?::[GN]=\d+(?:-\d+)*)*)$")


def config_from_id(config_id: str) -> ModelConfig:
    """``dite-18``, ``dite-30``, optionally with ``:G=1-1-2-4:N=4-4-2-1``."""
    m = _ID.match(config_id.strip())
    if not m:
        raise ValueError(f"unrecognised config id {config_id!r}")
    over = {}
    for part in filter(None, m.group(2).split(":")):
        key, vals = part.split("=")
        over[key] = tuple(int(v) for v in vals.split("-"))
    return ModelConfig.variant_config(m.group(1), **over)


def load_expectations(source) -> list[Expectation]:
    """Read an expectation CSV from a path or a bundled table name (e.g. ``table5``)."""
    if isinstance(source, (str, Path)) and Path(source).exists():
        text = Path(source).read_text()
    else:
        name = str(source)
        name = name if name.endswith(".csv") else f"{name}.csv"
        text = resources.files("ditehrnet.data").joinpath(name).read_text()
    rows = csv.DictReader(io.StringIO(text))
    out = []
    for r in rows:
        out.append(Expectation(r["config_id"], int(r["input_h"]), int(r["input_w"]), float(r["params"]),
                               float(r["mflops"]), float(r["tol_params"]), float(r["tol_flops"]),
                               r.get("note", "") or ""))
    return out


def bundled_tables() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("ditehrnet.data").iterdir()
                  if p.name.endswith(".csv"))


@dataclass
class Verdict:
    expectation: Expectation
    params: int | None = None
    flops: int | None = None
    rel_params: float | None = None
    rel_flops: float | None = None
    passed: bool = False
    error: str | None = None
    localization: list[str] = field(default_factory=list)

    def line(self) -> str:
        e = self.expectation
        tag = f"{e.config_id} @{e.input_h}x{e.input_w}"
        if self.error:
            return f"MISSING {tag}: {self.error}"
        return (f"{'PASS' if self.passed else 'FAIL'} {tag}: params {self.params / 1e6:.4f}M vs "
                f"{e.params}M ({self.rel_params:+.2%}, tol {e.tol_params:.0%}); FLOPs "
                f"{self.flops / 1e6:.2f}M vs {e.mflops}M ({self.rel_flops:+.2%}, tol {e.tol_flops:.1%})")


def localize(report: ComplexityReport, reference: ComplexityReport) -> list[str]:
    """Per-stage differences between a report and a reference report."""
    a, b = report.by_stage(), reference.by_stage()
    lines = []
    for k in OrderedDict.fromkeys(list(b) + list(a)):
        x, y = a.get(k, {}), b.get(k, {})
        dp = x.get("params", 0) - y.get("params", 0)
        df = x.get("flops", 0) - y.get("flops", 0)
        if dp or df:
            lines.append(f"stage {k}: params {dp:+d}, FLOPs {df:+d}")
    return lines


def verify_against_paper(expectations: list[Expectation], reports: dict | None = None,
                         references: dict | None = None) -> list[Verdict]:
    """Check each expectation; missing or unbuildable entries are reported, not raised.

    ``reports`` maps (config_id, h, w) to a precomputed report (otherwise
    the config is built and analysed).  When a ``references`` report exists
    for a failing entry, the verdict lists per-stage differences.
    """
    reports = dict(reports or {})
    out = []
    for e in expectations:
        key = (e.config_id, e.input_h, e.input_w)
        v = Verdict(e)
        try:
            rep = reports.get(key) or analyze(config_from_id(e.config_id), (e.input_h, e.input_w))
        except ValueError as err:
            v.error = str(err)
            out.append(v)
            continue
        v.params, v.flops = rep.params, rep.flops
        v.rel_params = v.params / (e.params * 1e6) - 1
        v.rel_flops = v.flops / (e.mflops * 1e6) - 1
        v.passed = abs(v.rel_params) <= e.tol_params and abs(v.rel_flops) <= e.tol_flops
        if not v.passed and references and key in references:
            v.localization = localize(rep, references[key])
        out.append(v)
    return out


def verdicts_json(verdicts: list[Verdict]) -> str:
    return json.dumps([{**asdict(v.expectation), "params_measured": v.params, "flops_measured": v.flops,
                        "rel_params": v.rel_params, "rel_flops": v.rel_flops, "passed": v.passed,
                        "error": v.error, "localization": v.localization} for v in verdicts], indent=2)
