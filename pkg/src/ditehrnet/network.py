"""Model configuration, construction, forward pass, heatmap decoding and checkpoints."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .blocks import DgcBlock, DmcBlock, MultiScaleFusion, Transition
from .nn import Conv2d, ConvBN, Module, Recorder, conv_spec
from .tensor import ConvSpec, DEFAULT_DTYPE, ShapeError, as_tensor

DEFAULT_WIDTH = 40
DEFAULT_STEM = 42
DEFAULT_G = (1, 1, 2, 4)
DEFAULT_N = (4, 4, 2, 1)
VARIANT_MODULES = {"18": (1, 2, 4, 2), "30": (1, 3, 8, 3)}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture description.  ``stages`` lists (modules, branches) per stage,
    stage 1 being the stem."""

    variant: str = "18"
    widths: tuple[int, ...] = tuple(DEFAULT_WIDTH * 2 ** k for k in range(4))
    stem_width: int = DEFAULT_STEM
    stages: tuple[tuple[int, int], ...] = tuple((m, k + 1) for k, m in enumerate(VARIANT_MODULES["18"]))
    G: tuple[int, ...] = DEFAULT_G
    N: tuple[int, ...] = DEFAULT_N
    input: tuple[int, int] = (256, 192)
    keypoints: int = 17
    static_single_kernel: bool = True
    use_acm: bool = True
    use_dsc: bool = True
    ratio: int = 4
    dcm_ratio: int = 16

    @classmethod
    def variant_config(cls, variant: str | int, **overrides) -> "ModelConfig":
        variant = str(variant)
        if variant not in VARIANT_MODULES:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANT_MODULES)}")
        stages = tuple((m, k + 1) for k, m in enumerate(VARIANT_MODULES[variant]))
        cfg = cls(variant=variant, stages=stages)
        return replace(cfg, **overrides).validated() if overrides else cfg.validated()

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Two stages at width 4, for desk-scale checks."""
        return cls(variant="custom", widths=(4, 8), stem_width=4, stages=((1, 1), (1, 2)),
                   G=(1, 2), N=(2, 2), input=(32, 32), keypoints=3).validated()

    @property
    def num_branches(self) -> int:
        return self.stages[-1][1]

    @property
    def module_counts(self) -> tuple[int, ...]:
        return tuple(m for m, _ in self.stages)

    @property
    def branch_counts(self) -> tuple[int, ...]:
        return tuple(b for _, b in self.stages)

    @property
    def stride_multiple(self) -> int:
        return 2 ** (self.num_branches + 1)

    def validated(self) -> "ModelConfig":
        errs = []
        self.widths = tuple(int(w) for w in self.widths)
        self.stages = tuple((int(m), int(b)) for m, b in self.stages)
        self.G, self.N = tuple(int(g) for g in self.G), tuple(int(n) for n in self.N)
        self.input = tuple(int(v) for v in self.input)
        if not self.stages:
            errs.append("at least one stage is required")
        else:
            if self.stages[0] != (1, 1):
                errs.append(f"stage 1 (stem) must be 1 module on 1 branch, got {self.stages[0]}")
            for k, (m, b) in enumerate(self.stages):
                if m < 1:
                    errs.append(f"stage {k + 1} needs >= 1 module, got {m}")
                if b != k + 1:
                    errs.append(f"stage {k + 1} must have {k + 1} branches, got {b}")
        nb = len(self.stages)
        if len(self.widths) != nb:
            errs.append(f"{nb} stages need {nb} branch widths, got {len(self.widths)}")
        for k in range(1, len(self.widths)):
            if self.widths[k] != 2 * self.widths[k - 1]:
                errs.append(f"branch {k + 1} width {self.widths[k]} must double branch {k}'s")
        if any(w < 2 or w % 2 for w in self.widths):
            errs.append("branch widths must be even and >= 2")
        if self.stem_width < 2 or self.stem_width % 2:
            errs.append("stem width must be even and >= 2")
        for name, vals in (("G", self.G), ("N", self.N)):
            if len(vals) != nb:
                errs.append(f"{name} needs one entry per branch ({nb}), got {len(vals)}")
            if any(v < 1 for v in vals):
                errs.append(f"{name} entries must be >= 1")
        for k, (w, g) in enumerate(zip(self.widths, self.G)):
            if (w // 2) % g:
                errs.append(f"branch {k + 1}: half-width {w // 2} not divisible by G={g}")
        if self.keypoints < 1:
            errs.append("keypoints must be >= 1")
        if self.ratio < 1 or self.dcm_ratio < 1:
            errs.append("bottleneck ratios must be >= 1")
        if len(self.input) != 2 or any(v < 1 for v in self.input):
            errs.append(f"input must be two positive sizes, got {self.input}")
        if errs:
            raise ConfigError("invalid config: " + "; ".join(errs))
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["stages"] = [{"modules": m, "branches": b} for m, b in self.stages]
        for k in ("widths", "G", "N", "input"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        variant = str(d.pop("variant", "custom"))
        base = cls.variant_config(variant) if variant in VARIANT_MODULES else cls(variant=variant)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "stages" in d:
            try:
                d["stages"] = tuple((s["modules"], s["branches"]) if isinstance(s, dict) else tuple(s)
                                    for s in d["stages"])
            except (KeyError, TypeError) as e:
                raise ConfigError(f"bad stages entry: {e}") from None
        return replace(base, **d).validated()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


class DiteHRNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        cfg = self.config = config
        s = cfg.stem_width
        self.stem_conv = ConvBN(conv_spec(3, s, 3, 2), rng, relu=True, dtype=dtype)
        self.dgc = DgcBlock(s, s, cfg.N[0], rng, static_single_kernel=cfg.static_single_kernel,
                            ratio=cfg.ratio, dtype=dtype)
        self.stage_layers: list[tuple[Transition, list[list[Module]]]] = []
        prev = [s]
        for k, (modules, nb) in enumerate(cfg.stages[1:], start=2):
            chans = list(cfg.widths[:nb])
            trans = self.add_child(f"stage{k}_transition", Transition(prev, chans, rng, dtype))
            mods = []
            for m in range(modules):
                blocks = []
                for b in range(2):
                    blocks.append(self.add_child(f"stage{k}_m{m}_dmc{b}", DmcBlock(
                        chans, cfg.G[:nb], cfg.N[:nb], rng, use_acm=cfg.use_acm, use_dsc=cfg.use_dsc,
                        static_single_kernel=cfg.static_single_kernel, ratio=cfg.ratio,
                        dcm_ratio=cfg.dcm_ratio, dtype=dtype)))
                blocks.append(self.add_child(f"stage{k}_m{m}_fuse", MultiScaleFusion(chans, rng, dtype)))
                mods.append(blocks)
            self.stage_layers.append((trans, mods))
            prev = chans
        self.head = Conv2d(ConvSpec(cfg.widths[0], cfg.keypoints, (1, 1)), rng, bias=True, dtype=dtype)

    def _check_input(self, shape):
        if len(shape) != 4 or shape[1] != 3:
            raise ShapeError(f"expected a (B, 3, H, W) image batch, got {tuple(shape)}")
        m = self.config.stride_multiple
        if shape[2] % m or shape[3] % m:
            raise ShapeError(f"input size {shape[2]}x{shape[3]} must be divisible by {m}",
                             dim="height" if shape[2] % m else "width")

    def branches(self, x):
        """All branch outputs of the last stage."""
        self._check_input(ag.value(x).shape)
        xs = [self.dgc(self.stem_conv(x))]
        for trans, mods in self.stage_layers:
            xs = trans(xs)
            for blocks in mods:
                for blk in blocks:
                    xs = blk(xs)
        return xs

    def forward(self, x):
        """Backbone output: the highest-resolution branch at 1/4 of the input."""
        if not isinstance(x, ag.Var):
            x = as_tensor(x)
        return self.branches(x)[0]

    def heatmaps(self, x):
        return self.head(self.forward(x))

    def trace(self, rec: Recorder, shape):
        self._check_input(shape)
        with rec.scope("stage1", stage=1, branch=0):
            with rec.scope("stem"):
                h = self.stem_conv.trace(rec, shape)
            h = self.dgc.trace(rec, h, "dgc")
        shapes = [h]
        for k, (trans, mods) in enumerate(self.stage_layers, start=2):
            with rec.scope(f"stage{k}", stage=k):
                shapes = trans.trace(rec, shapes, "transition")
                for m, blocks in enumerate(mods):
                    with rec.scope(f"m{m}"):
                        for b, blk in enumerate(blocks):
                            shapes = blk.trace(rec, shapes, f"dmc{b}" if b < 2 else "fuse")
        with rec.scope("head", stage="head", branch=0):
            out = self.head.trace(rec, shapes[0], "conv")
        return out


def build(config: ModelConfig | None = None, seed: int = 0, dtype=DEFAULT_DTYPE) -> DiteHRNet:
    """Construct a model with deterministic seeded initialisation."""
    config = (config or ModelConfig.variant_config("18")).validated()
    return DiteHRNet(config, np.random.default_rng(seed), dtype)


# -- decoding -----------------------------------------------------------------

@dataclass
class Keypoints:
    """Decoded keypoints for one sample: ``xy`` in input pixels, peak ``scores``,
    and ``flat`` marking channels with no unique peak (centre returned)."""

    xy: np.ndarray
    scores: np.ndarray
    flat: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def as_list(self) -> list[tuple[float, float, float]]:
        return [(float(x), float(y), float(s)) for (x, y), s in zip(self.xy, self.scores)]


@dataclass
class PoseOutput:
    heatmaps: np.ndarray
    keypoints: list[Keypoints]


def _offset(lo: float, hi: float) -> float:
    """Quarter step toward the larger neighbour; zero on an exact tie."""
    if hi > lo:
        return 0.25
    if lo > hi:
        return -0.25
    return 0.0


def decode_heatmaps(hm, input_size) -> list[Keypoints]:
    """Argmax per channel, quarter-pixel shift toward the higher neighbour on
    each axis, then scale to input pixels.

    Ties for the maximum go to the lowest flat index.  A neighbour outside
    the map counts as equal to the other one, so peaks on the border are not
    shifted along that axis.
    """
    hm = np.asarray(hm)
    if hm.ndim == 3:
        hm = hm[None]
    if hm.ndim != 4:
        raise ShapeError(f"expected (B, K, h, w) heatmaps, got {hm.shape}")
    b, k, h, w = hm.shape
    sy, sx = input_size[0] / h, input_size[1] / w
    out = []
    for n in range(b):
        xy = np.zeros((k, 2))
        scores = np.zeros(k)
        flat = np.zeros(k, bool)
        for c in range(k):
            m = hm[n, c]
            idx = int(np.argmax(m))
            py, px = divmod(idx, w)
            scores[c] = m[py, px]
            if np.all(m == m.flat[0]):
                flat[c] = True
                xy[c] = ((w - 1) / 2 * sx, (h - 1) / 2 * sy)
                continue
            fx, fy = float(px), float(py)
            if 0 < px < w - 1:
                fx += _offset(m[py, px - 1], m[py, px + 1])
            if 0 < py < h - 1:
                fy += _offset(m[py - 1, px], m[py + 1, px])
            xy[c] = (fx * sx, fy * sy)
        out.append(Keypoints(xy, scores, flat))
    return out


def predict(model: DiteHRNet, x) -> PoseOutput:
    x = as_tensor(x)
    hm = model.heatmaps(x)
    return PoseOutput(hm, decode_heatmaps(hm, x.shape[2:]))


# -- summary ------------------------------------------------------------------

def export_summary(model: DiteHRNet, input_size=None) -> dict:
    """Per-layer listing (kind, shapes, params) in traversal order."""
    cfg = model.config
    size = tuple(input_size or cfg.input)
    rec = Recorder()
    model.trace(rec, (1, 3) + size)
    stages = []
    for k, (m, b) in enumerate(cfg.stages, start=1):
        stages.append({"stage": k, "modules": m, "branches": b,
                       "widths": [cfg.stem_width] if k == 1 else list(cfg.widths[:b])})
    return {
        "config": cfg.to_json(),
        "input": list(size),
        "stages": stages,
        "params": model.num_parameters(),
        "layers": [{"name": n.name, "kind": n.kind, "in_shape": list(n.in_shape),
                    "out_shape": list(n.out_shape), "params": n.params} for n in rec.nodes],
    }


# -- checkpoints --------------------------------------------------------------

MAGIC = b"DITECKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _state(model: Module):
    for owner, pname, full, arr in model.parameter_slots():
        yield full, arr
    yield from _buffers(model, "")


def _buffers(mod: Module, prefix: str):
    for bname, arr in mod._buffers.items():
        yield f"{prefix}{bname}", arr
    for cname, child in mod.children():
        yield from _buffers(child, f"{prefix}{cname}.")


def save_checkpoint(model: Module, path: str | os.PathLike) -> None:
    """Write all parameters and buffers; see README for the byte layout."""
    entries = list(_state(model))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            code = _CODES[np.dtype(arr.dtype)]
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        out[name] = np.frombuffer(data, dt, int(np.prod(shape)), pos).reshape(shape).copy()
        pos += size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def load_checkpoint(model: Module, path: str | os.PathLike) -> None:
    values = read_checkpoint(path)
    params = {full for _, _, full, _ in model.parameter_slots()}
    model.load_parameters({k: v for k, v in values.items() if k in params})
    for name, arr in _buffers(model, ""):
        if name not in values:
            raise KeyError(f"checkpoint lacks buffer {name!r}")
        arr[...] = values[name]
