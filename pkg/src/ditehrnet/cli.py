"""Command-line entry point.

Exit codes: 0 success, 1 a verification or gradient check failed, 2 usage
error (bad flag, unreadable config or fixture).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import complexity as cx
from .gradcheck import SUITE, run_suite
from .network import ConfigError, ModelConfig, build, export_summary, predict
from .tensor import ShapeError, load_fixture, save_fixture

CONFIG_DIR_ENV = "DITEHRNET_CONFIG_DIR"
DEFAULT_SEED = 0


class UsageError(Exception):
    pass


def _input_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, e.g. 256x192, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def resolve_config_path(name: str) -> Path:
    """A path as given, else relative to $DITEHRNET_CONFIG_DIR, else a bundled config."""
    p = Path(name)
    if p.is_file():
        return p
    env = os.environ.get(CONFIG_DIR_ENV)
    if env and (Path(env) / name).is_file():
        return Path(env) / name
    bundled = resources.files("ditehrnet.data").joinpath("configs", name)
    if bundled.is_file():
        return Path(str(bundled))
    raise UsageError(f"config file not found: {name}")


def _config(args) -> ModelConfig:
    try:
        if args.config:
            cfg = ModelConfig.load(resolve_config_path(args.config))
        else:
            cfg = ModelConfig.variant_config(args.variant)
    except (ConfigError, json.JSONDecodeError) as e:
        raise UsageError(str(e)) from None
    if getattr(args, "input", None):
        cfg.input = args.input
    return cfg


def _emit(args, text: str) -> None:
    if args.output:
        Path(args.output).write_text(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


def cmd_summary(args) -> int:
    cfg = _config(args)
    s = export_summary(build(cfg, args.seed), cfg.input)
    if args.format == "json":
        _emit(args, json.dumps(s, indent=2))
        return 0
    lines = [f"Dite-HRNet ({cfg.variant}), input {cfg.input[0]}x{cfg.input[1]}, "
             f"{s['params']} parameters, {len(s['layers'])} layers"]
    for st in s["stages"]:
        lines.append(f"  stage {st['stage']}: {st['modules']} module(s), {st['branches']} branch(es), "
                     f"widths {st['widths']}")
    if args.format == "table":
        for layer in s["layers"]:
            lines.append(f"    {layer['name']:<56} {layer['kind']:<16} "
                         f"{'x'.join(map(str, layer['out_shape'])):<16} {layer['params']}")
    _emit(args, "\n".join(lines))
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    rep = cx.analyze(build(cfg, args.seed), cfg.input)
    if args.format == "json":
        _emit(args, json.dumps(rep.to_json(), indent=2))
    elif args.format == "csv":
        _emit(args, rep.to_csv())
    else:
        _emit(args, rep.table())
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    cells = cx.sweep_hyperparams(cfg, input_size=cfg.input)
    if args.format == "json":
        _emit(args, json.dumps([c.row() for c in cells], indent=2))
    elif args.format == "csv":
        rows = ["G,N,params,gflops,error"] + [
            f"{'-'.join(map(str, c.G))},{'-'.join(map(str, c.N))},{c.params or ''},"
            f"{'' if c.gflops is None else f'{c.gflops:.6f}'},{c.error or ''}" for c in cells]
        _emit(args, "\n".join(rows))
    else:
        _emit(args, f"params (M) / GFLOPs at {cfg.input[0]}x{cfg.input[1]}\n" + cx.sweep_table(cells))
    return 0 if all(c.error is None for c in cells) else 1


def cmd_verify(args) -> int:
    sources = args.expectations or args.table or cx.bundled_tables()
    verdicts = []
    for src in sources:
        try:
            verdicts += cx.verify_against_paper(cx.load_expectations(src))
        except (FileNotFoundError, KeyError) as e:
            raise UsageError(f"cannot read expectations {src!r}: {e}") from None
    if args.format == "json":
        _emit(args, cx.verdicts_json(verdicts))
    else:
        lines = [v.line() for v in verdicts]
        for v in verdicts:
            lines += [f"    {loc}" for loc in v.localization]
        ok = sum(v.passed for v in verdicts)
        lines.append(f"{ok}/{len(verdicts)} expectations met")
        _emit(args, "\n".join(lines))
    return 0 if all(v.passed for v in verdicts) else 1


def cmd_forward(args) -> int:
    cfg = _config(args)
    model = build(cfg, args.seed)
    if args.fixture:
        try:
            x = load_fixture(args.fixture)
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read fixture: {e}") from None
    else:
        rng = np.random.default_rng(args.seed)
        x = rng.standard_normal((args.batch, 3) + tuple(cfg.input)).astype(np.float32)
    try:
        out = predict(model, x)
    except ShapeError as e:
        raise UsageError(str(e)) from None
    digest = hashlib.sha256(np.ascontiguousarray(out.heatmaps).tobytes()).hexdigest()
    if args.save_heatmaps:
        save_fixture(args.save_heatmaps, out.heatmaps)
    result = {"input_shape": list(x.shape), "heatmap_shape": list(out.heatmaps.shape), "sha256": digest,
              "keypoints": [k.as_list() for k in out.keypoints]}
    if args.format == "json":
        _emit(args, json.dumps(result, indent=2))
    else:
        lines = [f"input {tuple(x.shape)} -> heatmaps {tuple(out.heatmaps.shape)}", f"sha256 {digest}"]
        for n, kp in enumerate(out.keypoints):
            for j, (px, py, s) in enumerate(kp.as_list()):
                lines.append(f"  sample {n} keypoint {j:2d}: x={px:8.2f} y={py:8.2f} score={s:.4f}")
        _emit(args, "\n".join(lines))
    return 0


def cmd_gradcheck(args) -> int:
    checks = run_suite(args.seed, args.only or None)
    if args.format == "json":
        _emit(args, json.dumps([{"name": c.name, "passed": c.passed, "max_rel_error": c.report.max_rel_error,
                                 "tol": c.report.tol} for c in checks], indent=2))
    else:
        lines = []
        for c in checks:
            lines.append(f"{'PASS' if c.passed else 'FAIL'} {c.name:<12} max rel error "
                         f"{c.report.max_rel_error:.2e} (tol {c.report.tol:g})")
            if args.verbose or not c.passed:
                lines += ["    " + ln for ln in c.report.lines()]
        _emit(args, "\n".join(lines))
    return 0 if all(c.passed for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditehrnet", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", "-o", help="write to this file instead of stdout")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)

    model = argparse.ArgumentParser(add_help=False)
    src = model.add_mutually_exclusive_group()
    src.add_argument("--variant", choices=["18", "30"], default="18")
    src.add_argument("--config", help=f"JSON config (also looked up in ${CONFIG_DIR_ENV} and bundled configs)")
    model.add_argument("--input", type=_input_size, help="input size HxW (default from config)")

    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, parents, formats, help_):
        p = sub.add_parser(name, parents=parents, help=help_)
        p.add_argument("--format", choices=formats, default=formats[0])
        p.set_defaults(func=func)
        return p

    add("summary", cmd_summary, [common, model], ["table", "brief", "json"], "print the model graph")
    add("analyze", cmd_analyze, [common, model], ["table", "json", "csv"], "parameter and FLOP report")
    add("sweep", cmd_sweep, [common, model], ["table", "json", "csv"], "G x N hyper-parameter grid")
    p = add("verify", cmd_verify, [common], ["table", "json"], "compare against bundled reference tables")
    p.add_argument("--table", action="append", choices=cx.bundled_tables(), help="bundled table (repeatable)")
    p.add_argument("--expectations", action="append", help="expectation CSV file (repeatable)")
    p = add("forward", cmd_forward, [common, model], ["table", "json"], "run the model and decode keypoints")
    p.add_argument("--fixture", help="input tensor in the fixture format")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--save-heatmaps", help="write heatmaps as a fixture file")
    p = add("gradcheck", cmd_gradcheck, [common], ["table", "json"], "finite-difference checks")
    p.add_argument("--only", action="append", choices=list(SUITE))
    p.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"ditehrnet: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
