"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, stats, flops. Every knob is a
dotted config key reachable from a config file (--config) or a --set
override; common knobs also have short flags. Exit codes: 0 success,
1 verification failure, 2 config error, 3 missing input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .errors import ConfigError, FormatError, FusegateError
from . import data as D
from . import analysis
from .config import RunConfig
from .checkpoint import load_checkpoint
from .gating import export_trace_csv, export_trace_summary, load_trace_csv
from .model import BaselinePolicy, ToyNet, count_params
from .train import evaluate, train

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _load_config(args, extra: dict[str, str] | None = None) -> RunConfig:
    overrides = _overrides(args)
    if extra:
        overrides.update(extra)
    return RunConfig.from_sources(getattr(args, "config", None), overrides)


def _echo_config(cfg: RunConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    text = cfg.echo()
    with open(os.path.join(out_dir, "config.echo"), "w") as fh:
        fh.write(text)
    return text


def _require(path: str, what: str) -> str:
    if path is None or not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_gen_data(args) -> int:
    extra = {}
    if args.classes:
        extra["data.classes"] = args.classes
    if args.n is not None:
        extra["data.n"] = str(args.n)
    if args.seed is not None:
        extra["data.seed"] = str(args.seed)
    cfg = _load_config(args, extra)
    spec = cfg.dataset_spec()
    D.generate(spec, args.out)
    print(f"wrote {spec.n_samples} samples ({len(spec.classes)} classes) to {args.out}")
    return EXIT_OK


def _policy_from_args(args) -> BaselinePolicy | None:
    kind = getattr(args, "policy", None) or "none"
    if kind == "none":
        return None
    if kind == "random":
        dist = tuple(float(x) for x in (args.dist or "1,0,0").split(","))
        return BaselinePolicy(kind="random", dist=dist)
    if kind == "threshold":
        return BaselinePolicy(kind="threshold", keep_ratio=args.keep_ratio)
    raise ConfigError(f"unknown policy {kind!r}")


def _build_net(cfg: RunConfig, meta: dict) -> ToyNet:
    net_cfg = cfg.net_config(num_classes=meta["num_classes"],
                             in_channels=meta["channels"])
    if net_cfg.frames != meta["frames"]:
        raise ConfigError(f"config expects {net_cfg.frames} frames but dataset "
                          f"has {meta['frames']}")
    return ToyNet(net_cfg, seed=cfg["model.seed"])


def cmd_train(args) -> int:
    extra = {}
    if args.variant:
        extra["model.variant"] = args.variant
    if args.gated:
        extra["model.gated"] = args.gated
    cfg = _load_config(args, extra)
    train_path = _require(args.data, "training dataset")
    val_path = _require(args.val_data, "validation dataset")
    meta = D.read_header(train_path)
    net = _build_net(cfg, meta)
    echo = _echo_config(cfg, args.out)
    policy = _policy_from_args(args)
    t0 = time.time()
    result = train(net, D.load_all(train_path), D.load_all(val_path),
                   cfg.train_config(), run_dir=args.out, config_echo=echo,
                   policy=policy, log=print)
    print(f"done in {time.time() - t0:.0f}s; best top1 {result.best.top1:.4f} "
          f"-> {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ckpt_path = _require(args.checkpoint, "checkpoint")
    data_path = _require(args.data, "dataset")
    blobs, echo = load_checkpoint(ckpt_path)
    run_cfg = RunConfig.from_sources(None, _echo_to_overrides(echo)) if echo else cfg
    meta = D.read_header(data_path)
    net = _build_net(run_cfg, meta)
    net.load_params(blobs)
    policy = _policy_from_args(args)
    rng = np.random.default_rng(args.seed)
    record, traces = evaluate(net, D.load_all(data_path), policy=policy, rng=rng)
    _echo_config(run_cfg, args.out)
    report = {
        "top1": record.top1,
        "mean_flops": record.mean_flops,
        "mean_util": record.mean_util,
        "params": count_params(net),
    }
    if record.top5 is not None:
        report["top5"] = record.top5
    if record.policy_fractions is not None:
        report["fractions"] = record.policy_fractions
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2)
    if args.dump_traces:
        export_trace_csv(traces, os.path.join(args.out, "traces.csv"))
        export_trace_summary(traces, os.path.join(args.out, "traces_summary.json"))
    print(json.dumps(report))
    return EXIT_OK


def _echo_to_overrides(echo: str) -> dict[str, str]:
    out = {}
    for line in echo.splitlines():
        line = line.split("#", 1)[0].strip()
        if line and "=" in line:
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all
    t0 = time.time()
    results = run_all(seed=args.seed, corrupt=args.inject_fault)
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<20} max_rel_err={r.rel_err:.3e}  tol={r.tolerance:g}")
        if not r.passed:
            failed.append(r.name)
    print(f"{len(results)} checks in {time.time() - t0:.1f}s")
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VERIFICATION
    print("all gradients match finite differences")
    return EXIT_OK


def cmd_stats(args) -> int:
    traces = load_trace_csv(_require(args.traces, "trace file"))
    stats = analysis.aggregate(traces)
    json_path, csv_path = analysis.export(stats, args.out)
    print(f"quotient={stats.quotient:.4f} overall={stats.overall}")
    print(f"wrote {json_path} and {csv_path}")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _load_config(args)
    if args.data:
        meta = D.read_header(_require(args.data, "dataset"))
    else:
        meta = {"num_classes": args.num_classes, "channels": 1,
                "frames": cfg["data.frames"],
                "height": cfg["data.height"], "width": cfg["data.width"]}
    net = _build_net(cfg, meta)
    table = net.conv_cost_table(meta["height"], meta["width"])
    frames = cfg["data.frames"]
    print(f"{'layer':<16} {'m (FLOPs/frame)':>16}  gated")
    for row in table["rows"]:
        print(f"{row['layer']:<16} {row['m']:>16.0f}  {row.get('gated', False)}")
    upper = table["per_frame_total"] * frames
    print(f"all-keep upper bound over {frames} frames: {upper:.0f}")
    print(f"params: {count_params(net)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusegate",
        description="adaptive keep/reuse/skip temporal fusion at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a dotted config key (repeatable)")

    p = sub.add_parser("gen-data", help="generate a SynthMotion dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--classes", help="comma list, e.g. left,right")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--seed", type=int, help="generation seed")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a network")
    common(p)
    p.add_argument("--data", required=True, help="training dataset (AFSV1)")
    p.add_argument("--val-data", required=True, help="validation dataset")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--variant", choices=("plain", "shift", "shift-last"))
    p.add_argument("--gated", help="auto|none|all|last or comma bools")
    p.add_argument("--policy", choices=("none", "random", "threshold"),
                   default="none", help="force a baseline gating policy")
    p.add_argument("--dist", help="keep,reuse,skip probabilities for --policy random")
    p.add_argument("--keep-ratio", type=float, default=0.5,
                   help="kept fraction for --policy threshold")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", choices=("none", "random", "threshold"),
                   default="none")
    p.add_argument("--dist")
    p.add_argument("--keep-ratio", type=float, default=0.5)
    p.add_argument("--dump-traces", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", metavar="OP",
                   help="corrupt one op's backward to prove detection")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("stats", help="aggregate policy statistics from traces")
    p.add_argument("--traces", required=True, help="traces.csv from eval")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("flops", help="per-layer analytic cost table")
    common(p)
    p.add_argument("--data", help="dataset to size the network against")
    p.add_argument("--num-classes", type=int, default=2)
    p.set_defaults(fn=cmd_flops)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FusegateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION


if __name__ == "__main__":
    sys.exit(main())
