"""Command-line entry points: train, eval, profile, routing-stats."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import errors, tasks
from .config import ExperimentConfig, toy_config
from .evaluate import RoutingStats, evaluate_model, read_trace, write_trace
from .flops import schedule_flops
from .layout import SequenceLayout
from .model import DpnModel


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = toy_config()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    if getattr(args, "out_dir", None):
        cfg = dataclasses.replace(cfg, out_dir=args.out_dir)
    return cfg


def cmd_train(args) -> int:
    from .training import train

    cfg = _load_config(args)
    result = train(cfg)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    if result.final_eval:
        print(f"final eval: {json.dumps(result.final_eval)}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = DpnModel.load(args.checkpoint)
    samples = tasks.eval_set(cfg.train.seed, cfg.task.grid_h, cfg.task.grid_w,
                             args.samples or cfg.train.eval_samples)
    result = evaluate_model(model, samples)
    summary = result.summary()
    out_dir = args.out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, "routing_trace.jsonl")
    with open(trace_path, "w") as fh:
        write_trace(result.trace, fh)
    with open(os.path.join(out_dir, "eval_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    for key in sorted(summary):
        print(f"{key}: {summary[key]}")
    print(f"routing trace: {trace_path}")
    return 0


def _parse_kernel(text: str) -> tuple[int, int]:
    try:
        kh, kw = text.lower().split("x")
        return int(kh), int(kw)
    except ValueError as exc:
        raise errors.ConfigError(f"kernel must look like 2x2, got {text!r}") from exc


def cmd_profile(args) -> int:
    cfg = _load_config(args)
    placements = [tuple(int(x) for x in p.split(",") if x.strip()) for p in args.placements] or [
        cfg.pyramid.dpe_layers
    ]
    kernels = [_parse_kernel(k) for k in args.kernel] or [(2, 2)]
    layout = SequenceLayout(args.grid_h, args.grid_w, args.text_len, args.answer_len)
    rows = []
    for placement in placements:
        for kernel in kernels:
            report = schedule_flops(
                args.layers or cfg.model.n_layers,
                args.width or cfg.model.d,
                args.ffn_width or cfg.model.m,
                layout,
                dpe_layers=placement,
                decisions=[kernel] * len(placement),
            )
            rows.append({
                "placement": list(placement),
                "kernel": list(kernel),
                "total": report.total,
                "baseline": report.baseline_total,
                "ratio": report.ratio,
            })
            name = ",".join(map(str, placement)) or "-"
            print(f"layers={name:<12} kernel={kernel[0]}x{kernel[1]}  "
                  f"total={report.total}  ratio={report.ratio:.4f}")
            if args.per_layer:
                for line in report.lines():
                    print("  " + line)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)
        print(f"wrote {args.out}")
    return 0


def cmd_routing_stats(args) -> int:
    with open(args.trace) as fh:
        records = read_trace(fh)
    stats = RoutingStats.from_records(records)
    tags = sorted({rec["tag"] for rec in records})
    layers = sorted({rec["layer"] for rec in records})
    report = {"tags": {}, "total_patterns": stats.pattern_count()}
    for tag in tags:
        tag_block = {"patterns": stats.pattern_count(tag), "layers": {}}
        for layer in layers:
            freqs = stats.frequencies(tag, layer)
            tag_block["layers"][str(layer)] = {str(e): f for e, f in sorted(freqs.items())}
            shown = " ".join(f"e{e}:{f:.3f}" for e, f in sorted(freqs.items()))
            print(f"tag={tag:<8} layer={layer:<3} {shown}")
        print(f"tag={tag:<8} distinct patterns: {tag_block['patterns']}")
        report["tags"][tag] = tag_block
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynpool",
                                     description="Train, evaluate, and profile dynamic-pooling models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", help="experiment config JSON (default: built-in toy config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", help="override the config output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fresh task set")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--samples", type=int, help="number of eval samples")
    p.add_argument("--out-dir", help="where to write the trace and summary")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="static what-if cost analysis for pooling schedules")
    p.add_argument("--config", help="experiment config JSON for default dims")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--layers", type=int, help="stack depth")
    p.add_argument("--width", type=int, help="model width d")
    p.add_argument("--ffn-width", type=int, help="FFN intermediate width m")
    p.add_argument("--grid-h", type=int, default=24)
    p.add_argument("--grid-w", type=int, default=24)
    p.add_argument("--text-len", type=int, default=30)
    p.add_argument("--answer-len", type=int, default=0)
    p.add_argument("--placements", action="append", default=[],
                   help="comma-separated pooling layer indices; repeatable")
    p.add_argument("--kernel", action="append", default=[],
                   help="pooling kernel like 1x2 or 2x2; repeatable")
    p.add_argument("--per-layer", action="store_true", help="print the per-layer table")
    p.add_argument("--out", help="write rows as JSON")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("routing-stats", help="aggregate a routing trace")
    p.add_argument("trace", help="routing_trace.jsonl from eval")
    p.add_argument("--out", help="write the aggregate as JSON")
    p.set_defaults(func=cmd_routing_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (errors.ConfigError, errors.ContractError, errors.LayoutError,
            errors.CapacityError, errors.DimensionError, errors.StateError,
            errors.NonFiniteLossError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
