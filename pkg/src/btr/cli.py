"""``python -m btr {train,eval,analyze,plot}``.

Runs live under ``$BTR_RUN_ROOT/runs/<config-hash>-<seed>/`` (the run root
defaults to the working directory). Exit codes: 0 success, 1 runtime error,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, orchestrator, plotting
from .config import AgentConfig, ConfigError, config_from_mapping, load_config, loads_config, parse_overrides

RUN_ROOT_ENV = "BTR_RUN_ROOT"
VERSION = "0.1.0"


class UsageError(Exception):
    pass


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, ".")) / "runs"


def run_dir_for(cfg: AgentConfig) -> Path:
    return run_root() / f"{cfg.digest()}-{cfg.master_seed}"


def _config(args) -> AgentConfig:
    if args.config is None:
        return config_from_mapping(parse_overrides(args.set))
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config, args.set)


def _write_manifest(run_dir: Path, cfg: AgentConfig) -> None:
    manifest = {
        "config": cfg.to_dict(),
        "master_seed": cfg.master_seed,
        "code_version": VERSION,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "environment": cfg.env_layout,
        "files": {"metrics": "metrics.csv", "checkpoints": "ckpt_<frame>.bin", "plots": "plots/"},
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = _config(args)
    run_dir = Path(args.run_dir) if args.run_dir else run_dir_for(cfg)
    if run_dir.exists() and (run_dir / "metrics.csv").exists() and not args.resume:
        if not args.force:
            print(f"error: run directory {run_dir} already exists (use --force or --resume)", file=sys.stderr)
            return 1
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if not (run_dir / "manifest.json").exists():
        _write_manifest(run_dir, cfg)
    result = orchestrator.run_training(cfg, run_dir, resume_from=args.resume, progress=not args.quiet)
    print(run_dir)
    if not args.quiet:
        print(orchestrator.training_summary(result), file=sys.stderr)
    return 0


def _env_config(meta: dict, args) -> AgentConfig:
    if args.config:
        return _config(args)
    base = loads_config(meta["config"]) if "config" in meta else AgentConfig()
    return config_from_mapping(parse_overrides(args.set), base)


def cmd_eval(args) -> int:
    net, meta = orchestrator.load_network(args.checkpoint)
    cfg = _env_config(meta, args)
    episodes = args.episodes or cfg.eval_episodes
    scores = orchestrator.evaluate(
        net,
        orchestrator.env_factory_for(cfg),
        episodes,
        args.epsilon,
        seed=args.seed,
        n_taus=cfg.iqn_taus,
    )
    low, high = analysis.bootstrap_ci(scores, seed=args.seed)
    summary = {
        "episodes": episodes,
        "mean": float(np.mean(scores)),
        "iqm": analysis.iqm(scores),
        "ci_low": low,
        "ci_high": high,
    }
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".scores.csv")
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["episode", "score"])
        for i, s in enumerate(scores):
            w.writerow([i, repr(float(s))])
    out.with_suffix(".summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    loaded = [orchestrator.load_network(p) for p in args.checkpoint]
    first_net, first_meta = loaded[0]
    cfg = _env_config(first_meta, args)
    if args.probe:
        arrays, pmeta = checkpoint.load(args.probe)
        probe = analysis.StateProbe(arrays["observations"], arrays["taus"], int(pmeta["seed"]))
    else:
        size = args.probe_size or cfg.probe_size
        probe = analysis.build_probe(
            orchestrator.env_factory_for(cfg), size, args.probe_seed, cfg.frame_stack, cfg.iqn_taus
        )
    if args.save_probe:
        checkpoint.save(args.save_probe, {"observations": probe.observations, "taus": probe.taus}, {"seed": probe.seed})
    rows = []
    for path, (net, meta) in zip(args.checkpoint, loaded):
        if net.spec != first_net.spec:
            raise ValueError(f"spec mismatch: {path} differs from {args.checkpoint[0]}")
        probe.check(net)
        frame = meta.get("train_state", {}).get("frame_count", 0)
        rec = analysis.MetricsRecord(frame=frame)
        for k, v in analysis.network_metrics(net, probe, args.threshold).items():
            setattr(rec, k, v)
        row = rec.row()
        # the zero-threshold convention is reported alongside the configured one
        row["dormant_pct_zero"] = 100.0 * analysis.dormant_fraction(net, probe, 0.0)
        row["action_swap_pct"] = rec.action_swap_pct
        row["checkpoint"] = str(path)
        rows.append(row)
    cols = orchestrator.CSV_COLUMNS + ["action_swap_pct", "dormant_pct_zero", "checkpoint"]
    out = Path(args.out) if args.out else Path(args.checkpoint[0]).with_suffix(".analysis.csv")
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] if c == "checkpoint" else orchestrator._fmt(row[c]) for c in cols])
    print(out)
    return 0


def cmd_plot(args) -> int:
    runs = {}
    for p in args.csv:
        path = Path(p)
        if not path.is_file():
            raise UsageError(f"metrics file not found: {p}")
        label = path.parent.name or path.stem
        if label in runs:
            label = str(path)
        runs[label] = orchestrator.read_csv(path)
    if args.labels:
        if len(args.labels) != len(runs):
            raise UsageError("give one --label per csv")
        runs = dict(zip(args.labels, runs.values()))
    out_dir = Path(args.out) if args.out else Path(args.csv[0]).parent / "plots"
    curve = plotting.learning_curve(runs, out_dir / "learning_curve.svg")
    diag = plotting.diagnostics(runs, out_dir / "diagnostics.svg")
    print(curve)
    print(diag)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p, required=False):
        p.add_argument("--config", required=required, help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("train", help="train an agent")
    add_config(p, required=True)
    p.add_argument("--run-dir", help=f"explicit run directory (default: ${RUN_ROOT_ENV}/runs/<hash>-<seed>)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    add_config(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="scores CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="network diagnostics for checkpoints")
    p.add_argument("--checkpoint", required=True, action="append")
    add_config(p)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--probe-size", type=int, default=None)
    p.add_argument("--probe", help="load a saved probe instead of collecting one")
    p.add_argument("--save-probe", help="write the probe used to this path")
    p.add_argument("--threshold", type=float, default=0.025)
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plot", help="SVG plots from metrics CSVs")
    p.add_argument("--csv", required=True, action="append")
    p.add_argument("--label", dest="labels", action="append")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
