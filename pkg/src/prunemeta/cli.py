"""Command-line front end.

Verbs: generate, train, prune, eval, ablate, sams, report. Configuration
comes from one JSON file plus repeatable --set KEY=VALUE overrides. Two
environment variables are honored: PRUNEMETA_OUT (output root used when
--out is absent) and PRUNEMETA_THREADS (torch thread count). Exit codes:
0 success, 2 configuration/argument error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from .errors import ConfigError
from .network import load_checkpoint, mask_to_json, repack_network, save_checkpoint
from .pipeline import (
    PipelineConfig,
    config_from_dict,
    run_ablation,
    run_pmp,
    run_sams,
    seed_sweep,
    write_report,
)
from .pruning import retention_table, select_prune_set
from .scoring import build_importance_table
from .stats import episodic_eval
from .synthdata import load_dataset, save_dataset

from . import pipeline as _pipeline


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> PipelineConfig:
    payload: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        payload[key.strip()] = _parse_value(value)
    env_out = os.environ.get("PRUNEMETA_OUT")
    if env_out and "out_dir" not in payload:
        payload["out_dir"] = env_out
    config = config_from_dict(payload)
    config.validate()
    return config


def _out_dir(args, config: PipelineConfig, leaf: str | None = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = Path(config.out_dir)
    return root / leaf if leaf else root


def cmd_generate(args) -> int:
    config = load_config(args)
    out = _out_dir(args, config, "data")
    train_ds, eval_ds = _pipeline.make_datasets(config, args.seed if args.seed is not None else config.seeds[0])
    wrote = []
    if args.split in ("train", "both"):
        wrote.append(save_dataset(train_ds, out / "train"))
    if args.split in ("eval", "both"):
        wrote.append(save_dataset(eval_ds, out / "eval"))
    for path in wrote:
        print(path)
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    seed = args.seed if args.seed is not None else config.seeds[0]
    out = _out_dir(args, config, f"seed{seed}")
    if args.sweep:
        summary = seed_sweep(config, out_dir=_out_dir(args, config))
        print(
            f"sweep over {len(summary['runs'])} seeds: "
            f"mean {summary['mean_accuracy']:.2f}% spread {summary['accuracy_spread']:.2f}"
        )
        return 0
    _, _, report = run_pmp(
        config, seed=seed, out_dir=out, stages=args.stages, sparsity=args.sparsity
    )
    acc = report.metrics["accuracy"]
    print(
        f"seed {seed}: {report.metrics['stage_params']['final']} params "
        f"({report.metrics['final_param_fraction']:.3f}x), "
        f"accuracy {acc['mean']:.2f}% CI [{acc['ci_low']:.2f}, {acc['ci_high']:.2f}]"
    )
    print(report.out_dir)
    return 0


def cmd_prune(args) -> int:
    config = load_config(args)
    net = load_checkpoint(args.checkpoint)
    if args.data:
        ds = load_dataset(args.data)
    else:
        ds, _ = _pipeline.make_datasets(config, config.seeds[0])
    table = build_importance_table(net, ds.images, ds.labels, config.dacis, config.seeds[0])
    thresholds, protection = _pipeline._score_inputs(config, net, ds)
    sparsity = args.sparsity if args.sparsity is not None else config.total_sparsity
    if not 0 < sparsity < 1:
        raise ConfigError(f"--sparsity must be in (0, 1), got {sparsity}")
    mask = select_prune_set(net, table.scores(), thresholds, 1.0 - sparsity, protection)
    packed = repack_network(net, mask)
    rows = retention_table(net, mask)
    for row in rows:
        print(f"{row['layer']}: {row['retained']}/{row['channels']} ({row['fraction']})")
    if args.dry_run:
        return 0
    out = _out_dir(args, config, "prune")
    out.mkdir(parents=True, exist_ok=True)
    (out / "mask.json").write_text(mask_to_json(mask))
    save_checkpoint(packed, out / "pruned.npz")
    (out / "table.json").write_text(table.to_json())
    print(out)
    return 0


def cmd_eval(args) -> int:
    config = load_config(args)
    net = load_checkpoint(args.checkpoint)
    if args.data:
        ds = load_dataset(args.data)
    else:
        _, ds = _pipeline.make_datasets(config, args.seed if args.seed is not None else config.seeds[0])
    stats = episodic_eval(
        net,
        ds,
        n_way=config.n_way,
        k_shot=config.k_shot,
        n_query=config.n_query,
        episodes=args.episodes or config.eval_episodes,
        seed=args.seed if args.seed is not None else config.seeds[0],
    )
    print(
        f"{stats.mean:.2f}% over {len(stats.records)} episodes, "
        f"CI [{stats.ci[0]:.2f}, {stats.ci[1]:.2f}]"
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(
            json.dumps(stats.to_dict(), sort_keys=True, indent=2) + "\n"
        )
        print(out / "eval.json")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args)
    summary = run_ablation(config, args.variant, out_dir=args.out)
    print(
        f"{args.variant}: baseline {summary['baseline_mean']:.2f}% -> "
        f"variant {summary['variant_mean']:.2f}% (delta {summary['delta']:+.2f})"
    )
    return 0


def cmd_sams(args) -> int:
    config = load_config(args)
    regimes = tuple(int(r) for r in args.regimes.split(","))
    rows = run_sams(config, regimes=regimes, out_dir=args.out)
    for row in rows:
        if "failed" in row:
            print(f"{row['regime']}-shot: FAILED ({row['failed']})")
        else:
            print(
                f"{row['regime']}-shot: s={row['sparsity']} params={row['final_params']} "
                f"acc={row['accuracy']['mean']:.2f}%"
            )
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    metrics_path = run / "metrics.json"
    if not metrics_path.exists():
        raise ConfigError(f"no metrics.json under {run}")
    metrics = json.loads(metrics_path.read_text())
    path = write_report(run, metrics, plots=args.plots)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunemeta",
        description="Channel pruning with episodic meta-learning on synthetic leaf data.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument(
                "--set",
                action="append",
                metavar="KEY=VALUE",
                help="override a config field (JSON-parsed value); repeatable",
            )
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("generate", help="write synthetic train/eval datasets to disk")
    common(p)
    p.add_argument("--split", choices=("train", "eval", "both"), default="both")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the full prune/meta-learn/prune pipeline")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--stages", choices=("three", "two", "single"), default="three")
    p.add_argument("--sparsity", type=float, help="override the total sparsity budget")
    p.add_argument("--sweep", action="store_true", help="run every configured seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="one scoring + prune pass over a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: generated train set)")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--dry-run", action="store_true", help="print retention only")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: generated eval set)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="baseline vs variant under shared seeds")
    common(p)
    p.add_argument("--variant", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sams", help="per-shot-regime capacity matrix")
    common(p)
    p.add_argument("--regimes", default="1,5,10")
    p.set_defaults(func=cmd_sams)

    p = sub.add_parser("report", help="regenerate report.md from a run's metrics.json")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("PRUNEMETA_THREADS")
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            print(f"config error: PRUNEMETA_THREADS must be an int, got {threads!r}", file=sys.stderr)
            return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps everything else to 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
