"""
Runner module for the durability lab.

Command-line front end over ``durable_lab.harness``: every subcommand reads
an experiment JSON file, resolves its collaborators through ``AppContainer``
and writes under the output root (``--out`` > ``DURABLE_OUTPUT_ROOT`` >
the config's ``output_dir`` > ``runs``).

Exit status:
------------
0  success
1  the experiment finished but at least one run failed
2  configuration, checkpoint or I/O error (one diagnostic line on stderr)
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, List, Sequence

from .attacks import FinetuneConfig
from .container import AppContainer
from .datagen import export_csv
from .errors import ConfigError, LabError
from .experiment import SWEEP_AXES, ExperimentConfig
from .factmodel import load_params
from .harness import ablation_suite, evaluate, report_from_store, run_experiment
from .logger import attach_run_log, detach_run_log, get_logger
from .quantsim import noise_report

logger = get_logger(__name__)


def _parse_value(raw: str) -> Any:
    try:
        return float(raw)
    except ValueError:
        return raw


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="durable_lab", description="Quantization-recovery lab for machine unlearning."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="experiment JSON file")
        p.add_argument("--seed", type=int, action="append", help="run only this seed (repeatable)")
        p.add_argument("--method", action="append", help="run only this method label (repeatable)")
        p.add_argument("--out", type=Path, help="output root")
        return p

    experiment_command("pretrain", "pretrain and cache theta0 for every seed")
    experiment_command("unlearn", "unlearn and evaluate every method without attacks")
    p = experiment_command("evaluate", "evaluate a stored checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    experiment_command("attack", "unlearn, evaluate and run the configured attacks")
    p = experiment_command("sweep", "sweep one SAF knob and write frontier.csv")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", nargs="+", help="axis values (default: built-in grid)")
    experiment_command("ablate", "warmup, STE-scope and lambda ablations")
    experiment_command("export-data", "write the synthetic facts as CSV")

    p = sub.add_parser("report", help="rebuild aggregate reports from stored run records")
    p.add_argument("--dir", required=True, type=Path)
    p.add_argument("--name", help="experiment name in summary.json")

    p = sub.add_parser("publish", help="upload stored run records to S3")
    p.add_argument("--dir", required=True, type=Path)
    p.add_argument("--experiment", help="key component (default: directory name)")
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.method:
        cfg = cfg.with_methods(args.method)
    if args.seed:
        cfg = cfg.with_seeds(args.seed)
    return cfg


def _output_root(args: argparse.Namespace, c: AppContainer, cfg: ExperimentConfig) -> Path:
    return Path(args.out or c.config().output_root or cfg.output_dir or "runs")


def _finish(records: Sequence[Any]) -> int:
    failed = sum(1 for r in records if not r.ok)
    return 1 if failed else 0


def run(args: argparse.Namespace, c: AppContainer | None = None) -> int:
    """Execute one parsed command; returns the exit status."""
    c = c or AppContainer()

    if args.command == "report":
        store = c.report_store(root=args.dir)
        records = report_from_store(store, args.name)
        logger.info("rebuilt reports from %d run records under %s", len(records), args.dir)
        return 0

    if args.command == "publish":
        store = c.report_store(root=args.dir)
        records = store.run_records()
        if not records:
            raise ConfigError("dir", f"no run records under {args.dir}")
        key = c.publisher().publish(records, experiment=args.experiment or args.dir.name)
        logger.info("Upload done: %s", key)
        return 0

    cfg = _load(args)
    root = _output_root(args, c, cfg)
    store = c.report_store(root=root)
    handler = attach_run_log(root / "logs" / "run.log")
    try:
        logger.info("=== %s ===  config=%s  out=%s", args.command, args.config, root)
        return _dispatch(args, c, cfg, store)
    finally:
        detach_run_log(handler)


def _dispatch(args: argparse.Namespace, c: AppContainer, cfg: ExperimentConfig, store: Any) -> int:
    if args.command == "export-data":
        lab = c.lab(cfg=cfg, store=store)
        for seed in cfg.seeds:
            store.write_text(f"data/facts_{seed}.csv", export_csv(lab.dataset(seed)))
        return 0

    if args.command == "pretrain":
        lab = c.lab(cfg=cfg, store=store)
        summaries = [lab.pretrain_summary(seed) for seed in cfg.seeds]
        store.write_json("reports/pretrain.json", {"experiment": cfg.name, "seeds": summaries})
        for s in summaries:
            logger.info("theta0 seed=%d fa=%.3f ra=%.3f -> %s", s["seed"], s["fa"], s["ra"], s["checkpoint"])
        return 0

    if args.command == "evaluate":
        lab = c.lab(cfg=cfg, store=store)
        params = load_params(args.checkpoint)
        out: List[dict] = []
        for seed in cfg.seeds:
            report = evaluate(params, lab.dataset(seed), cfg)
            out.append({"seed": seed, "report": report.to_dict()})
        store.write_json(
            f"reports/evaluate_{args.checkpoint.stem}.json",
            {
                "checkpoint": str(args.checkpoint),
                "noise": noise_report(params, (cfg.int4, cfg.int8)),
                "per_seed": out,
            },
        )
        return 0

    if args.command == "unlearn":
        cfg = replace(cfg, attacks=replace(cfg.attacks, quant=False, finetune=None, adapter_vs_merged=False))
    elif args.command == "attack":
        if cfg.attacks.finetune is None:
            cfg = replace(cfg, attacks=replace(cfg.attacks, finetune=FinetuneConfig()))
    elif args.command == "sweep":
        values = None if args.values is None else [_parse_value(v) for v in args.values]
        cfg = cfg.with_sweep(args.axis, values)
    elif args.command == "ablate":
        lab = c.lab(cfg=cfg, store=store)
        results = ablation_suite(lab)
        return _finish([r for records in results.values() for r in records])

    lab = c.lab(cfg=cfg, store=store)
    return _finish(run_experiment(lab))


def main(argv: Sequence[str] | None = None, container: AppContainer | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args, container)
    except (LabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def cli() -> None:
    """
    Command-line entrypoint for the lab.

    Used by ``python -m durable_lab``.
    """
    sys.exit(main())


if __name__ == "__main__":
    cli()
