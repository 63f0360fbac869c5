"""
Command-line entry point.

    python main.py train      [--config run.json] [--output DIR] [--seed N] [--steps N] [--resume CKPT]
    python main.py probe      CKPT [--ops hflip,vflip] [--n 256] [--kinds rel_pos_h] [--output FILE]
    python main.py verify     {theorem1,prop2,prop3,axiom,group} [...]
    python main.py report     RUN_DIR [--output DIR]
    python main.py gen-corpus OUT.jsonl [--n 1000] [--seed 0] [--config run.json]

Exit codes: 0 success, 1 usage/config error, 2 verification violation, 3 runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

import logging_config  # This initializes logging
from config import config
from schemas.config import EnvConfig, TrainConfig
from schemas.records import VerificationSummary
from services.corpus import export_corpus
from services.duality import BUILTIN_IDS, RegistryFormatError, UnknownOperationError, import_registry, resolve_op
from services.policy import CheckpointFormatError, PolicyParams
from services.pool import EmptyProbeSetError, build_probe_set, estimate_consistency
from services.report import ReportInputError, build_report
from services.theory import (
    axiom_suite,
    prop2_suite,
    prop3_summary,
    simulate_potential,
    theorem1_suite,
    verify_group_structure,
)
from services.trainer import OPS_FILE, OutputNotWritableError, TrainingAbortedError, run_training
from utils.jsonl import CorruptJournalError
from utils.structured_logging import cli_logger

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VIOLATION = 2
EXIT_RUNTIME = 3

PROBE_REPORT_FILE = "probe_report.json"


class UsageError(Exception):
    """Raised for invalid command-line input."""


def _print_validation_error(exc: ValidationError) -> None:
    for error in exc.errors():
        location = ".".join(str(part) for part in error["loc"]) or "<root>"
        print(f"config error: {location}: {error['msg']}", file=sys.stderr)


def load_train_config(path: Optional[str]) -> TrainConfig:
    """Read a run configuration; every field has a default so a missing file means ``{}``."""
    if not path:
        return TrainConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    return TrainConfig.model_validate(data)


def _write_summary(summary: VerificationSummary, output: Optional[str]) -> None:
    text = summary.model_dump_json(indent=2)
    if output:
        Path(output).write_text(text, encoding="utf-8")
    print(f"{summary.claim}: {summary.instances} instances, {summary.violations} violations")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    train_config = load_train_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if overrides:
        train_config = TrainConfig.model_validate({**train_config.model_dump(), **overrides})

    output = Path(args.output or Path(config.OUTPUT_DIR) / f"seed_{train_config.seed}")
    result = run_training(train_config, output_dir=output, resume_from=args.resume)
    last = result.metrics[-1] if result.metrics else None
    print(f"run written to {output} ({len(result.metrics)} steps)")
    if last is not None:
        print(f"final step {last.step}: mean_r_acc={last.mean_r_acc:.3f} mean_r_cons={last.mean_r_cons:.3f}")
    return EXIT_OK


def _load_probe_inputs(checkpoint: Path):
    """Policy, env config and (when present) the exported op registry of a checkpoint."""
    policy_path = checkpoint / "policy.json" if checkpoint.is_dir() else checkpoint
    if not policy_path.exists():
        raise UsageError(f"no policy checkpoint at {checkpoint}")
    params = PolicyParams.from_dict(json.loads(policy_path.read_text(encoding="utf-8")))
    env = EnvConfig()
    state_path = policy_path.parent / "state.json"
    if state_path.exists():
        env = TrainConfig.model_validate(json.loads(state_path.read_text(encoding="utf-8"))["config"]).env
    registry = {}
    ops_path = policy_path.parent / OPS_FILE
    if ops_path.exists():
        registry = import_registry(json.loads(ops_path.read_text(encoding="utf-8")))
    return params, env, registry, policy_path.parent


def cmd_probe(args) -> int:
    if args.n <= 0:
        raise UsageError("--n must be a positive integer")
    params, env, registry, checkpoint_dir = _load_probe_inputs(Path(args.checkpoint))

    if args.ops:
        op_ids = [op_id.strip() for op_id in args.ops.split(",") if op_id.strip()]
    else:
        op_ids = list(registry) or list(BUILTIN_IDS)
    try:
        ops = [registry.get(op_id) or resolve_op(op_id) for op_id in op_ids]
    except UnknownOperationError as exc:
        raise UsageError(f"unknown operation id {exc.args[0]!r}") from exc
    kinds = [k.strip() for k in args.kinds.split(",")] if args.kinds else None

    probe_set = build_probe_set(np.random.default_rng(args.seed), args.n, env)

    reports = []
    print(f"{'operation':<32} {'consistency':>11} {'samples':>8}")
    for op in ops:
        try:
            report = estimate_consistency(params, op, probe_set, kinds=kinds)
        except EmptyProbeSetError:
            print(f"{op.id:<32} {'n/a':>11} {0:>8}")
            continue
        reports.append(report)
        print(f"{op.id:<32} {report.consistency:>11.4f} {report.sample_count:>8}")

    output = Path(args.output) if args.output else checkpoint_dir / PROBE_REPORT_FILE
    output.write_text(json.dumps([r.model_dump() for r in reports], indent=2), encoding="utf-8")
    print(f"probe report: {output}")
    return EXIT_OK


def cmd_verify(args) -> int:
    suite = args.suite
    if suite == "theorem1":
        summary = theorem1_suite(n_tasks=args.tasks, seed=args.seed)
    elif suite == "prop2":
        summary = prop2_suite(seed=args.seed)
    elif suite == "prop3":
        trace = simulate_potential(args.M, args.K, args.eps, args.eta, args.tau, steps=args.steps)
        summary = prop3_summary(trace)
        if not trace.condition_met:
            print("prop3: non-convergent, condition K*eps > (M-K)*eta unmet")
    elif suite == "group":
        summary = verify_group_structure(n_samples=args.samples or 1000, seed=args.seed)
    else:
        summary = axiom_suite(
            n_samples=args.samples or config.AXIOM_SAMPLES,
            seed=args.seed,
            n_compositions=args.compositions,
        )
    _write_summary(summary, args.output)
    return EXIT_VIOLATION if summary.violations else EXIT_OK


def cmd_report(args) -> int:
    outputs = build_report(Path(args.run_dir), Path(args.output) if args.output else None)
    for name, path in outputs.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    if args.n <= 0:
        raise UsageError("--n must be a positive integer")
    env = load_train_config(args.config).env
    count = export_corpus(Path(args.output), args.n, args.seed, env)
    print(f"wrote {count} records to {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sage", description="Self-evolving duality-consistency training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run training")
    p.add_argument("--config", help="JSON run configuration (defaults for every missing field)")
    p.add_argument("--output", help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("probe", help="per-operation consistency of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--ops", help="comma-separated op ids (default: the checkpoint ops.json, else all built-ins)")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--kinds", help="comma-separated query kinds to keep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="ProbeReport list as JSON (default: probe_report.json next to the checkpoint)")
    p.set_defaults(handler=cmd_probe)

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("suite", choices=["theorem1", "prop2", "prop3", "axiom", "group"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tasks", type=int, default=100)
    p.add_argument("--samples", type=int)
    p.add_argument("--compositions", type=int, default=0)
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--eps", type=float, default=0.02)
    p.add_argument("--eta", type=float, default=0.004)
    p.add_argument("--tau", type=float, default=0.75)
    p.add_argument("--steps", type=int)
    p.add_argument("--output", help="write the summary JSON here")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("report", help="CSV series from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--output", help="directory for the CSV files (default: run_dir)")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("gen-corpus", help="export a scene/query corpus as JSONL")
    p.add_argument("output")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON run configuration; its env section is used")
    p.set_defaults(handler=cmd_gen_corpus)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    cli_logger.info(action=args.command, status="started", message="command started")
    try:
        code = args.handler(args)
    except ValidationError as exc:
        _print_validation_error(exc)
        code = EXIT_USAGE
    except (UsageError, ReportInputError, CheckpointFormatError, RegistryFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (TrainingAbortedError, OutputNotWritableError, CorruptJournalError, OSError) as exc:
        cli_logger.error(action=args.command, message="command failed", error=exc)
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    cli_logger.info(action=args.command, status="finished", message="command finished", exit_code=code)
    return code


if __name__ == "__main__":
    sys.exit(main())
