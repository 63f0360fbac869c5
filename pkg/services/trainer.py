"""
Self-evolving consistency training loop.

Per step:
  1. sample (scene, query) and its oracle answer
  2. G primary completions
  3. pick at most one pool operation; if picked, G/2 completions on the dual input
  4. rewards, group advantages, one GRPO update; with dual_gradient the dual
     completions add their own accuracy/format policy-gradient term
  5. every E steps: probe the whole pool and apply lifecycle transitions

Two random streams are kept apart: the primary stream (examples + primary
completions) and the consistency stream (operation selection + dual
completions). With lam = 0 the dual-side term is skipped too, so the parameter
trajectory is the same as plain GRPO on the same seed.
"""

import json
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import config as app_config
from schemas.config import TrainConfig
from schemas.records import JournalEntry, ProbeLogEntry, ProbeReport, RunManifest, StepMetrics
from services.corpus import load_corpus
from services.duality import apply, builtin_pool, discover_candidates, import_registry
from services.policy import NonFiniteScoreError, PolicyParams, biased_init, kl_to_reference, sample_completions
from services.pool import PoolState, apply_transitions, build_probe_set, initial_pool, probe_pool, select_for_step
from services.rewards_grpo import (
    PolicyUpdateError,
    consistency_reward,
    group_advantages,
    grpo_update,
    total_reward,
)
from services.scene_env import Query, Scene, ground_truth, sample_example
from utils.jsonl import JsonlAppender
from utils.prometheus import Counter, Histogram, write_snapshot
from utils.structured_logging import to_jsonable, trainer_logger

TOOL_VERSION = "0.1.0"
CHECKPOINT_SCHEMA = 1
OPS_FILE = "ops.json"

generation_calls_total = Counter(
    "sage_generation_calls_total",
    "Completions sampled by the trainer",
    ["role"],
)
train_step_seconds = Histogram(
    "sage_train_step_seconds",
    "Wall time of one training step",
)


class TrainingAbortedError(RuntimeError):
    """Raised when training stops on a non-finite update; a diagnostic checkpoint is written first."""

    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class OutputNotWritableError(RuntimeError):
    """Raised when the run directory cannot be created or written."""


@dataclass
class TrainerState:
    step: int
    params: PolicyParams
    ref_params: PolicyParams
    pool: PoolState
    primary_rng: np.random.Generator
    consistency_rng: np.random.Generator
    probe_set: List[Tuple[Scene, Query]] = field(default_factory=list)
    corpus: Optional[List[Tuple[Scene, Query]]] = None


@dataclass
class TrainingResult:
    params: PolicyParams
    metrics: List[StepMetrics]
    journal: List[JournalEntry]
    output_dir: Optional[Path] = None


def _seed_streams(seed: int) -> Dict[str, np.random.SeedSequence]:
    names = ("init", "primary", "consistency", "probe", "discovery")
    return dict(zip(names, np.random.SeedSequence(seed).spawn(len(names))))


def build_pool(config: TrainConfig, probe_set: Sequence[Tuple[Scene, Query]], rng: np.random.Generator) -> PoolState:
    """Built-ins (initial actives first) plus verified depth-2 compositions up to M members."""
    if not config.pool_enabled:
        return PoolState()
    pool_cfg = config.pool
    builtins = builtin_pool()
    first = [op for op in builtins if op.id in pool_cfg.initial_active]
    ops = first + [op for op in builtins if op.id not in pool_cfg.initial_active]
    ops = ops[: pool_cfg.M]
    if pool_cfg.discover_candidates and len(ops) < pool_cfg.M:
        ops += discover_candidates(
            probe_set,
            limit=pool_cfg.M - len(ops),
            rng=rng,
            verify_samples=pool_cfg.discovery_verify_samples,
            config=config.env,
            exclude=ops,
        )
    return initial_pool(ops, pool_cfg)


def init_state(config: TrainConfig) -> TrainerState:
    streams = _seed_streams(config.seed)
    params = biased_init(
        np.random.default_rng(streams["init"]),
        config.policy.bias_strength,
        init_scale=config.policy.init_scale,
        hidden_units=config.policy.hidden_units,
        format_logit=config.policy.format_logit,
    )
    probe_set = build_probe_set(np.random.default_rng(streams["probe"]), config.pool.probe_size, config.env)
    pool = build_pool(config, probe_set, np.random.default_rng(streams["discovery"]))
    corpus = load_corpus(Path(config.env.corpus_path)) if config.env.corpus_path else None
    return TrainerState(
        step=0,
        params=params,
        ref_params=params.copy(),
        pool=pool,
        primary_rng=np.random.default_rng(streams["primary"]),
        consistency_rng=np.random.default_rng(streams["consistency"]),
        probe_set=probe_set,
        corpus=corpus,
    )


def _draw_example(state: TrainerState, config: TrainConfig) -> Tuple[Scene, Query]:
    if state.corpus:
        return state.corpus[int(state.primary_rng.integers(0, len(state.corpus)))]
    return sample_example(state.primary_rng, config.env)


def train_step(state: TrainerState, config: TrainConfig) -> Tuple[TrainerState, StepMetrics, List[ProbeReport]]:
    """
    One training step. The state is only advanced after the update succeeded;
    on error the parameters are left untouched.
    """
    group = config.group_size
    scene, query = _draw_example(state, config)
    truth = ground_truth(scene, query)
    completions = sample_completions(state.params, scene, query, group, state.primary_rng)
    calls = group
    generation_calls_total.labels(role="primary").inc(group)

    active_ops = state.pool.active_ids()
    selected = None
    spot_checked = False
    r_cons = [0.0] * group
    dual_batch = None
    if config.pool_enabled:
        selection = select_for_step(state.pool, scene, query, state.consistency_rng, config.pool)
        selected, spot_checked = selection.op, selection.spot_checked

    if selected is not None:
        dual_scene, dual_query = apply(selected, scene, query)
        duals = sample_completions(state.params, dual_scene, dual_query, group // 2, state.consistency_rng)
        calls += group // 2
        generation_calls_total.labels(role="dual").inc(group // 2)
        r_cons = [
            consistency_reward(selected, c, duals, query, dual_query, config.lam) for c in completions
        ]
        # no dual-side term at lam = 0 (machinery inert) or with a single dual completion
        if config.dual_gradient and config.lam > 0 and len(duals) > 1:
            dual_truth = ground_truth(dual_scene, dual_query)
            dual_rewards = [total_reward(d, dual_truth).total for d in duals]
            dual_adv = group_advantages(dual_rewards)
            dual_batch = (dual_scene, dual_query, duals, dual_adv.advantages)

    breakdowns = [total_reward(c, truth, rc) for c, rc in zip(completions, r_cons)]
    advantages = group_advantages([b.total for b in breakdowns])
    kl, _ = kl_to_reference(state.params, state.ref_params, scene, query)

    new_params = grpo_update(
        state.params,
        state.ref_params,
        scene,
        query,
        completions,
        advantages.advantages,
        beta=config.beta,
        lr=config.lr,
        dual_batch=dual_batch,
    )
    state.params = new_params
    state.step += 1

    reports: List[ProbeReport] = []
    if config.pool_enabled and state.step % config.pool.E == 0:
        reports = probe_pool(state.params, state.pool, state.probe_set, state.step)
        apply_transitions(state.pool, reports, config.pool, state.step)

    metrics = StepMetrics(
        step=state.step,
        mean_r_acc=float(np.mean([b.r_acc for b in breakdowns])),
        mean_r_fmt=float(np.mean([b.r_fmt for b in breakdowns])),
        mean_r_cons=float(np.mean([b.r_cons for b in breakdowns])),
        mean_total=float(np.mean([b.total for b in breakdowns])),
        kl=float(kl),
        selected_op=selected.id if selected is not None else None,
        spot_check=spot_checked,
        degenerate=advantages.degenerate,
        generation_calls=calls,
        active_ops=active_ops,
    )
    return state, metrics, reports


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(to_jsonable(data), indent=2, sort_keys=True), encoding="utf-8")


def save_checkpoint(state: TrainerState, config: TrainConfig, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_json(directory / "policy.json", state.params.to_dict())
    _write_json(directory / "reference.json", state.ref_params.to_dict())
    _write_json(directory / "pool.json", state.pool.to_dict())
    _write_json(directory / OPS_FILE, state.pool.registry())
    _write_json(
        directory / "rng.json",
        {
            "primary": state.primary_rng.bit_generator.state,
            "consistency": state.consistency_rng.bit_generator.state,
        },
    )
    _write_json(
        directory / "state.json",
        {"step": state.step, "schema_version": CHECKPOINT_SCHEMA, "config": config.model_dump()},
    )
    return directory


def _restore_rng(data: Dict[str, Any]) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = data
    return rng


def load_checkpoint(directory: Path) -> Tuple[TrainerState, TrainConfig]:
    """Rebuild the trainer state; the probe set and corpus are regenerated from the saved config."""
    directory = Path(directory)
    meta = json.loads((directory / "state.json").read_text(encoding="utf-8"))
    if meta.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {meta.get('schema_version')!r}")
    config = TrainConfig.model_validate(meta["config"])
    registry = None
    if (directory / OPS_FILE).exists():
        registry = import_registry(json.loads((directory / OPS_FILE).read_text(encoding="utf-8")))
    rngs = json.loads((directory / "rng.json").read_text(encoding="utf-8"))
    streams = _seed_streams(config.seed)
    probe_set = build_probe_set(np.random.default_rng(streams["probe"]), config.pool.probe_size, config.env)
    state = TrainerState(
        step=int(meta["step"]),
        params=PolicyParams.from_dict(json.loads((directory / "policy.json").read_text(encoding="utf-8"))),
        ref_params=PolicyParams.from_dict(json.loads((directory / "reference.json").read_text(encoding="utf-8"))),
        pool=PoolState.from_dict(json.loads((directory / "pool.json").read_text(encoding="utf-8")), registry),
        primary_rng=_restore_rng(rngs["primary"]),
        consistency_rng=_restore_rng(rngs["consistency"]),
        probe_set=probe_set,
        corpus=load_corpus(Path(config.env.corpus_path)) if config.env.corpus_path else None,
    )
    return state, config


def checkpoint_dir(output_dir: Path, step: int) -> Path:
    return Path(output_dir) / "checkpoints" / f"step_{step:06d}"


# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------

def _prepare_output(output_dir: Path) -> Path:
    output_dir = Path(output_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        probe = output_dir / ".write_test"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise OutputNotWritableError(f"cannot write to {output_dir}: {exc}") from exc
    return output_dir


def _write_manifest(path: Path, manifest: RunManifest) -> None:
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def run_training(
    config: TrainConfig,
    output_dir: Optional[Path] = None,
    resume_from: Optional[Path] = None,
) -> TrainingResult:
    """
    Run (or resume) training to ``config.total_steps``.

    Without ``output_dir`` nothing is written to disk. With it the run directory
    receives metrics.jsonl, lifecycle.jsonl, probes.jsonl, ops.json, manifest.json,
    checkpoints/step_NNNNNN/ and (when enabled) prometheus.txt.

    Raises:
        OutputNotWritableError: output_dir cannot be written
        TrainingAbortedError: an update produced non-finite values
    """
    if resume_from is not None:
        state, saved = load_checkpoint(Path(resume_from))
        # only the horizon may change on resume
        config = saved.model_copy(update={"total_steps": config.total_steps})
    else:
        state = init_state(config)

    out = _prepare_output(output_dir) if output_dir is not None else None
    metrics: List[StepMetrics] = []
    journal_written = len(state.pool.journal) if resume_from is not None else 0

    metrics_log = journal_log = probes_log = None
    manifest = None
    if out is not None:
        fresh = resume_from is None
        metrics_log = JsonlAppender(out / "metrics.jsonl", truncate=fresh)
        journal_log = JsonlAppender(out / "lifecycle.jsonl", truncate=fresh)
        probes_log = JsonlAppender(out / "probes.jsonl", truncate=fresh)
        manifest = RunManifest(
            config=config.model_dump(),
            seed=config.seed,
            tool_version=TOOL_VERSION,
            started_at=datetime.now(timezone.utc),
            outputs={
                "metrics": "metrics.jsonl",
                "lifecycle": "lifecycle.jsonl",
                "probes": "probes.jsonl",
                "ops": OPS_FILE,
                "checkpoints": "checkpoints",
            },
            resumed_from=str(resume_from) if resume_from is not None else None,
        )
        _write_manifest(out / "manifest.json", manifest)
        _write_json(out / OPS_FILE, state.pool.registry())

    trainer_logger.info(
        action="run_training",
        status="started",
        message="training started",
        step=state.step,
        total_steps=config.total_steps,
        pool=list(state.pool.records),
    )

    def flush_journal():
        nonlocal journal_written
        if journal_log is not None:
            for entry in state.pool.journal[journal_written:]:
                journal_log.append(entry.model_dump())
        journal_written = len(state.pool.journal)

    last_saved = None
    try:
        flush_journal()
        while state.step < config.total_steps:
            started = time.perf_counter()
            try:
                state, step_metrics, reports = train_step(state, config)
            except (PolicyUpdateError, NonFiniteScoreError) as exc:
                diagnostic = None
                if out is not None:
                    diagnostic = save_checkpoint(state, config, out / "checkpoints" / f"diagnostic_step_{state.step:06d}")
                trainer_logger.error(
                    action="train_step",
                    message="non-finite update, training aborted",
                    error=exc,
                    step=state.step,
                    checkpoint=str(diagnostic) if diagnostic else None,
                )
                raise TrainingAbortedError(str(exc), checkpoint=diagnostic) from exc
            train_step_seconds.observe(time.perf_counter() - started)

            metrics.append(step_metrics)
            if metrics_log is not None:
                metrics_log.append(step_metrics.model_dump())
            flush_journal()
            if probes_log is not None:
                for report in reports:
                    probes_log.append(
                        ProbeLogEntry(
                            step=report.step,
                            op_id=report.op_id,
                            consistency=report.consistency,
                            sample_count=report.sample_count,
                            state=state.pool.records[report.op_id].state,
                        ).model_dump()
                    )

            if state.step % config.log_every == 0:
                trainer_logger.info(
                    action="train_progress",
                    message=f"step {state.step}/{config.total_steps}",
                    step=state.step,
                    mean_r_acc=step_metrics.mean_r_acc,
                    mean_r_cons=step_metrics.mean_r_cons,
                    kl=step_metrics.kl,
                    active_ops=state.pool.active_ids(),
                )
            if out is not None and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, config, checkpoint_dir(out, state.step))
                last_saved = state.step
                trainer_logger.info(action="checkpoint", message="checkpoint written", step=state.step)

        if out is not None and last_saved != state.step:
            save_checkpoint(state, config, checkpoint_dir(out, state.step))
    finally:
        for appender in (metrics_log, journal_log, probes_log):
            if appender is not None:
                appender.close()

    if out is not None:
        if app_config.METRICS_ENABLED:
            write_snapshot(out / "prometheus.txt")
            manifest.outputs["prometheus"] = "prometheus.txt"
        manifest.finished_at = datetime.now(timezone.utc)
        _write_manifest(out / "manifest.json", manifest)

    trainer_logger.info(action="run_training", status="finished", message="training finished", step=state.step)
    return TrainingResult(params=state.params, metrics=metrics, journal=list(state.pool.journal), output_dir=out)
