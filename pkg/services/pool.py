"""
Self-evolving operation pool.

Lifecycle per operation: Candidate -> Active -> Mastered (retire), Mastered ->
Candidate (forgetting detected), Candidate -> Active (promote to fill a slot).
Transitions only happen at evaluation checkpoints, from probe results.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from schemas.config import EnvConfig, PoolConfig
from schemas.records import JournalEntry, ProbeReport
from services.duality import (
    DualityOp,
    RegistryFormatError,
    applicable,
    apply,
    export_registry,
    map_answer,
    resolve_op,
)
from services.policy import PolicyParams, greedy_answer
from services.scene_env import Query, Scene, sample_example
from utils.prometheus import Counter
from utils.structured_logging import pool_logger

CANDIDATE = "Candidate"
ACTIVE = "Active"
MASTERED = "Mastered"
STATES = (CANDIDATE, ACTIVE, MASTERED)

# fração de tau abaixo da qual um op dominado volta a ser candidato
FORGET_FACTOR = 0.8
NOVELTY_EVALS = 3

lifecycle_transitions_total = Counter(
    "sage_lifecycle_transitions_total",
    "Pool lifecycle transitions",
    ["from_state", "to_state"],
)
spot_checks_total = Counter(
    "sage_spot_checks_total",
    "Steps where a mastered operation was temporarily re-exercised",
)


class EmptyProbeSetError(ValueError):
    """Raised when no probe pair lies in an operation's domain."""


@dataclass
class OpRecord:
    op: DualityOp
    state: str = CANDIDATE
    last_consistency: float = 0.0
    history: List[Tuple[int, float]] = field(default_factory=list)
    n_evals: int = 0
    priority: float = 0.0

    @property
    def op_id(self) -> str:
        return self.op.id


@dataclass
class PoolState:
    records: Dict[str, OpRecord] = field(default_factory=dict)
    journal: List[JournalEntry] = field(default_factory=list)

    def in_state(self, state: str) -> List[OpRecord]:
        return [record for record in self.records.values() if record.state == state]

    def active(self) -> List[OpRecord]:
        return self.in_state(ACTIVE)

    def mastered(self) -> List[OpRecord]:
        return self.in_state(MASTERED)

    def candidates(self) -> List[OpRecord]:
        return self.in_state(CANDIDATE)

    def active_ids(self) -> List[str]:
        return [record.op_id for record in self.active()]

    def to_dict(self) -> Dict:
        return {
            "records": [
                {
                    "op_id": r.op_id,
                    "state": r.state,
                    "last_consistency": r.last_consistency,
                    "history": [[step, value] for step, value in r.history],
                    "n_evals": r.n_evals,
                    "priority": r.priority,
                }
                for r in self.records.values()
            ],
            "journal": [entry.model_dump() for entry in self.journal],
        }

    def registry(self) -> List[Dict]:
        """Exported operation registry of the pool members."""
        return export_registry([record.op for record in self.records.values()])

    @classmethod
    def from_dict(cls, data: Dict, registry: Optional[Dict[str, DualityOp]] = None) -> "PoolState":
        """
        Restore a pool. With ``registry`` every member must be listed in it;
        without one the ops are rebuilt from their ids.
        """
        state = cls()
        for item in data.get("records", []):
            op_id = item["op_id"]
            if registry is None:
                op = resolve_op(op_id)
            elif op_id in registry:
                op = registry[op_id]
            else:
                raise RegistryFormatError(f"pool member {op_id} missing from the operation registry")
            record = OpRecord(
                op=op,
                state=item["state"],
                last_consistency=float(item["last_consistency"]),
                history=[(int(s), float(v)) for s, v in item.get("history", [])],
                n_evals=int(item["n_evals"]),
                priority=float(item["priority"]),
            )
            state.records[record.op_id] = record
        state.journal = [JournalEntry(**entry) for entry in data.get("journal", [])]
        return state


def priority(record: OpRecord, gamma: float) -> float:
    """p = (1 - C) + gamma * [n_evals < 3]"""
    bonus = gamma if record.n_evals < NOVELTY_EVALS else 0.0
    return (1.0 - record.last_consistency) + bonus


def _change_state(state: PoolState, record: OpRecord, to_state: str, step: int) -> None:
    entry = JournalEntry(
        step=step,
        op_id=record.op_id,
        from_state=record.state,
        to_state=to_state,
        consistency=record.last_consistency,
    )
    state.journal.append(entry)
    lifecycle_transitions_total.labels(from_state=record.state, to_state=to_state).inc()
    pool_logger.info(
        action="transition",
        message=f"{record.state} -> {to_state}",
        step=step,
        op_id=record.op_id,
        consistency=record.last_consistency,
    )
    record.state = to_state


def _promote(state: PoolState, config: PoolConfig, step: int) -> None:
    while len(state.active()) < config.K:
        candidates = state.candidates()
        if not candidates:
            return
        best = min(candidates, key=lambda r: (-r.priority, r.op_id))
        _change_state(state, best, ACTIVE, step)


def initial_pool(ops: Sequence[DualityOp], config: PoolConfig, step: int = 0) -> PoolState:
    """
    All ``ops`` start as Candidates and only ``config.initial_active`` is
    activated. Free slots are filled at the first checkpoint.
    """
    state = PoolState()
    for op in ops[: config.M]:
        record = OpRecord(op=op)
        record.priority = priority(record, config.gamma)
        state.records[op.id] = record
    for op_id in config.initial_active:
        record = state.records.get(op_id)
        if record is not None and record.state == CANDIDATE and len(state.active()) < config.K:
            _change_state(state, record, ACTIVE, step)
    return state


def apply_transitions(
    state: PoolState,
    reports: Iterable[ProbeReport],
    config: PoolConfig,
    step: int,
) -> PoolState:
    """
    Checkpoint update, in order:
      1. record every probe (consistency, history, n_evals)
      2. Active -> Mastered when C >= tau; Mastered -> Candidate when C < 0.8 tau
      3. refresh priorities
      4. promote highest-priority Candidates (ties by op id) while Active < K
    """
    probed = set()
    for report in reports:
        record = state.records.get(report.op_id)
        if record is None:
            continue
        record.last_consistency = report.consistency
        record.history.append((step, report.consistency))
        record.n_evals += 1
        probed.add(record.op_id)

    forget_below = FORGET_FACTOR * config.tau
    for record in list(state.records.values()):
        if record.op_id not in probed:
            continue
        if record.state == ACTIVE and record.last_consistency >= config.tau:
            _change_state(state, record, MASTERED, step)
        elif record.state == MASTERED and record.last_consistency < forget_below:
            _change_state(state, record, CANDIDATE, step)

    for record in state.records.values():
        record.priority = priority(record, config.gamma)

    _promote(state, config, step)
    return state


def build_probe_set(rng: np.random.Generator, size: int, env: EnvConfig) -> List[Tuple[Scene, Query]]:
    return [sample_example(rng, env) for _ in range(size)]


def estimate_consistency(
    params: PolicyParams,
    op: DualityOp,
    probe_set: Sequence[Tuple[Scene, Query]],
    kinds: Optional[Sequence[str]] = None,
    step: int = 0,
) -> ProbeReport:
    """
    Fraction of in-domain probe pairs where the greedy dual answer equals the
    mapped greedy original answer.

    Raises:
        EmptyProbeSetError: no probe pair is in the domain (after the ``kinds`` filter)
    """
    consistent = 0
    total = 0
    for scene, query in probe_set:
        if kinds is not None and query.kind not in kinds:
            continue
        if not applicable(op, scene, query):
            continue
        dual_scene, dual_query = apply(op, scene, query)
        answer = greedy_answer(params, scene, query)
        dual_answer = greedy_answer(params, dual_scene, dual_query)
        if dual_answer == map_answer(op, query, dual_query, answer):
            consistent += 1
        total += 1
    if total == 0:
        raise EmptyProbeSetError(f"no probe pair in the domain of {op.id}")
    return ProbeReport(
        op_id=op.id,
        consistency=consistent / total,
        consistent_count=consistent,
        sample_count=total,
        step=step,
    )


def probe_pool(
    params: PolicyParams,
    state: PoolState,
    probe_set: Sequence[Tuple[Scene, Query]],
    step: int,
) -> List[ProbeReport]:
    """Probe every pool member; members with an empty probe domain are skipped with a warning."""
    reports = []
    for record in state.records.values():
        try:
            reports.append(estimate_consistency(params, record.op, probe_set, step=step))
        except EmptyProbeSetError as exc:
            pool_logger.warning(action="probe", message=str(exc), step=step, op_id=record.op_id)
    return reports


@dataclass(frozen=True)
class Selection:
    op: Optional[DualityOp]
    spot_checked: bool = False


def select_for_step(
    state: PoolState,
    scene: Scene,
    query: Query,
    rng: np.random.Generator,
    config: PoolConfig,
) -> Selection:
    """
    Pick at most one operation for this step.

    The spot-check uniform is always drawn first. With probability p_f (and a
    non-empty Mastered set) one Mastered op joins the working set for this step
    only, so the working set holds at most K + 1 ops. The working set is
    filtered by applicability and one op is drawn with weights max(p_i, floor).
    """
    working = state.active()
    spot_checked = False
    draw = rng.random()
    mastered = state.mastered()
    if draw < config.p_f and mastered:
        working = working + [mastered[int(rng.integers(0, len(mastered)))]]
        spot_checked = True
        spot_checks_total.inc()

    eligible = [record for record in working if applicable(record.op, scene, query)]
    if not eligible:
        return Selection(op=None, spot_checked=spot_checked)

    weights = np.maximum(np.array([r.priority for r in eligible], dtype=float), config.weight_floor)
    if weights.sum() <= 0:
        weights = np.ones(len(eligible))
    index = int(rng.choice(len(eligible), p=weights / weights.sum()))
    return Selection(op=eligible[index].op, spot_checked=spot_checked)
