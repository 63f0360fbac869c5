"""
Operation pool: consistency probing, priorities, lifecycle transitions and per-step selection.
"""

import os
import sys

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from schemas.config import EnvConfig, PoolConfig
from schemas.records import ProbeReport
from services.duality import RegistryFormatError, builtin_pool, import_registry, resolve_op
from services.policy import POSITION0, oracle_params, zero_params
from services.pool import (
    ACTIVE,
    CANDIDATE,
    MASTERED,
    EmptyProbeSetError,
    OpRecord,
    PoolState,
    apply_transitions,
    build_probe_set,
    estimate_consistency,
    initial_pool,
    priority,
    probe_pool,
    select_for_step,
)
from services.scene_env import QUADRANTS, Descriptor, Query, Scene, SceneObject


def _obj(i, shape, x, y, color="red", size="small"):
    return SceneObject(id=i, shape=shape, color=color, x=x, y=y, size=size)


SCENE = Scene(8, (_obj(0, "circle", 1, 3), _obj(1, "square", 5, 3, color="blue")))
LEFT_RIGHT = Query("rel_pos_h", Descriptor("circle"), Descriptor("square"), ("left", "right"))
QUADRANT = Query("quadrant", Descriptor("circle"), None, QUADRANTS)


def _pool(*entries, gamma=0.5):
    """entries: (op_id, state, consistency, n_evals)"""
    state = PoolState()
    for op_id, op_state, consistency, n_evals in entries:
        record = OpRecord(op=resolve_op(op_id), state=op_state, last_consistency=consistency, n_evals=n_evals)
        record.priority = priority(record, gamma)
        state.records[op_id] = record
    return state


def _report(op_id, consistency, samples=100):
    return ProbeReport(
        op_id=op_id,
        consistency=consistency,
        consistent_count=int(round(consistency * samples)),
        sample_count=samples,
    )


@pytest.fixture(scope="module")
def probe_set():
    return build_probe_set(np.random.default_rng(0), 120, EnvConfig())


class TestPriority:
    def test_new_inconsistent_op(self):
        record = OpRecord(op=resolve_op("hflip"), last_consistency=0.2, n_evals=1)
        assert priority(record, 0.5) == pytest.approx(1.3)

    def test_explored_consistent_op(self):
        record = OpRecord(op=resolve_op("hflip"), last_consistency=1.0, n_evals=5)
        assert priority(record, 0.5) == 0.0

    def test_maximum(self):
        record = OpRecord(op=resolve_op("hflip"))
        assert priority(record, 0.5) == pytest.approx(1.5)


class TestInitialPool:
    def test_default_actives(self):
        state = initial_pool(builtin_pool(), PoolConfig())
        assert sorted(state.active_ids()) == ["hflip", "option_reverse"]
        assert len(state.candidates()) == 7
        assert [(e.op_id, e.to_state) for e in state.journal] == [("hflip", ACTIVE), ("option_reverse", ACTIVE)]

    def test_pool_size_capped(self):
        state = initial_pool(builtin_pool(), PoolConfig(M=4, K=2))
        assert len(state.records) == 4


class TestTransitions:
    def test_active_above_tau_is_mastered(self):
        state = _pool(("hflip", ACTIVE, 0.3, 1))
        apply_transitions(state, [_report("hflip", 0.80)], PoolConfig(K=1, initial_active=[]), step=100)
        record = state.records["hflip"]
        assert record.state == MASTERED
        assert record.n_evals == 2
        entry = state.journal[-1]
        assert (entry.step, entry.from_state, entry.to_state) == (100, ACTIVE, MASTERED)
        assert entry.consistency == pytest.approx(0.80)

    def test_mastered_below_forget_threshold_is_candidate(self):
        state = _pool(("vflip", MASTERED, 0.9, 4), ("hflip", ACTIVE, 0.2, 4))
        reports = [_report("vflip", 0.55), _report("hflip", 0.3)]
        apply_transitions(state, reports, PoolConfig(K=1, initial_active=[]), step=200)
        assert state.records["vflip"].state == CANDIDATE
        assert state.records["hflip"].state == ACTIVE

    def test_mastered_inside_hysteresis_band_stays(self):
        state = _pool(("vflip", MASTERED, 0.9, 4))
        apply_transitions(state, [_report("vflip", 0.65)], PoolConfig(K=1, initial_active=[]), step=200)
        assert state.records["vflip"].state == MASTERED

    def test_highest_priority_candidate_promoted(self):
        state = _pool(("vflip", CANDIDATE, 0.2, 1), ("hflip", CANDIDATE, 0.6, 5))
        apply_transitions(state, [], PoolConfig(K=1, initial_active=[]), step=100)
        assert state.active_ids() == ["vflip"]
        assert state.records["vflip"].priority == pytest.approx(1.3)
        assert state.records["hflip"].priority == pytest.approx(0.4)

    def test_priority_ties_break_by_op_id(self):
        state = _pool(("vflip", CANDIDATE, 0.0, 0), ("hflip", CANDIDATE, 0.0, 0))
        apply_transitions(state, [], PoolConfig(K=1, initial_active=[]), step=100)
        assert state.active_ids() == ["hflip"]

    def test_active_count_never_exceeds_k(self):
        state = initial_pool(builtin_pool(), PoolConfig())
        reports = [_report(op.id, 0.1) for op in builtin_pool()]
        for step in (100, 200, 300):
            apply_transitions(state, reports, PoolConfig(), step=step)
            assert len(state.active()) <= 3

    def test_round_trip(self):
        state = initial_pool(builtin_pool(), PoolConfig())
        apply_transitions(state, [_report("hflip", 0.9)], PoolConfig(), step=100)
        restored = PoolState.from_dict(state.to_dict())
        assert {k: r.state for k, r in restored.records.items()} == {k: r.state for k, r in state.records.items()}
        assert restored.journal == state.journal

    def test_restore_through_registry(self):
        ops = builtin_pool() + [resolve_op("hflip∘option_cycle")]
        state = initial_pool(ops, PoolConfig())
        registry = import_registry(state.registry())
        restored = PoolState.from_dict(state.to_dict(), registry)
        assert list(restored.records) == list(state.records)
        assert restored.records["hflip∘option_cycle"].op is registry["hflip∘option_cycle"]

    def test_member_missing_from_registry(self):
        state = initial_pool(builtin_pool(), PoolConfig())
        registry = import_registry(state.registry()[1:])
        with pytest.raises(RegistryFormatError):
            PoolState.from_dict(state.to_dict(), registry)


class TestEstimateConsistency:
    def test_oracle_policy_is_fully_consistent(self, probe_set):
        report = estimate_consistency(oracle_params(), resolve_op("hflip"), probe_set)
        assert report.consistency == 1.0
        assert report.consistent_count == report.sample_count

    def test_position_policy_fails_option_reverse(self, probe_set):
        params = zero_params()
        params.w[POSITION0] = 20.0
        report = estimate_consistency(params, resolve_op("option_reverse"), probe_set)
        assert report.consistency == 0.0

    def test_constant_policy_is_consistent_under_paraphrase(self, probe_set):
        report = estimate_consistency(zero_params(), resolve_op("paraphrase"), probe_set)
        assert report.consistency == 1.0

    def test_kind_filter(self, probe_set):
        report = estimate_consistency(oracle_params(), resolve_op("hflip"), probe_set, kinds=["rel_pos_h"])
        assert report.sample_count == sum(1 for _, q in probe_set if q.kind == "rel_pos_h")

    def test_empty_domain(self, probe_set):
        with pytest.raises(EmptyProbeSetError):
            estimate_consistency(oracle_params(), resolve_op("negation∘negation"), probe_set)

    def test_probe_pool_skips_empty_domains(self, probe_set):
        state = _pool(("hflip", ACTIVE, 0.0, 0), ("negation∘negation", CANDIDATE, 0.0, 0))
        reports = probe_pool(oracle_params(), state, probe_set, step=100)
        assert [r.op_id for r in reports] == ["hflip"]
        assert reports[0].step == 100


class TestSelectForStep:
    def test_nothing_active(self):
        selection = select_for_step(PoolState(), SCENE, LEFT_RIGHT, np.random.default_rng(0), PoolConfig(p_f=0.0))
        assert selection.op is None
        assert not selection.spot_checked

    def test_single_applicable_active_always_selected(self):
        state = _pool(("hflip", ACTIVE, 0.0, 0))
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert select_for_step(state, SCENE, LEFT_RIGHT, rng, PoolConfig()).op.id == "hflip"

    def test_inapplicable_active_yields_none(self):
        state = _pool(("negation", ACTIVE, 0.0, 0))
        selection = select_for_step(state, SCENE, QUADRANT, np.random.default_rng(0), PoolConfig(p_f=0.0))
        assert selection.op is None

    def test_spot_check_can_select_mastered(self):
        state = _pool(("vflip", MASTERED, 1.0, 5))
        selection = select_for_step(state, SCENE, LEFT_RIGHT, np.random.default_rng(0), PoolConfig(p_f=1.0))
        assert selection.spot_checked
        assert selection.op.id == "vflip"

    def test_spot_check_frequency(self):
        state = _pool(("hflip", ACTIVE, 0.0, 0), ("vflip", MASTERED, 1.0, 5))
        rng = np.random.default_rng(1)
        draws = 40_000
        hits = sum(select_for_step(state, SCENE, LEFT_RIGHT, rng, PoolConfig()).spot_checked for _ in range(draws))
        assert abs(hits / draws - 0.2) < 0.01
