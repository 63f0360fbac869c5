"""
Finite-task checks: risk bounds, hypothesis counting, potential convergence and
behavioral relations between operations.
"""

import os
import sys

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import pytest

from config import config
from services.theory import (
    EnumerationBudgetError,
    FiniteDualityOp,
    FiniteTask,
    InvalidFiniteTaskError,
    OverlappingOrbitsError,
    axiom_suite,
    count_feasible_hypotheses,
    enumerate_classifiers,
    potential,
    potential_from_history,
    prop2_suite,
    prop3_summary,
    risks,
    simulate_potential,
    theorem1_suite,
    verify_group_structure,
    verify_theorem1,
)

SWAP = (1, 0)


def _four_input_task():
    # originals 0, 1 and their duals 2, 3 under an answer swap
    op = FiniteDualityOp("swap", ((0, 2), (1, 3)), SWAP)
    return FiniteTask(n_inputs=4, arity=2, truth=(0, 1, 1, 0), op=op)


class TestRisks:
    def test_perfect_classifier(self):
        task = _four_input_task()
        report = risks(task.truth, task)
        assert (report.R, report.R_dual, report.consistency) == (0.0, 0.0, 1.0)

    def test_correct_on_originals_constant_on_duals(self):
        task = _four_input_task()
        report = risks([0, 1, 0, 0], task)
        assert report.R == 0.0
        assert report.consistency == 0.5
        assert report.R_dual == 0.5
        assert report.R_aug == 0.25

    def test_mapping_classifier(self):
        task = _four_input_task()
        assert risks({0: 0, 1: 1, 2: 1, 3: 0}, task).R == 0.0

    def test_missing_input(self):
        with pytest.raises(InvalidFiniteTaskError):
            risks([0, 1], _four_input_task())


class TestFiniteTask:
    def test_truth_must_respect_phi(self):
        op = FiniteDualityOp("swap", ((0, 1),), SWAP)
        with pytest.raises(InvalidFiniteTaskError):
            FiniteTask(n_inputs=2, arity=2, truth=(0, 0), op=op)

    def test_phi_must_be_bijection(self):
        with pytest.raises(InvalidFiniteTaskError):
            FiniteDualityOp("bad", ((0, 1),), (0, 0))

    def test_overlapping_pairs(self):
        op = FiniteDualityOp("swap", ((0, 1), (1, 2)), SWAP)
        with pytest.raises(OverlappingOrbitsError):
            FiniteTask(n_inputs=3, arity=2, truth=(0, 1, 0), op=op)


class TestTheorem1:
    def test_eight_input_binary_task(self):
        op = FiniteDualityOp("swap", ((0, 1), (2, 3), (4, 5), (6, 7)), SWAP)
        task = FiniteTask(n_inputs=8, arity=2, truth=(0, 1, 1, 0, 0, 1, 1, 0), op=op)
        summary = verify_theorem1(task)
        assert summary.instances == 256
        assert summary.violations == 0
        assert summary.details["zero_risk_classifiers"] == 16

    def test_zero_consistency_bound(self):
        task = _four_input_task()
        # inconsistent on both pairs
        report = risks([0, 1, 0, 1], task)
        assert report.consistency == 0.0
        assert report.R_aug >= 0.5

    def test_tightest_case_is_recorded(self):
        summary = verify_theorem1(_four_input_task())
        assert summary.tightest_case["slack"] == 0

    def test_random_suite(self):
        summary = theorem1_suite(n_tasks=20, seed=0)
        assert summary.violations == 0
        assert summary.instances > 0

    def test_enumeration_budget(self):
        with pytest.raises(EnumerationBudgetError):
            enumerate_classifiers(9, 3)


class TestHypothesisCount:
    def test_single_pair(self):
        result = count_feasible_hypotheses(2, 2, [FiniteDualityOp("swap", ((0, 1),), SWAP)])
        assert result.count == 2
        assert result.equality

    def test_two_pairs(self):
        result = count_feasible_hypotheses(4, 2, [FiniteDualityOp("swap", ((0, 1), (2, 3)), SWAP)])
        assert (result.count, result.bound) == (4, 4)
        assert result.vc_dimension == 2
        assert result.vc_bound == 2

    def test_no_ops(self):
        result = count_feasible_hypotheses(3, 3, [])
        assert result.count == 27
        assert result.vc_dimension is None

    def test_pairs_across_ops_must_not_overlap(self):
        ops = [FiniteDualityOp("a", ((0, 1),), SWAP), FiniteDualityOp("b", ((1, 2),), SWAP)]
        with pytest.raises(OverlappingOrbitsError):
            count_feasible_hypotheses(3, 2, ops)

    def test_suite(self):
        summary = prop2_suite(seed=0)
        assert summary.violations == 0
        assert summary.instances > 0


class TestPotential:
    def test_canonical_parameters(self):
        trace = simulate_potential(4, 3, 0.02, 0.004, 0.75)
        assert trace.condition_met
        assert trace.rate == pytest.approx(0.056)
        assert trace.t_star == pytest.approx(53.5714, abs=1e-3)
        assert trace.horizon == 55
        assert trace.converged
        assert trace.hit_step <= trace.horizon
        assert trace.violations == []

    def test_no_forgetting_decrement(self):
        trace = simulate_potential(4, 3, 0.02, 0.0, 0.75, steps=10)
        for before, after in zip(trace.phi[:10], trace.phi[1:11]):
            assert before - after == pytest.approx(0.06)

    def test_boundary_is_non_convergent(self):
        trace = simulate_potential(4, 3, 0.02, 0.06, 0.75, steps=200)
        assert not trace.condition_met
        assert trace.t_star is None
        assert trace.violations == []
        summary = prop3_summary(trace)
        assert summary.violations == 0
        assert summary.details["status"] == "non-convergent"

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            simulate_potential(2, 3, 0.02, 0.0, 0.75)

    def test_potential_from_history(self):
        entries = [
            {"step": 100, "op_id": "hflip", "consistency": 0.5},
            {"step": 100, "op_id": "vflip", "consistency": 0.9},
            {"step": 200, "op_id": "hflip", "consistency": 0.8},
        ]
        assert potential_from_history(entries, 0.75) == [(100, pytest.approx(0.25)), (200, 0.0)]

    def test_potential_ignores_mastered(self):
        assert potential([0.9, 1.0], 0.75) == 0.0


def test_group_structure():
    summary = verify_group_structure(n_samples=100, seed=0)
    assert summary.violations == 0


def test_axiom_suite_with_compositions():
    summary = axiom_suite(n_samples=40, seed=0, n_compositions=3)
    assert summary.violations == 0
    assert len(summary.details["ops"]) >= 9


@pytest.mark.slow
def test_axiom_holds_on_a_thousand_random_compositions():
    if not config.RUN_SLOW_TESTS:
        pytest.skip("SAGE_RUN_SLOW not enabled")
    summary = axiom_suite(n_samples=20, seed=0, n_compositions=1000)
    assert summary.violations == 0, summary.tightest_case
    # 81 distinct depth-2 ids; the few with an empty domain are skipped
    assert len(summary.details["ops"]) >= 9 + 50
