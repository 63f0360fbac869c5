"""
Training loop: determinism, inert-machinery reduction, checkpoints and run artifacts.
"""

import os
import sys

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import json
from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError

from config import config as app_config
from schemas.config import EnvConfig, PoolConfig, TrainConfig
from services.corpus import export_corpus
from services.duality import RegistryFormatError, resolve_op
from services.policy import greedy_answer
from services.pool import MASTERED, build_probe_set, estimate_consistency
from services.rewards_grpo import PolicyUpdateError
from services.scene_env import ground_truth
from services.trainer import (
    OPS_FILE,
    OutputNotWritableError,
    TrainingAbortedError,
    checkpoint_dir,
    init_state,
    run_training,
)
from utils.jsonl import read_jsonl


def _small_config(**overrides):
    values = dict(
        total_steps=20,
        group_size=4,
        seed=3,
        checkpoint_every=10,
        log_every=10,
        pool=PoolConfig(E=10, probe_size=40, discover_candidates=False),
    )
    values.update(overrides)
    return TrainConfig(**values)


class TestConfig:
    def test_empty_document_is_valid(self):
        cfg = TrainConfig.model_validate({})
        assert cfg.group_size == 8
        assert cfg.pool.tau == 0.75

    def test_odd_group_rejected(self):
        with pytest.raises(ValidationError):
            TrainConfig(group_size=3)

    def test_tau_out_of_range_names_field(self):
        with pytest.raises(ValidationError) as exc_info:
            TrainConfig.model_validate({"pool": {"tau": 1.5}})
        assert exc_info.value.errors()[0]["loc"] == ("pool", "tau")

    def test_unknown_field_rejected(self):
        with pytest.raises(ValidationError):
            TrainConfig.model_validate({"learning_rate": 0.1})

    def test_dual_gradient_on_by_default(self):
        cfg = TrainConfig()
        assert cfg.dual_gradient
        assert cfg.lr == 1e-2


class TestRunTraining:
    def test_zero_steps_returns_initialization(self):
        cfg = _small_config(total_steps=0)
        result = run_training(cfg)
        assert result.metrics == []
        assert np.array_equal(result.params.flat(), init_state(cfg).params.flat())

    def test_same_seed_same_trajectory(self):
        cfg = _small_config()
        a = run_training(cfg)
        b = run_training(cfg)
        assert a.metrics == b.metrics
        assert np.array_equal(a.params.flat(), b.params.flat())

    def test_zero_lambda_matches_plain_grpo(self):
        with_pool = run_training(_small_config(lam=0.0))
        without_pool = run_training(_small_config(lam=0.0, pool_enabled=False))
        assert np.array_equal(with_pool.params.flat(), without_pool.params.flat())
        assert [m.mean_r_acc for m in with_pool.metrics] == [m.mean_r_acc for m in without_pool.metrics]
        assert all(m.selected_op is None for m in without_pool.metrics)

    def test_dual_gradient_changes_trajectory(self):
        on = run_training(_small_config())
        off = run_training(_small_config(dual_gradient=False))
        assert not np.array_equal(on.params.flat(), off.params.flat())

    def test_zero_lambda_ignores_dual_gradient_flag(self):
        on = run_training(_small_config(lam=0.0, dual_gradient=True))
        off = run_training(_small_config(lam=0.0, dual_gradient=False))
        assert np.array_equal(on.params.flat(), off.params.flat())

    def test_single_dual_completion(self):
        result = run_training(_small_config(group_size=2, total_steps=10))
        assert len(result.metrics) == 10

    def test_generation_call_counts(self):
        result = run_training(_small_config())
        for m in result.metrics:
            expected = 4 if m.selected_op is None else 6
            assert m.generation_calls == expected
        assert any(m.selected_op is not None for m in result.metrics)

    def test_checkpoint_promotes_into_free_slot(self):
        result = run_training(_small_config())
        promoted = [e for e in result.journal if e.step == 10 and e.to_state == "Active"]
        assert promoted

    def test_run_artifacts(self, tmp_path):
        out = tmp_path / "run"
        run_training(_small_config(), output_dir=out)

        assert len(read_jsonl(out / "metrics.jsonl")) == 20
        assert (out / "lifecycle.jsonl").exists()
        probes = read_jsonl(out / "probes.jsonl")
        assert {p["step"] for p in probes} == {10, 20}
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["seed"] == 3
        assert manifest["finished_at"] is not None
        assert (checkpoint_dir(out, 10) / "policy.json").exists()
        assert (checkpoint_dir(out, 20) / "rng.json").exists()
        assert manifest["outputs"]["ops"] == OPS_FILE
        ops = json.loads((out / OPS_FILE).read_text(encoding="utf-8"))
        assert [item["id"] for item in ops][:2] == ["hflip", "vflip"]
        assert (checkpoint_dir(out, 10) / OPS_FILE).exists()
        if app_config.METRICS_ENABLED:
            assert "sage_generation_calls_total" in (out / "prometheus.txt").read_text(encoding="utf-8")

    def test_resume_is_bit_exact(self, tmp_path):
        cfg = _small_config()
        full = run_training(cfg, output_dir=tmp_path / "full")
        resumed = run_training(cfg, output_dir=tmp_path / "resumed", resume_from=checkpoint_dir(tmp_path / "full", 10))
        assert np.array_equal(full.params.flat(), resumed.params.flat())
        assert resumed.metrics == full.metrics[10:]

    def test_resume_rejects_mismatched_registry(self, tmp_path):
        cfg = _small_config()
        run_training(cfg, output_dir=tmp_path / "full")
        ops_path = checkpoint_dir(tmp_path / "full", 10) / OPS_FILE
        ops = json.loads(ops_path.read_text(encoding="utf-8"))
        ops[0]["mapping_kind"] = "position_permutation"
        ops_path.write_text(json.dumps(ops), encoding="utf-8")
        with pytest.raises(RegistryFormatError):
            run_training(cfg, resume_from=checkpoint_dir(tmp_path / "full", 10))

    def test_corpus_replay(self, tmp_path):
        corpus = tmp_path / "corpus.jsonl"
        export_corpus(corpus, 30, seed=1)
        cfg = _small_config(total_steps=5, env=EnvConfig(corpus_path=str(corpus)))
        result = run_training(cfg)
        assert len(result.metrics) == 5

    def test_output_not_writable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x", encoding="utf-8")
        with pytest.raises(OutputNotWritableError):
            run_training(_small_config(total_steps=1), output_dir=blocker)

    def test_non_finite_update_aborts_with_diagnostic(self, tmp_path):
        with patch("services.trainer.grpo_update", side_effect=PolicyUpdateError("non-finite gradient")):
            with pytest.raises(TrainingAbortedError) as exc_info:
                run_training(_small_config(), output_dir=tmp_path / "run")
        checkpoint = exc_info.value.checkpoint
        assert checkpoint is not None
        assert (checkpoint / "policy.json").exists()


HFLIP = resolve_op("hflip")


def _start_on_left_right(seed):
    """hflip consistency and greedy accuracy of the untrained policy on left/right questions."""
    params = init_state(TrainConfig(seed=seed)).params
    questions = build_probe_set(np.random.default_rng(100 + seed), 200, EnvConfig(kinds=["rel_pos_h"]))
    consistency = estimate_consistency(params, HFLIP, questions).consistency
    accuracy = np.mean([greedy_answer(params, s, q) == ground_truth(s, q) for s, q in questions])
    return consistency, accuracy


@pytest.mark.parametrize("seed", range(5))
def test_default_start_takes_the_position_shortcut(seed):
    consistency, accuracy = _start_on_left_right(seed)
    assert consistency <= 0.4
    assert accuracy >= 0.8


@pytest.mark.slow
def test_default_run_masters_hflip():
    if not app_config.RUN_SLOW_TESTS:
        pytest.skip("SAGE_RUN_SLOW not enabled")
    outcomes = {}
    for seed in range(5):
        consistency, accuracy = _start_on_left_right(seed)
        assert consistency <= 0.4 and accuracy >= 0.8, (seed, consistency, accuracy)

        result = run_training(TrainConfig(seed=seed))
        mastered = any(e.op_id == "hflip" and e.to_state == MASTERED for e in result.journal)
        questions = build_probe_set(np.random.default_rng(200 + seed), 300, EnvConfig())
        final = estimate_consistency(result.params, HFLIP, questions).consistency
        first = np.mean([m.mean_r_acc for m in result.metrics[:200]])
        last = np.mean([m.mean_r_acc for m in result.metrics[-200:]])
        outcomes[seed] = (mastered, final, first, last)

    passed = [s for s, (mastered, final, first, last) in outcomes.items() if mastered and final >= 0.75 and last >= first]
    assert len(passed) >= 4, outcomes
