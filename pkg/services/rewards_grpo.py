"""
Rewards and the group-relative policy update.

total = r_acc + r_fmt + r_cons
  r_acc  in {0, 1}     exact match with the oracle answer
  r_fmt  in {0, 0.5}   well-formatted completion
  r_cons in [0, lam]   lam * fraction of dual completions agreeing with the mapped answer

Advantages use the population standard deviation of the group. A group with
identical rewards is degenerate: advantages are all zero and the policy-gradient
term is skipped (the KL term still applies).
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from services.duality import DualityOp, map_answer
from services.policy import (
    FEATURE_DIM,
    Completion,
    PolicyParams,
    completion_log_prob,
    kl_to_reference,
    option_features,
    score_jacobian,
)
from services.scene_env import Query, Scene

FORMAT_REWARD = 0.5
MIN_STD = 1e-12


class PolicyUpdateError(RuntimeError):
    """Raised when a GRPO step would produce non-finite parameters."""


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: float
    r_fmt: float
    r_cons: float
    total: float


@dataclass(frozen=True)
class AdvantageGroup:
    rewards: Tuple[float, ...]
    mean: float
    std: float
    advantages: Tuple[float, ...]
    degenerate: bool


def accuracy_reward(completion: Completion, truth: int) -> float:
    return 1.0 if completion.answer == truth else 0.0


def format_reward(completion: Completion) -> float:
    return FORMAT_REWARD if completion.formatted else 0.0


def consistency_reward(
    op: DualityOp,
    primary: Completion,
    duals: Sequence[Completion],
    original_query: Query,
    dual_query: Query,
    lam: float,
) -> float:
    """lam times the fraction of ``duals`` whose answer equals phi(primary answer)."""
    if not duals:
        raise ValueError("at least one dual completion is required")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    target = map_answer(op, original_query, dual_query, primary.answer)
    agreeing = sum(1 for dual in duals if dual.answer == target)
    return lam * agreeing / len(duals)


def total_reward(completion: Completion, truth: int, r_cons: float = 0.0) -> RewardBreakdown:
    r_acc = accuracy_reward(completion, truth)
    r_fmt = format_reward(completion)
    return RewardBreakdown(r_acc=r_acc, r_fmt=r_fmt, r_cons=r_cons, total=r_acc + r_fmt + r_cons)


def group_advantages(rewards: Sequence[float]) -> AdvantageGroup:
    values = np.asarray(rewards, dtype=float)
    if values.size < 2:
        raise ValueError("a group needs at least two rewards")
    mean = float(values.mean())
    std = float(values.std())
    degenerate = bool(np.all(values == values[0])) or std < MIN_STD
    if degenerate:
        advantages = np.zeros_like(values)
    else:
        advantages = (values - mean) / std
    return AdvantageGroup(
        rewards=tuple(float(r) for r in values),
        mean=mean,
        std=std,
        advantages=tuple(float(a) for a in advantages),
        degenerate=degenerate,
    )


def policy_gradient(
    params: PolicyParams,
    scene: Scene,
    query: Query,
    completions: Sequence[Completion],
    advantages: Sequence[float],
) -> np.ndarray:
    """(1/G) sum_i A_i grad log p(o_i), flat layout. Zero when every advantage is zero."""
    grad = np.zeros_like(params.flat())
    if not any(advantages):
        return grad
    scores, jac = score_jacobian(params, option_features(scene, query))
    probs = np.exp(scores - np.logaddexp.reduce(scores))
    expected = probs @ jac
    p_fmt = 1.0 / (1.0 + np.exp(-params.b))
    for completion, advantage in zip(completions, advantages):
        if advantage == 0:
            continue
        row = jac[completion.answer] - expected
        row[FEATURE_DIM] = (1.0 if completion.formatted else 0.0) - p_fmt
        grad += advantage * row
    return grad / len(completions)


def grpo_objective(
    params: PolicyParams,
    ref_params: PolicyParams,
    scene: Scene,
    query: Query,
    completions: Sequence[Completion],
    advantages: Sequence[float],
    beta: float,
) -> float:
    """(1/G) sum_i A_i log p(o_i) - beta * KL, evaluated at ``params``."""
    total = sum(
        a * completion_log_prob(params, scene, query, c.answer, c.formatted)
        for c, a in zip(completions, advantages)
    ) / len(completions)
    kl, _ = kl_to_reference(params, ref_params, scene, query)
    return float(total - beta * kl)


def grpo_update(
    params: PolicyParams,
    ref_params: PolicyParams,
    scene: Scene,
    query: Query,
    completions: Sequence[Completion],
    advantages: Sequence[float],
    beta: float,
    lr: float,
    dual_batch: Optional[Tuple[Scene, Query, Sequence[Completion], Sequence[float]]] = None,
) -> PolicyParams:
    """
    One ascent step on the GRPO objective. ``ref_params`` is only read.

    ``dual_batch`` adds the policy-gradient term of the dual completions
    (passed by the trainer when ``dual_gradient`` is on and lam > 0).

    Raises:
        ValueError: misaligned inputs, beta < 0 or lr <= 0
        PolicyUpdateError: non-finite gradient or parameters
    """
    if len(completions) != len(advantages) or not completions:
        raise ValueError("completions and advantages must be aligned and non-empty")
    if beta < 0 or lr <= 0:
        raise ValueError("beta must be >= 0 and lr > 0")

    direction = policy_gradient(params, scene, query, completions, advantages)
    if dual_batch is not None:
        dual_scene, dual_query, dual_completions, dual_advantages = dual_batch
        direction = direction + policy_gradient(params, dual_scene, dual_query, dual_completions, dual_advantages)
    if beta > 0:
        _, kl_grad = kl_to_reference(params, ref_params, scene, query)
        direction = direction - beta * kl_grad.flat()

    if not np.all(np.isfinite(direction)):
        raise PolicyUpdateError("non-finite gradient, step aborted")
    updated = params.with_flat(params.flat() + lr * direction)
    if not updated.is_finite():
        raise PolicyUpdateError("update produced non-finite parameters")
    return updated
