"""
Brute-force checks of the guarantees behind duality-consistency training.

- Theorem 1: on a finite task with a bijective answer map, every deterministic
  classifier satisfies
      (i)  R_aug >= (1 - C) / 2
      (ii) R == 0  =>  R_dual >= 1 - C
  plus the per-input inequality 1[a != a*] + 1[a' != phi(a*)] >= 1[inconsistent].
  Checked on integer counts (no float tolerance needed).
- Proposition 2: functions satisfying every duality constraint number at most
  C ** (N - N_T / 2); for C = 2 the VC dimension obeys the same bound.
- Proposition 3: idealized scheduler dynamics drive the potential
  Phi_t = sum_i max(0, tau - C_i) to zero at rate K*eps - (M-K)*eta.

Enumeration is capped at 3 ** 8 classifiers per task.
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from schemas.config import EnvConfig
from schemas.records import VerificationSummary
from services.duality import (
    AnswerMappingError,
    AxiomSampleBudgetError,
    DualityOp,
    applicable,
    apply,
    builtin_pool,
    compose,
    map_answer,
    resolve_op,
    verify_axiom,
)
from services.scene_env import sample_example
from utils.structured_logging import theory_logger

MAX_CLASSIFIERS = 3 ** 8
MAX_ARITY = 3
MAX_INPUTS = 8
TOLERANCE = 1e-12


class EnumerationBudgetError(ValueError):
    """Raised when C ** N exceeds the enumeration budget."""


class OverlappingOrbitsError(ValueError):
    """Raised when an input belongs to more than one duality pair."""


class InvalidFiniteTaskError(ValueError):
    """Raised when a finite task is malformed or its ground truth breaks the duality axiom."""


@dataclass(frozen=True)
class FiniteDualityOp:
    """Pairs (original, dual) of input indices and a bijection phi over answers."""
    name: str
    pairs: Tuple[Tuple[int, int], ...]
    phi: Tuple[int, ...]

    def __post_init__(self):
        if sorted(self.phi) != list(range(len(self.phi))):
            raise InvalidFiniteTaskError(f"{self.name}: phi is not a bijection")


def _check_orbits(pairs: Iterable[Tuple[int, int]], n_inputs: int) -> None:
    seen = set()
    for original, dual in pairs:
        for index in (original, dual):
            if not 0 <= index < n_inputs:
                raise InvalidFiniteTaskError(f"input index {index} outside [0, {n_inputs - 1}]")
            if index in seen:
                raise OverlappingOrbitsError(f"input {index} belongs to more than one pair")
            seen.add(index)


@dataclass(frozen=True)
class FiniteTask:
    n_inputs: int
    arity: int
    truth: Tuple[int, ...]
    op: FiniteDualityOp

    def __post_init__(self):
        if self.arity < 2:
            raise InvalidFiniteTaskError("arity must be >= 2")
        if len(self.truth) != self.n_inputs:
            raise InvalidFiniteTaskError("truth table length differs from n_inputs")
        if any(not 0 <= t < self.arity for t in self.truth):
            raise InvalidFiniteTaskError("truth value outside the answer range")
        if len(self.op.phi) != self.arity:
            raise InvalidFiniteTaskError("phi arity differs from task arity")
        if not self.op.pairs:
            raise InvalidFiniteTaskError("a task needs at least one duality pair")
        _check_orbits(self.op.pairs, self.n_inputs)
        for original, dual in self.op.pairs:
            if self.truth[dual] != self.op.phi[self.truth[original]]:
                raise InvalidFiniteTaskError(f"ground truth breaks the duality axiom on pair ({original}, {dual})")

    @property
    def originals(self) -> List[int]:
        return [o for o, _ in self.op.pairs]

    @property
    def duals(self) -> List[int]:
        return [d for _, d in self.op.pairs]


@dataclass(frozen=True)
class RiskReport:
    R: float
    R_dual: float
    R_aug: float
    consistency: float


Classifier = Union[Sequence[int], Mapping[int, int]]


def _as_table(classifier: Classifier, n_inputs: int) -> List[int]:
    if isinstance(classifier, Mapping):
        missing = [i for i in range(n_inputs) if i not in classifier]
        if missing:
            raise InvalidFiniteTaskError(f"classifier missing inputs {missing}")
        return [int(classifier[i]) for i in range(n_inputs)]
    table = [int(a) for a in classifier]
    if len(table) < n_inputs:
        raise InvalidFiniteTaskError(f"classifier missing inputs {list(range(len(table), n_inputs))}")
    return table


def risks(classifier: Classifier, task: FiniteTask) -> RiskReport:
    """Exact risks under the uniform distribution over the task's pairs."""
    table = _as_table(classifier, task.n_inputs)
    phi = task.op.phi
    n_pairs = len(task.op.pairs)
    err = sum(1 for o in task.originals if table[o] != task.truth[o])
    err_dual = sum(1 for d in task.duals if table[d] != task.truth[d])
    consistent = sum(1 for o, d in task.op.pairs if table[d] == phi[table[o]])
    r = err / n_pairs
    r_dual = err_dual / n_pairs
    return RiskReport(R=r, R_dual=r_dual, R_aug=(r + r_dual) / 2, consistency=consistent / n_pairs)


def enumerate_classifiers(n_inputs: int, arity: int) -> np.ndarray:
    """Every function [0, N) -> [0, C) as rows of a (C ** N, N) array."""
    total = arity ** n_inputs
    if total > MAX_CLASSIFIERS:
        raise EnumerationBudgetError(f"{arity}^{n_inputs} = {total} classifiers exceeds {MAX_CLASSIFIERS}")
    return np.array(list(itertools.product(range(arity), repeat=n_inputs)), dtype=np.int64).reshape(total, n_inputs)


def verify_theorem1(task: FiniteTask) -> VerificationSummary:
    table = enumerate_classifiers(task.n_inputs, task.arity)
    truth = np.asarray(task.truth)
    phi = np.asarray(task.op.phi)
    originals = np.asarray(task.originals)
    duals = np.asarray(task.duals)
    n_pairs = len(originals)

    wrong = table[:, originals] != truth[originals]
    wrong_dual = table[:, duals] != truth[duals]
    inconsistent = table[:, duals] != phi[table[:, originals]]

    err = wrong.sum(axis=1)
    err_dual = wrong_dual.sum(axis=1)
    cons = n_pairs - inconsistent.sum(axis=1)

    slack = err + err_dual - (n_pairs - cons)
    bound_i = int((slack < 0).sum())
    zero_risk = err == 0
    bound_ii = int((zero_risk & (err_dual < n_pairs - cons)).sum())
    pointwise = int((wrong.astype(int) + wrong_dual.astype(int) < inconsistent.astype(int)).any(axis=1).sum())

    tight = int(np.argmin(slack))
    tightest = risks(table[tight].tolist(), task)
    return VerificationSummary(
        claim="theorem1",
        instances=int(table.shape[0]),
        violations=bound_i + bound_ii + pointwise,
        tightest_case={
            "classifier": table[tight].tolist(),
            "slack": int(slack[tight]),
            "R": tightest.R,
            "R_dual": tightest.R_dual,
            "R_aug": tightest.R_aug,
            "consistency": tightest.consistency,
        },
        details={
            "bound_i_violations": bound_i,
            "bound_ii_violations": bound_ii,
            "pointwise_violations": pointwise,
            "zero_risk_classifiers": int(zero_risk.sum()),
        },
    )


def random_finite_task(rng: np.random.Generator, max_inputs: int = MAX_INPUTS, max_arity: int = MAX_ARITY) -> FiniteTask:
    """Random task with inputs laid out as pairs (2i, 2i+1) followed by unpaired inputs."""
    arity = int(rng.integers(2, max_arity + 1))
    n_inputs = int(rng.integers(2, max_inputs + 1))
    n_pairs = int(rng.integers(1, n_inputs // 2 + 1))
    phi = tuple(int(x) for x in rng.permutation(arity))
    truth = [int(x) for x in rng.integers(0, arity, size=n_inputs)]
    pairs = tuple((2 * i, 2 * i + 1) for i in range(n_pairs))
    for original, dual in pairs:
        truth[dual] = phi[truth[original]]
    op = FiniteDualityOp("random", pairs, phi)
    return FiniteTask(n_inputs=n_inputs, arity=arity, truth=tuple(truth), op=op)


def theorem1_suite(n_tasks: int = 100, seed: int = 0) -> VerificationSummary:
    rng = np.random.default_rng(seed)
    instances = violations = 0
    tightest = None
    for _ in range(n_tasks):
        report = verify_theorem1(random_finite_task(rng))
        instances += report.instances
        violations += report.violations
        case = report.tightest_case
        if tightest is None or case["slack"] < tightest["slack"]:
            tightest = case
    theory_logger.info(action="verify_theorem1", message="suite finished", tasks=n_tasks, violations=violations)
    return VerificationSummary(
        claim="theorem1",
        instances=instances,
        violations=violations,
        tightest_case=tightest,
        details={"tasks": n_tasks},
    )


# ---------------------------------------------------------------------------
# Hypothesis counting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HypothesisCount:
    count: int
    bound: int
    vc_dimension: Optional[int]
    vc_bound: int
    equality: bool


def _shatters(hypotheses: np.ndarray, subset: Sequence[int]) -> bool:
    if not subset:
        return hypotheses.shape[0] > 0
    patterns = {tuple(row) for row in hypotheses[:, list(subset)].tolist()}
    return len(patterns) == 2 ** len(subset)


def vc_dimension(hypotheses: np.ndarray) -> int:
    """Largest subset of inputs shattered by the binary hypothesis rows (exhaustive)."""
    n_inputs = hypotheses.shape[1]
    for size in range(n_inputs, 0, -1):
        if any(_shatters(hypotheses, subset) for subset in itertools.combinations(range(n_inputs), size)):
            return size
    return 0


def count_feasible_hypotheses(
    n_inputs: int, arity: int, ops: Sequence[FiniteDualityOp]
) -> HypothesisCount:
    """
    Enumerate all arity ** n_inputs functions and keep those with
    f(dual) == phi(f(original)) on every pair of every op.

    Raises:
        EnumerationBudgetError: too many functions
        OverlappingOrbitsError: an input appears in two pairs (across all ops)
    """
    all_pairs = [pair for op in ops for pair in op.pairs]
    _check_orbits(all_pairs, n_inputs)
    for op in ops:
        if len(op.phi) != arity:
            raise InvalidFiniteTaskError(f"{op.name}: phi arity differs from {arity}")

    table = enumerate_classifiers(n_inputs, arity)
    feasible = np.ones(table.shape[0], dtype=bool)
    for op in ops:
        phi = np.asarray(op.phi)
        for original, dual in op.pairs:
            feasible &= table[:, dual] == phi[table[:, original]]

    n_orbit_inputs = 2 * len(all_pairs)
    free = n_inputs - n_orbit_inputs // 2
    count = int(feasible.sum())
    bound = arity ** free
    vc = vc_dimension(table[feasible]) if arity == 2 else None
    return HypothesisCount(count=count, bound=bound, vc_dimension=vc, vc_bound=free, equality=count == bound)


def prop2_suite(seed: int = 0, max_inputs: int = MAX_INPUTS) -> VerificationSummary:
    """Every (C, N, #pairs) configuration within budget, with a random phi per configuration."""
    rng = np.random.default_rng(seed)
    instances = violations = 0
    configurations = []
    for arity in (2, 3):
        for n_inputs in range(1, max_inputs + 1):
            if arity ** n_inputs > MAX_CLASSIFIERS:
                continue
            for n_pairs in range(0, n_inputs // 2 + 1):
                ops = []
                if n_pairs:
                    phi = tuple(int(x) for x in rng.permutation(arity))
                    ops = [FiniteDualityOp("random", tuple((2 * i, 2 * i + 1) for i in range(n_pairs)), phi)]
                result = count_feasible_hypotheses(n_inputs, arity, ops)
                bad = result.count > result.bound or (
                    result.vc_dimension is not None and result.vc_dimension > result.vc_bound
                )
                instances += 1
                violations += int(bad)
                configurations.append(
                    {
                        "arity": arity,
                        "n_inputs": n_inputs,
                        "pairs": n_pairs,
                        "count": result.count,
                        "bound": result.bound,
                        "vc_dimension": result.vc_dimension,
                    }
                )
    return VerificationSummary(
        claim="prop2",
        instances=instances,
        violations=violations,
        tightest_case=None,
        details={"configurations": configurations},
    )


# ---------------------------------------------------------------------------
# Potential convergence
# ---------------------------------------------------------------------------

@dataclass
class PotentialTrace:
    phi: List[float]
    M: int
    K: int
    eps: float
    eta: float
    tau: float
    rate: float
    condition_met: bool
    t_star: Optional[float]
    horizon: Optional[int]
    hit_step: Optional[int]
    violations: List[str] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.hit_step is not None


def potential(consistencies: Iterable[float], tau: float) -> float:
    return float(sum(max(0.0, tau - c) for c in consistencies))


def simulate_potential(
    M: int, K: int, eps: float, eta: float, tau: float, steps: Optional[int] = None
) -> PotentialTrace:
    """
    Idealized scheduler: consistencies start at 0; every step the K lowest
    (ties by index) gain eps, the others lose eta; values stay in [0, 1].

    With rate = K*eps - (M-K)*eta > 0:
      - Phi reaches 0 within ceil((M*tau + K*eps) / rate) steps; the extra
        K*eps covers the last step's overshoot past tau, which the discrete
        dynamics cannot avoid (T* = M*tau / rate itself is reported too)
      - every step whose active ops start and end at or below tau decreases
        Phi by at least rate
    A non-positive rate is reported as non-convergent, not as a violation.
    """
    if not 1 <= K <= M:
        raise ValueError("need 1 <= K <= M")
    rate = K * eps - (M - K) * eta
    condition_met = rate > TOLERANCE
    t_star = M * tau / rate if condition_met else None
    horizon = int(math.ceil((M * tau + K * eps) / rate - TOLERANCE)) if condition_met else None
    if steps is None:
        steps = horizon if horizon is not None else 100

    values = np.zeros(M)
    trace = [potential(values, tau)]
    violations: List[str] = []
    hit_step = 0 if trace[0] <= TOLERANCE else None

    for t in range(1, steps + 1):
        order = np.argsort(values, kind="stable")
        active = order[:K]
        before = values.copy()
        mask = np.zeros(M, dtype=bool)
        mask[active] = True
        values = np.where(mask, values + eps, values - eta)
        values = np.clip(values, 0.0, 1.0)
        phi_t = potential(values, tau)
        trace.append(phi_t)

        pre_mastery = bool(np.all(before[active] < tau) and np.all(values[active] <= tau))
        if condition_met and pre_mastery and trace[-2] - phi_t < rate - TOLERANCE:
            violations.append(f"step {t}: decrement {trace[-2] - phi_t:.15g} < rate {rate:.15g}")
        if hit_step is None and phi_t <= TOLERANCE:
            hit_step = t

    if condition_met and steps >= horizon and (hit_step is None or hit_step > horizon):
        violations.append(f"potential not zero within {horizon} steps")

    return PotentialTrace(
        phi=trace,
        M=M,
        K=K,
        eps=eps,
        eta=eta,
        tau=tau,
        rate=rate,
        condition_met=condition_met,
        t_star=t_star,
        horizon=horizon,
        hit_step=hit_step,
        violations=violations,
    )


def prop3_summary(trace: PotentialTrace) -> VerificationSummary:
    return VerificationSummary(
        claim="prop3",
        instances=len(trace.phi) - 1,
        violations=len(trace.violations),
        tightest_case=None,
        details={
            "condition_met": trace.condition_met,
            "status": "converged" if trace.converged else ("non-convergent" if not trace.condition_met else "not converged"),
            "rate": trace.rate,
            "t_star": trace.t_star,
            "horizon": trace.horizon,
            "hit_step": trace.hit_step,
            "violations": trace.violations,
        },
    )


def potential_from_history(entries: Iterable[Mapping[str, Any]], tau: float) -> List[Tuple[int, float]]:
    """
    Real Phi_t per checkpoint from probe log entries ({step, op_id, consistency}).
    Diagnostic only: nothing is asserted about it.
    """
    by_step: Dict[int, Dict[str, float]] = {}
    for entry in entries:
        by_step.setdefault(int(entry["step"]), {})[entry["op_id"]] = float(entry["consistency"])
    return [(step, potential(values.values(), tau)) for step, values in sorted(by_step.items())]


# ---------------------------------------------------------------------------
# Operation-level checks
# ---------------------------------------------------------------------------

def _index_map(op: DualityOp, query, dual_query) -> Optional[Tuple[int, ...]]:
    try:
        return tuple(map_answer(op, query, dual_query, a) for a in range(query.n_options))
    except AnswerMappingError:
        return None


def same_behavior(op_a: DualityOp, op_b: DualityOp, scene, query) -> bool:
    in_a, in_b = applicable(op_a, scene, query), applicable(op_b, scene, query)
    if in_a != in_b:
        return False
    if not in_a:
        return True
    scene_a, query_a = apply(op_a, scene, query)
    scene_b, query_b = apply(op_b, scene, query)
    if scene_a != scene_b or query_a != query_b:
        return False
    return _index_map(op_a, query, query_a) == _index_map(op_b, query, query_b)


def behaves_as_identity(op: DualityOp, scene, query) -> bool:
    if not applicable(op, scene, query):
        return True
    dual_scene, dual_query = apply(op, scene, query)
    if dual_scene != scene or dual_query != query:
        return False
    return _index_map(op, query, dual_query) == tuple(range(query.n_options))


def verify_group_structure(n_samples: int = 1000, seed: int = 0, env: Optional[EnvConfig] = None) -> VerificationSummary:
    """
    Klein four-group relations of the flips plus option-permutation composition,
    checked behaviorally on sampled inputs.
    """
    env = env or EnvConfig()
    rng = np.random.default_rng(seed)
    hflip, vflip, rot180 = resolve_op("hflip"), resolve_op("vflip"), resolve_op("rot180")
    reverse, cycle = resolve_op("option_reverse"), resolve_op("option_cycle")

    identities = [compose(op, op) for op in (hflip, vflip, rot180, reverse)]
    equalities = [
        (compose(hflip, vflip), rot180),
        (compose(vflip, hflip), rot180),
        (compose(hflip, rot180), vflip),
        (compose(rot180, vflip), hflip),
    ]

    violations: List[Dict[str, Any]] = []
    for _ in range(n_samples):
        scene, query = sample_example(rng, env)
        for op in identities:
            if not behaves_as_identity(op, scene, query):
                violations.append({"relation": f"{op.id} = id", "kind": query.kind})
        for left, right in equalities:
            if not same_behavior(left, right, scene, query):
                violations.append({"relation": f"{left.id} = {right.id}", "kind": query.kind})
        cycled = cycle
        for _ in range(query.n_options - 1):
            cycled = compose(cycle, cycled)
        if not behaves_as_identity(cycled, scene, query):
            violations.append({"relation": f"option_cycle^{query.n_options} = id", "kind": query.kind})

    return VerificationSummary(
        claim="group_structure",
        instances=n_samples,
        violations=len(violations),
        tightest_case=violations[0] if violations else None,
        details={"relations": [op.id for op in identities] + [f"{a.id}={b.id}" for a, b in equalities]},
    )


def axiom_suite(
    n_samples: int,
    seed: int = 0,
    env: Optional[EnvConfig] = None,
    n_compositions: int = 0,
) -> VerificationSummary:
    """verify_axiom on every built-in plus ``n_compositions`` random depth-2 compositions."""
    env = env or EnvConfig()
    rng = np.random.default_rng(seed)
    ops = builtin_pool()
    builtins = list(ops)
    for _ in range(n_compositions):
        i, j = rng.integers(0, len(builtins), size=2)
        ops.append(compose(builtins[int(i)], builtins[int(j)]))

    instances = 0
    per_op: Dict[str, int] = {}
    violations = 0
    first = None
    for op in ops:
        try:
            report = verify_axiom(op, n_samples, rng, env)
        except AxiomSampleBudgetError as exc:  # composições com domínio vazio são legais
            theory_logger.warning(action="verify_axiom", message=str(exc), op_id=op.id)
            continue
        instances += report.samples
        violations += len(report.violations)
        per_op[op.id] = len(report.violations)
        if report.violations and first is None:
            first = {"op_id": op.id, **report.violations[0]}

    return VerificationSummary(
        claim="axiom",
        instances=instances,
        violations=violations,
        tightest_case=first,
        details={"ops": per_op},
    )
