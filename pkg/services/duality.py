"""
Duality operations.

A duality operation is a triple (transform, answer mapping, applicability
domain). The axiom every operation must satisfy on its domain:

    ground_truth(T(v, q)) == phi(ground_truth(v, q))

Transforms are split into a scene part and a query part. Both are pure
functions of their own input, so the intermediate query of a composed chain
can be recomputed from the original query alone (map_answer relies on it).

Composed ids are canonical chains "op1∘op2": op2 is applied first.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from schemas.config import EnvConfig
from services.scene_env import (
    GRAY,
    TEMPLATE_VARIANTS,
    OracleError,
    Query,
    Scene,
    ground_truth,
    is_resolvable,
    sample_example,
)
from utils.structured_logging import pool_logger

COMPOSE = "∘"

PALETTE_INVOLUTION = {
    "red": "green",
    "green": "red",
    "blue": "yellow",
    "yellow": "blue",
    "black": "white",
    "white": "black",
}

HFLIP_MAP = {
    "left": "right",
    "right": "left",
    "top_left": "top_right",
    "top_right": "top_left",
    "bottom_left": "bottom_right",
    "bottom_right": "bottom_left",
}

VFLIP_MAP = {
    "above": "below",
    "below": "above",
    "top_left": "bottom_left",
    "bottom_left": "top_left",
    "top_right": "bottom_right",
    "bottom_right": "top_right",
}

ROT180_MAP = {
    "left": "right",
    "right": "left",
    "above": "below",
    "below": "above",
    "top_left": "bottom_right",
    "bottom_right": "top_left",
    "top_right": "bottom_left",
    "bottom_left": "top_right",
}


class NotApplicableError(ValueError):
    """Raised when an operation is applied to an input outside its domain."""


class AnswerMappingError(RuntimeError):
    """Raised when the mapped answer content is absent from the dual options."""


class AxiomSampleBudgetError(RuntimeError):
    """Raised when no in-domain sample is found within the attempt budget."""


class RegistryFormatError(ValueError):
    """Raised when an exported operation registry does not match the operations it names."""


class UnknownOperationError(KeyError):
    """Raised when an operation id does not name a built-in or a chain of built-ins."""


def reverse_permutation(n_options: int) -> Tuple[int, ...]:
    return tuple(n_options - 1 - i for i in range(n_options))


def cycle_permutation(n_options: int) -> Tuple[int, ...]:
    return tuple((i + 1) % n_options for i in range(n_options))


def swap_permutation(n_options: int) -> Tuple[int, ...]:
    if n_options != 2:
        raise AnswerMappingError("negation mapping is only defined for binary questions")
    return (1, 0)


def invert_permutation(perm: Sequence[int]) -> Tuple[int, ...]:
    inverse = [0] * len(perm)
    for i, p in enumerate(perm):
        inverse[p] = i
    return tuple(inverse)


@dataclass(frozen=True)
class AnswerMapping:
    """
    phi at content level (content_map / identity) or at index level
    (position_permutation). ``composite`` chains the mappings of ``parts``.
    """
    kind: str
    content_map: Mapping[str, str] = field(default_factory=dict)
    permutation: Optional[Callable[[int], Tuple[int, ...]]] = None


IDENTITY = AnswerMapping("identity")


@dataclass(frozen=True)
class DualityOp:
    id: str
    mapping: AnswerMapping = field(compare=False)
    scene_fn: Callable[[Scene], Scene] = field(compare=False)
    query_fn: Callable[[Query], Query] = field(compare=False)
    domain: Callable[[Scene, Query], bool] = field(compare=False)
    domain_tag: str = field(default="all", compare=False)
    parts: Tuple["DualityOp", ...] = field(default=(), compare=False)

    @property
    def transform_chain(self) -> Tuple[str, ...]:
        return tuple(self.id.split(COMPOSE))

    @property
    def is_composite(self) -> bool:
        return bool(self.parts)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "transform_chain": list(self.transform_chain),
            "mapping_kind": self.mapping.kind,
            "domain_tag": self.domain_tag,
        }


# ---------------------------------------------------------------------------
# Primitive transforms
# ---------------------------------------------------------------------------

def _map_objects(scene: Scene, fn) -> Scene:
    return replace(scene, objects=tuple(fn(obj) for obj in scene.objects))


def _hflip_scene(scene: Scene) -> Scene:
    g = scene.grid_size
    return _map_objects(scene, lambda o: replace(o, x=g - 1 - o.x))


def _vflip_scene(scene: Scene) -> Scene:
    g = scene.grid_size
    return _map_objects(scene, lambda o: replace(o, y=g - 1 - o.y))


def _rot180_scene(scene: Scene) -> Scene:
    return _vflip_scene(_hflip_scene(scene))


def _recolor_query(query: Query, color_fn) -> Query:
    def recolor(descriptor):
        if descriptor is None or descriptor.color is None:
            return descriptor
        return replace(descriptor, color=color_fn(descriptor.color))

    return replace(query, subject_ref=recolor(query.subject_ref), object_ref=recolor(query.object_ref))


def _invert_color(color: str) -> str:
    return PALETTE_INVOLUTION.get(color, color)


def _gray(_color: str) -> str:
    return GRAY


def _color_invert_scene(scene: Scene) -> Scene:
    return _map_objects(scene, lambda o: replace(o, color=_invert_color(o.color)))


def _grayscale_scene(scene: Scene) -> Scene:
    return _map_objects(scene, lambda o: replace(o, color=GRAY))


def _permute_options(perm_fn) -> Callable[[Query], Query]:
    def apply_perm(query: Query) -> Query:
        perm = perm_fn(query.n_options)
        return replace(query, options=tuple(query.options[perm[i]] for i in range(query.n_options)))

    return apply_perm


def _negate(query: Query) -> Query:
    return replace(query, negated=True)


def _paraphrase(query: Query) -> Query:
    return replace(query, template_variant=(query.template_variant + 1) % TEMPLATE_VARIANTS)


def _same(value):
    return value


def _always(_scene: Scene, _query: Query) -> bool:
    return True


def _not_color_query(_scene: Scene, query: Query) -> bool:
    return query.kind != "color_of"


def _grayscale_domain(scene: Scene, query: Query) -> bool:
    if query.kind == "color_of":
        return False
    gray_scene = _grayscale_scene(scene)
    gray_query = _recolor_query(query, _gray)
    if query.kind == "count_shape":
        return True
    return is_resolvable(gray_scene, gray_query.subject_ref) and is_resolvable(gray_scene, gray_query.object_ref)


def _binary_unnegated(_scene: Scene, query: Query) -> bool:
    return query.n_options == 2 and not query.negated


BUILTIN_IDS = (
    "hflip",
    "vflip",
    "rot180",
    "color_invert",
    "grayscale",
    "option_reverse",
    "option_cycle",
    "negation",
    "paraphrase",
)


def _build_builtins() -> Dict[str, DualityOp]:
    ops = [
        DualityOp("hflip", AnswerMapping("content_map", HFLIP_MAP), _hflip_scene, _same, _always),
        DualityOp("vflip", AnswerMapping("content_map", VFLIP_MAP), _vflip_scene, _same, _always),
        DualityOp("rot180", AnswerMapping("content_map", ROT180_MAP), _rot180_scene, _same, _always),
        DualityOp(
            "color_invert", IDENTITY, _color_invert_scene,
            lambda q: _recolor_query(q, _invert_color), _not_color_query, domain_tag="non_color",
        ),
        DualityOp(
            "grayscale", IDENTITY, _grayscale_scene,
            lambda q: _recolor_query(q, _gray), _grayscale_domain, domain_tag="non_color_resolvable",
        ),
        DualityOp(
            "option_reverse", AnswerMapping("position_permutation", permutation=reverse_permutation),
            _same, _permute_options(reverse_permutation), _always,
        ),
        DualityOp(
            "option_cycle", AnswerMapping("position_permutation", permutation=cycle_permutation),
            _same, _permute_options(cycle_permutation), _always,
        ),
        DualityOp(
            "negation", AnswerMapping("position_permutation", permutation=swap_permutation),
            _same, _negate, _binary_unnegated, domain_tag="binary_unnegated",
        ),
        DualityOp("paraphrase", IDENTITY, _same, _paraphrase, _always),
    ]
    return {op.id: op for op in ops}


_BUILTINS = _build_builtins()


def builtin_pool() -> List[DualityOp]:
    """The nine built-in operations, in a fixed order."""
    return [_BUILTINS[op_id] for op_id in BUILTIN_IDS]


# ---------------------------------------------------------------------------
# Application, mapping, composition
# ---------------------------------------------------------------------------

def applicable(op: DualityOp, scene: Scene, query: Query) -> bool:
    return bool(op.domain(scene, query))


def apply(op: DualityOp, scene: Scene, query: Query) -> Tuple[Scene, Query]:
    if not applicable(op, scene, query):
        raise NotApplicableError(f"{op.id} is not applicable to this {query.kind} query")
    return op.scene_fn(scene), op.query_fn(query)


def map_answer(op: DualityOp, original_query: Query, dual_query: Query, answer: int) -> int:
    """
    Map an answer index on the original query to the corresponding index on the dual query.

    Raises:
        ValueError: answer out of bounds
        AnswerMappingError: mapped content is not among the dual options
    """
    if not 0 <= answer < original_query.n_options:
        raise ValueError(f"answer {answer} outside [0, {original_query.n_options - 1}]")

    mapping = op.mapping
    if mapping.kind == "composite":
        outer, inner = op.parts
        middle = inner.query_fn(original_query)
        mid_answer = map_answer(inner, original_query, middle, answer)
        return map_answer(outer, middle, dual_query, mid_answer)

    if mapping.kind == "position_permutation":
        perm = mapping.permutation(original_query.n_options)
        return invert_permutation(perm)[answer]

    content = original_query.options[answer]
    if mapping.kind == "content_map":
        content = mapping.content_map.get(content, content)
    try:
        return dual_query.options.index(content)
    except ValueError as exc:
        raise AnswerMappingError(f"{op.id}: mapped content {content!r} absent from {dual_query.options}") from exc


def compose(op1: DualityOp, op2: DualityOp) -> DualityOp:
    """op1 ∘ op2: apply op2 first. Domain is S2 ∩ T2^-1(S1); an empty domain is legal."""

    def domain(scene: Scene, query: Query) -> bool:
        if not op2.domain(scene, query):
            return False
        return op1.domain(op2.scene_fn(scene), op2.query_fn(query))

    return DualityOp(
        id=f"{op1.id}{COMPOSE}{op2.id}",
        mapping=AnswerMapping("composite"),
        scene_fn=lambda scene: op1.scene_fn(op2.scene_fn(scene)),
        query_fn=lambda query: op1.query_fn(op2.query_fn(query)),
        domain=domain,
        domain_tag=f"{op1.domain_tag}{COMPOSE}{op2.domain_tag}",
        parts=(op1, op2),
    )


def resolve_op(op_id: str) -> DualityOp:
    """Rebuild a built-in or a composed chain from its canonical id."""
    names = op_id.split(COMPOSE)
    for name in names:
        if name not in _BUILTINS:
            raise UnknownOperationError(op_id)
    op = _BUILTINS[names[-1]]
    for name in reversed(names[:-1]):
        op = compose(_BUILTINS[name], op)
    return op


def op_from_dict(data: Dict[str, Any]) -> DualityOp:
    """
    Rebuild an operation from its registry entry.

    Raises:
        RegistryFormatError: unknown id, or chain, mapping kind or domain tag
            disagree with the rebuilt op
    """
    if "id" not in data:
        raise RegistryFormatError("registry entry without an id")
    try:
        op = resolve_op(data["id"])
    except UnknownOperationError as exc:
        raise RegistryFormatError(f"unknown operation id {data['id']!r} in registry") from exc
    expected = op.to_dict()
    for key in ("transform_chain", "mapping_kind", "domain_tag"):
        if key in data and data[key] != expected[key]:
            raise RegistryFormatError(f"{op.id}: {key} {data[key]!r} != {expected[key]!r}")
    return op


def export_registry(ops: Sequence[DualityOp]) -> List[Dict[str, Any]]:
    return [op.to_dict() for op in ops]


def import_registry(items: Sequence[Dict[str, Any]]) -> Dict[str, DualityOp]:
    """Registry entries keyed by op id, in file order."""
    registry: Dict[str, DualityOp] = {}
    for item in items:
        op = op_from_dict(item)
        if op.id in registry:
            raise RegistryFormatError(f"duplicate registry entry {op.id}")
        registry[op.id] = op
    return registry


# ---------------------------------------------------------------------------
# Axiom verification
# ---------------------------------------------------------------------------

@dataclass
class AxiomReport:
    op_id: str
    samples: int
    violations: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_pair(op: DualityOp, scene: Scene, query: Query) -> Optional[Dict[str, Any]]:
    """Return a counterexample dict when the axiom fails on (scene, query), else None."""
    dual_scene, dual_query = apply(op, scene, query)
    truth = ground_truth(scene, query)
    try:
        expected = map_answer(op, query, dual_query, truth)
        actual = ground_truth(dual_scene, dual_query)
    except (AnswerMappingError, OracleError) as exc:
        return {"kind": query.kind, "options": list(query.options), "error": str(exc)}
    if expected != actual:
        return {
            "kind": query.kind,
            "options": list(query.options),
            "dual_options": list(dual_query.options),
            "truth": truth,
            "expected": expected,
            "actual": actual,
        }
    return None


def verify_axiom(
    op: DualityOp,
    n_samples: int,
    rng: np.random.Generator,
    config: Optional[EnvConfig] = None,
    max_attempts: Optional[int] = None,
) -> AxiomReport:
    """
    Check the duality axiom on ``n_samples`` in-domain (scene, query) pairs.

    Raises:
        ValueError: n_samples < 1
        AxiomSampleBudgetError: no in-domain pair found within the attempt budget
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    config = config or EnvConfig()
    budget = max_attempts if max_attempts is not None else 50 * n_samples

    report = AxiomReport(op_id=op.id, samples=0)
    attempts = 0
    while report.samples < n_samples and attempts < budget:
        attempts += 1
        scene, query = sample_example(rng, config)
        if not applicable(op, scene, query):
            continue
        report.samples += 1
        violation = check_pair(op, scene, query)
        if violation is not None:
            report.violations.append(violation)

    if report.samples == 0:
        raise AxiomSampleBudgetError(f"no in-domain sample for {op.id} in {budget} attempts")
    return report


# ---------------------------------------------------------------------------
# Candidate discovery
# ---------------------------------------------------------------------------

def behavior_signature(op: DualityOp, probe: Sequence[Tuple[Scene, Query]]) -> Tuple:
    """Behavior of ``op`` on a probe sample: transformed inputs plus the full index map."""
    rows = []
    for scene, query in probe:
        if not applicable(op, scene, query):
            rows.append(None)
            continue
        dual_scene, dual_query = apply(op, scene, query)
        try:
            index_map = tuple(map_answer(op, query, dual_query, a) for a in range(query.n_options))
        except AnswerMappingError:
            index_map = None
        rows.append((dual_scene, dual_query, index_map))
    return tuple(rows)


def is_identity_behavior(signature: Tuple, probe: Sequence[Tuple[Scene, Query]]) -> bool:
    for row, (scene, query) in zip(signature, probe):
        if row is None:
            continue
        dual_scene, dual_query, index_map = row
        if dual_scene != scene or dual_query != query:
            return False
        if index_map != tuple(range(query.n_options)):
            return False
    return True


def discover_candidates(
    probe: Sequence[Tuple[Scene, Query]],
    limit: int,
    rng: np.random.Generator,
    verify_samples: int = 200,
    config: Optional[EnvConfig] = None,
    exclude: Sequence[DualityOp] = (),
) -> List[DualityOp]:
    """
    Depth-2 compositions of built-ins, deduplicated by behavior on ``probe``.

    Drops compositions with an empty domain on the probe, identity behavior, or
    behavior equal to an operation already known; every survivor must pass
    verify_axiom before admission. Stops after ``limit`` candidates.
    """
    if limit <= 0:
        return []
    builtins = builtin_pool()
    seen = {behavior_signature(op, probe) for op in list(builtins) + list(exclude)}
    found: List[DualityOp] = []

    for outer in builtins:
        for inner in builtins:
            if len(found) >= limit:
                return found
            op = compose(outer, inner)
            signature = behavior_signature(op, probe)
            if all(row is None for row in signature):
                continue
            if signature in seen or is_identity_behavior(signature, probe):
                continue
            seen.add(signature)
            try:
                report = verify_axiom(op, verify_samples, rng, config)
            except AxiomSampleBudgetError:
                continue
            if not report.ok:
                pool_logger.warning(
                    action="discover_candidate",
                    message="composition rejected by axiom check",
                    op_id=op.id,
                    violations=len(report.violations),
                )
                continue
            found.append(op)
    return found
