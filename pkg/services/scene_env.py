"""
Scene Environment

Symbolic spatial scenes on a G x G grid plus multiple-choice spatial questions
with an exact ground-truth oracle.

Coordinates: x grows left -> right, y grows top -> bottom (row 0 is the top).
"above" therefore means a smaller y.

Query kinds and their answer contents:
  rel_pos_h    -> "left" / "right"                       (C = 2)
  rel_pos_v    -> "above" / "below"                      (C = 2)
  quadrant     -> "top_left" / "top_right" / ...         (C = 4, all quadrants)
  nearest      -> "obj:<id>" labels of candidate objects (2 <= C <= 4)
  count_shape  -> decimal counts "0", "1", ...           (C in {2, 4})
  color_of     -> color names                            (C in {2, 4})

Negation is only generated (and only meaningful) for binary questions: the
negated question's correct option is the other one.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from schemas.config import EnvConfig, QUERY_KINDS

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "green", "blue", "yellow", "black", "white")
GRAY = "gray"
SIZES = ("small", "large")

QUADRANTS = ("top_left", "top_right", "bottom_left", "bottom_right")
TEMPLATE_VARIANTS = 3

AnswerIndex = int


class InvalidSceneConfigError(ValueError):
    """Raised when the generator config cannot produce a valid scene."""


class UnsatisfiableSceneError(RuntimeError):
    """Raised when no tie-free query can be drawn within the attempt budget."""


class OracleError(RuntimeError):
    """Raised when the ground truth is not well defined (tie, missing or ambiguous referent)."""


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    color: str
    x: int
    y: int
    size: str


@dataclass(frozen=True)
class Scene:
    grid_size: int
    objects: Tuple[SceneObject, ...]

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValueError("grid_size must be positive")
        if len(self.objects) < 2:
            raise ValueError("a scene needs at least two objects")
        cells = set()
        ids = set()
        for obj in self.objects:
            if not (0 <= obj.x < self.grid_size and 0 <= obj.y < self.grid_size):
                raise ValueError(f"object {obj.id} outside the grid")
            if (obj.x, obj.y) in cells:
                raise ValueError(f"two objects share cell ({obj.x}, {obj.y})")
            if obj.id in ids:
                raise ValueError(f"duplicate object id {obj.id}")
            cells.add((obj.x, obj.y))
            ids.add(obj.id)

    def by_id(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise OracleError(f"no object with id {object_id}")


@dataclass(frozen=True)
class Descriptor:
    """Structured referring expression: shape plus optional color and size."""
    shape: str
    color: Optional[str] = None
    size: Optional[str] = None

    def matches(self, obj: SceneObject) -> bool:
        if obj.shape != self.shape:
            return False
        if self.color is not None and obj.color != self.color:
            return False
        if self.size is not None and obj.size != self.size:
            return False
        return True

    def label(self) -> str:
        parts = [p for p in (self.size, self.color, self.shape) if p]
        return "the " + " ".join(parts)


@dataclass(frozen=True)
class Query:
    kind: str
    subject_ref: Descriptor
    object_ref: Optional[Descriptor]
    options: Tuple[str, ...]
    template_variant: int = 0
    negated: bool = False

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")
        if not 2 <= len(self.options) <= 4:
            raise ValueError("a query needs between 2 and 4 options")
        if len(set(self.options)) != len(self.options):
            raise ValueError("options must be distinct")
        if self.negated and len(self.options) != 2:
            raise ValueError("negation is only defined for binary questions")
        if not 0 <= self.template_variant < TEMPLATE_VARIANTS:
            raise ValueError("template_variant out of range")

    @property
    def n_options(self) -> int:
        return len(self.options)

    def render(self) -> str:
        return render_query(self)


_TEMPLATES = {
    "rel_pos_h": (
        "Is {s} to the left or to the right of {o}?",
        "Relative to {o}, is {s} on the left or on the right?",
        "Horizontally, where is {s} compared with {o}?",
    ),
    "rel_pos_v": (
        "Is {s} above or below {o}?",
        "Relative to {o}, is {s} higher or lower?",
        "Vertically, where is {s} compared with {o}?",
    ),
    "quadrant": (
        "In which quadrant of the image is {s}?",
        "Which quarter of the scene contains {s}?",
        "Where in the image is {s} located?",
    ),
    "nearest": (
        "Which object is closest to {s}?",
        "What is the nearest object to {s}?",
        "Which of these objects lies nearest {s}?",
    ),
    "count_shape": (
        "How many {shape}s are there?",
        "Count the {shape}s in the image.",
        "What is the number of {shape}s in the scene?",
    ),
    "color_of": (
        "What color is {s}?",
        "Which color does {s} have?",
        "{s} is which color?",
    ),
}

_NEGATED_TEMPLATES = (
    "Which option is NOT the answer? {q}",
    "{q} Select the option that is NOT correct.",
    "Pick the wrong answer: {q}",
)


def render_query(query: Query) -> str:
    template = _TEMPLATES[query.kind][query.template_variant]
    text = template.format(
        s=query.subject_ref.label(),
        o=query.object_ref.label() if query.object_ref else "",
        shape=query.subject_ref.shape,
    )
    if query.negated:
        text = _NEGATED_TEMPLATES[query.template_variant].format(q=text)
    letters = "ABCD"
    rendered_options = " ".join(f"({letters[i]}) {opt}" for i, opt in enumerate(query.options))
    return f"{text} {rendered_options}"


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------

def resolve(scene: Scene, descriptor: Descriptor) -> SceneObject:
    matches = [obj for obj in scene.objects if descriptor.matches(obj)]
    if not matches:
        raise OracleError(f"descriptor {descriptor.label()!r} matches no object")
    if len(matches) > 1:
        raise OracleError(f"descriptor {descriptor.label()!r} is ambiguous")
    return matches[0]


def is_resolvable(scene: Scene, descriptor: Optional[Descriptor]) -> bool:
    if descriptor is None:
        return True
    return sum(1 for obj in scene.objects if descriptor.matches(obj)) == 1


def object_label(obj: SceneObject) -> str:
    return f"obj:{obj.id}"


def quadrant_of(obj: SceneObject, grid_size: int) -> str:
    twice_center = grid_size - 1
    if 2 * obj.x == twice_center or 2 * obj.y == twice_center:
        raise OracleError(f"object {obj.id} lies on a quadrant boundary")
    vertical = "top" if 2 * obj.y < twice_center else "bottom"
    horizontal = "left" if 2 * obj.x < twice_center else "right"
    return f"{vertical}_{horizontal}"


def squared_distance(a: SceneObject, b: SceneObject) -> int:
    return (a.x - b.x) ** 2 + (a.y - b.y) ** 2


def nearest_object(scene: Scene, subject: SceneObject) -> SceneObject:
    others = sorted(
        (squared_distance(subject, obj), obj.id, obj) for obj in scene.objects if obj.id != subject.id
    )
    if len(others) >= 2 and others[0][0] == others[1][0]:
        raise OracleError(f"nearest object to {subject.id} is tied")
    return others[0][2]


def truth_content(scene: Scene, query: Query) -> str:
    """Correct answer content of the un-negated question."""
    kind = query.kind
    if kind == "count_shape":
        return str(sum(1 for obj in scene.objects if query.subject_ref.matches(obj)))

    subject = resolve(scene, query.subject_ref)
    if kind == "rel_pos_h":
        other = resolve(scene, query.object_ref)
        if subject.x == other.x:
            raise OracleError("equal x coordinates")
        return "left" if subject.x < other.x else "right"
    if kind == "rel_pos_v":
        other = resolve(scene, query.object_ref)
        if subject.y == other.y:
            raise OracleError("equal y coordinates")
        return "above" if subject.y < other.y else "below"
    if kind == "quadrant":
        return quadrant_of(subject, scene.grid_size)
    if kind == "nearest":
        return object_label(nearest_object(scene, subject))
    if kind == "color_of":
        return subject.color
    raise OracleError(f"unsupported query kind {kind!r}")


def ground_truth(scene: Scene, query: Query) -> AnswerIndex:
    """
    Exact answer index a*(v, q).

    Raises:
        OracleError: tie, missing/ambiguous referent, or truth absent from the options
    """
    content = truth_content(scene, query)
    try:
        index = query.options.index(content)
    except ValueError as exc:
        raise OracleError(f"truth {content!r} not among options {query.options}") from exc
    if query.negated:
        return 1 - index
    return index


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def generate_scene(rng: np.random.Generator, config: EnvConfig) -> Scene:
    """Draw a scene with distinct cells; deterministic given the generator state."""
    grid = config.grid_size
    lo, hi = config.min_objects, config.max_objects
    if lo < 2 or lo > hi:
        raise InvalidSceneConfigError(f"invalid object count range [{lo}, {hi}]")
    if hi > grid * grid:
        raise InvalidSceneConfigError(
            f"{hi} objects cannot occupy distinct cells of a {grid}x{grid} grid"
        )

    n_objects = int(rng.integers(lo, hi + 1))
    cells = rng.choice(grid * grid, size=n_objects, replace=False)
    shapes = rng.integers(0, len(SHAPES), size=n_objects)
    colors = rng.integers(0, len(COLORS), size=n_objects)
    sizes = rng.integers(0, len(SIZES), size=n_objects)

    objects = tuple(
        SceneObject(
            id=i,
            shape=SHAPES[shapes[i]],
            color=COLORS[colors[i]],
            x=int(cells[i] % grid),
            y=int(cells[i] // grid),
            size=SIZES[sizes[i]],
        )
        for i in range(n_objects)
    )
    return Scene(grid_size=grid, objects=objects)


def unique_descriptor(scene: Scene, obj: SceneObject, allow_color: bool = True) -> Optional[Descriptor]:
    """Shortest descriptor that picks out ``obj`` alone, or None."""
    candidates = [Descriptor(obj.shape), Descriptor(obj.shape, size=obj.size)]
    if allow_color:
        candidates += [
            Descriptor(obj.shape, color=obj.color),
            Descriptor(obj.shape, color=obj.color, size=obj.size),
        ]
    for descriptor in candidates:
        if is_resolvable(scene, descriptor):
            return descriptor
    return None


def _referenceable(scene: Scene, allow_color: bool = True) -> List[Tuple[SceneObject, Descriptor]]:
    out = []
    for obj in scene.objects:
        descriptor = unique_descriptor(scene, obj, allow_color=allow_color)
        if descriptor is not None:
            out.append((obj, descriptor))
    return out


def _layout(rng: np.random.Generator, correct: str, others: Sequence[str], bias: float) -> Tuple[str, ...]:
    """Place the correct option first with probability ``bias``, otherwise shuffle uniformly."""
    if rng.random() < bias:
        rest = [others[i] for i in rng.permutation(len(others))]
        return tuple([correct] + rest)
    pool = [correct] + list(others)
    return tuple(pool[i] for i in rng.permutation(len(pool)))


def _finish(
    rng: np.random.Generator,
    config: EnvConfig,
    kind: str,
    subject: Descriptor,
    obj: Optional[Descriptor],
    truth: str,
    distractors: Sequence[str],
) -> Query:
    variant = int(rng.integers(0, TEMPLATE_VARIANTS))
    negated = len(distractors) == 1 and rng.random() < config.negation_rate
    # the option placed by the layout bias is the one that is correct for the final question
    correct = distractors[0] if negated else truth
    others = [truth] if negated else list(distractors)
    options = _layout(rng, correct, others, config.answer_position_bias)
    return Query(kind, subject, obj, options, template_variant=variant, negated=negated)


def _pair(rng: np.random.Generator, refs):
    if len(refs) < 2:
        return None
    i, j = rng.choice(len(refs), size=2, replace=False)
    return refs[int(i)], refs[int(j)]


def _build_rel_pos(rng, scene, config, kind):
    pair = _pair(rng, _referenceable(scene))
    if pair is None:
        return None
    (s, s_ref), (o, o_ref) = pair
    if kind == "rel_pos_h":
        if s.x == o.x:
            return None
        truth, other = ("left", "right") if s.x < o.x else ("right", "left")
    else:
        if s.y == o.y:
            return None
        truth, other = ("above", "below") if s.y < o.y else ("below", "above")
    return _finish(rng, config, kind, s_ref, o_ref, truth, [other])


def _build_quadrant(rng, scene, config):
    refs = _referenceable(scene)
    if not refs:
        return None
    s, s_ref = refs[int(rng.integers(0, len(refs)))]
    try:
        truth = quadrant_of(s, scene.grid_size)
    except OracleError:
        return None
    others = [q for q in QUADRANTS if q != truth]
    return _finish(rng, config, "quadrant", s_ref, None, truth, others)


def _build_nearest(rng, scene, config):
    if len(scene.objects) < 3:
        return None
    refs = _referenceable(scene)
    if not refs:
        return None
    s, s_ref = refs[int(rng.integers(0, len(refs)))]
    try:
        nearest = nearest_object(scene, s)
    except OracleError:
        return None
    rest = [obj for obj in scene.objects if obj.id not in (s.id, nearest.id)]
    n_options = min(4, len(rest) + 1)
    picked = rng.choice(len(rest), size=n_options - 1, replace=False)
    distractors = [object_label(rest[int(i)]) for i in picked]
    return _finish(rng, config, "nearest", s_ref, None, object_label(nearest), distractors)


def _build_count(rng, scene, config):
    shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
    count = sum(1 for obj in scene.objects if obj.shape == shape)
    n_options = 2 if rng.random() < 0.5 else 4
    candidates = [c for c in range(max(0, count - 3), count + 4) if c != count]
    picked = rng.choice(len(candidates), size=n_options - 1, replace=False)
    distractors = [str(candidates[int(i)]) for i in picked]
    return _finish(rng, config, "count_shape", Descriptor(shape), None, str(count), distractors)


def _build_color(rng, scene, config):
    refs = _referenceable(scene, allow_color=False)
    if not refs:
        return None
    s, s_ref = refs[int(rng.integers(0, len(refs)))]
    n_options = 2 if rng.random() < 0.5 else 4
    candidates = [c for c in COLORS if c != s.color]
    picked = rng.choice(len(candidates), size=n_options - 1, replace=False)
    distractors = [candidates[int(i)] for i in picked]
    return _finish(rng, config, "color_of", s_ref, None, s.color, distractors)


def _build(rng, scene, config, kind) -> Optional[Query]:
    if kind in ("rel_pos_h", "rel_pos_v"):
        return _build_rel_pos(rng, scene, config, kind)
    if kind == "quadrant":
        return _build_quadrant(rng, scene, config)
    if kind == "nearest":
        return _build_nearest(rng, scene, config)
    if kind == "count_shape":
        return _build_count(rng, scene, config)
    return _build_color(rng, scene, config)


def generate_query(rng: np.random.Generator, scene: Scene, config: Optional[EnvConfig] = None) -> Query:
    """
    Draw a tie-free question about ``scene``.

    Kinds are drawn uniformly from ``config.kinds``; a draw that would need a
    tie-break (equal coordinates, equidistant neighbours, boundary cell) or an
    unreferenceable object is rejected and another kind is drawn.

    Raises:
        UnsatisfiableSceneError: no acceptable query within ``config.max_attempts``
    """
    config = config or EnvConfig()
    kinds = list(config.kinds)
    for _ in range(config.max_attempts):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        query = _build(rng, scene, config, kind)
        if query is not None:
            return query
    raise UnsatisfiableSceneError(
        f"no tie-free query found in {config.max_attempts} attempts for kinds {kinds}"
    )


def sample_example(rng: np.random.Generator, config: EnvConfig) -> Tuple[Scene, Query]:
    """Draw a (scene, query) pair, redrawing the scene when it admits no query."""
    for _ in range(config.max_attempts):
        scene = generate_scene(rng, config)
        try:
            return scene, generate_query(rng, scene, config)
        except UnsatisfiableSceneError:
            continue
    raise UnsatisfiableSceneError("no scene admitted a query within the attempt budget")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> Dict[str, Any]:
    return {"grid_size": scene.grid_size, "objects": [asdict(obj) for obj in scene.objects]}


def scene_from_dict(data: Dict[str, Any]) -> Scene:
    return Scene(
        grid_size=int(data["grid_size"]),
        objects=tuple(SceneObject(**obj) for obj in data["objects"]),
    )


def descriptor_to_dict(descriptor: Optional[Descriptor]) -> Optional[Dict[str, Any]]:
    return None if descriptor is None else asdict(descriptor)


def descriptor_from_dict(data: Optional[Dict[str, Any]]) -> Optional[Descriptor]:
    return None if data is None else Descriptor(**data)


def query_to_dict(query: Query) -> Dict[str, Any]:
    return {
        "kind": query.kind,
        "subject_ref": descriptor_to_dict(query.subject_ref),
        "object_ref": descriptor_to_dict(query.object_ref),
        "options": list(query.options),
        "template_variant": query.template_variant,
        "negated": query.negated,
    }


def query_from_dict(data: Dict[str, Any]) -> Query:
    return Query(
        kind=data["kind"],
        subject_ref=descriptor_from_dict(data["subject_ref"]),
        object_ref=descriptor_from_dict(data.get("object_ref")),
        options=tuple(data["options"]),
        template_variant=int(data.get("template_variant", 0)),
        negated=bool(data.get("negated", False)),
    )
