"""
Categorical answer policy.

Each option k of a question gets a feature vector f_k (see FEATURE_LAYOUT) and a score

    s_k = w . f_k                          (linear, default)
    s_k = w . f_k + v . tanh(U f_k)        (hidden_units > 0)

The answer distribution is softmax(s). A separate Bernoulli head with logit b
decides whether a completion is well formatted. Parameters are treated as
immutable values: updates return new PolicyParams.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from schemas.config import QUERY_KINDS
from services.scene_env import (
    COLORS,
    GRAY,
    OracleError,
    Query,
    Scene,
    SceneObject,
    TEMPLATE_VARIANTS,
    resolve,
)

SCHEMA_VERSION = 1
MAX_OPTIONS = 4

SPATIAL_LABELS = (
    "left", "right", "above", "below",
    "top_left", "top_right", "bottom_left", "bottom_right",
)
CONTENT_SLOTS = SPATIAL_LABELS + ("object", "count", "color")

FEATURE_LAYOUT = (
    ("kind", len(QUERY_KINDS)),
    ("content", len(CONTENT_SLOTS)),
    ("position", MAX_OPTIONS),
    ("delta", 2),
    ("agreement", 1),
    ("negated_agreement", 1),
    ("side", 2),
    ("variant_position", TEMPLATE_VARIANTS * MAX_OPTIONS),
    ("variant", TEMPLATE_VARIANTS),
    ("negated", 1),
)

OFFSETS: Dict[str, int] = {}
_cursor = 0
for _name, _width in FEATURE_LAYOUT:
    OFFSETS[_name] = _cursor
    _cursor += _width
FEATURE_DIM = _cursor

POSITION0 = OFFSETS["position"]
AGREEMENT = OFFSETS["agreement"]
NEGATED_AGREEMENT = OFFSETS["negated_agreement"]
SIDE_H = OFFSETS["side"]
SIDE_V = OFFSETS["side"] + 1

_LEFT_CONTENT = {"left": 1.0, "top_left": 1.0, "bottom_left": 1.0, "right": -1.0, "top_right": -1.0, "bottom_right": -1.0}
_TOP_CONTENT = {"above": 1.0, "top_left": 1.0, "top_right": 1.0, "below": -1.0, "bottom_left": -1.0, "bottom_right": -1.0}


class NonFiniteScoreError(ValueError):
    """Raised when option scores are not finite (parameter blow-up)."""


class CheckpointFormatError(ValueError):
    """Raised when a policy checkpoint does not match the expected schema."""


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def _content_slot(content: str) -> int:
    if content in SPATIAL_LABELS:
        return SPATIAL_LABELS.index(content)
    if content.startswith("obj:"):
        return CONTENT_SLOTS.index("object")
    if content.isdigit():
        return CONTENT_SLOTS.index("count")
    if content in COLORS or content == GRAY:
        return CONTENT_SLOTS.index("color")
    raise ValueError(f"unknown option content {content!r}")


def _half_sign(coord: int, grid_size: int) -> float:
    twice = 2 * coord
    if twice < grid_size - 1:
        return 1.0
    if twice > grid_size - 1:
        return -1.0
    return 0.0


def _agreement(scene: Scene, query: Query, subject: Optional[SceneObject], other: Optional[SceneObject]) -> np.ndarray:
    """+1 exactly for the truthful option content, lower for the others."""
    # On relation and quadrant questions the delta features are identical on
    # every option row, so they cancel in the softmax; a linear score needs a
    # per-option content-vs-scene term to express the correct rule at all.
    options = query.options
    n = len(options)
    out = np.zeros(n)
    kind = query.kind

    if kind == "count_shape":
        actual = sum(1 for obj in scene.objects if query.subject_ref.matches(obj))
        g = scene.grid_size
        for k, content in enumerate(options):
            out[k] = 1.0 - 2.0 * min(abs(int(content) - actual), g) / g
        return out

    if subject is None:
        return out

    if kind in ("rel_pos_h", "rel_pos_v") and other is not None:
        if kind == "rel_pos_h":
            truth = "left" if subject.x < other.x else "right"
        else:
            truth = "above" if subject.y < other.y else "below"
        for k, content in enumerate(options):
            out[k] = 1.0 if content == truth else -1.0
    elif kind == "quadrant":
        h = _half_sign(subject.x, scene.grid_size)
        v = _half_sign(subject.y, scene.grid_size)
        for k, content in enumerate(options):
            out[k] = (h * _LEFT_CONTENT.get(content, 0.0) + v * _TOP_CONTENT.get(content, 0.0)) / 2.0
    elif kind == "nearest":
        dists = []
        for content in options:
            target = scene.by_id(int(content.split(":", 1)[1]))
            dists.append(float(np.hypot(target.x - subject.x, target.y - subject.y)))
        dists = np.asarray(dists)
        spread = dists.max() - dists.min()
        out = np.ones(n) if spread == 0 else 1.0 - 2.0 * (dists - dists.min()) / spread
    elif kind == "color_of":
        for k, content in enumerate(options):
            out[k] = 1.0 if content == subject.color else -1.0
    return out


def option_features(scene: Scene, query: Query) -> np.ndarray:
    """Feature matrix of shape (C, FEATURE_DIM), entries clipped to [-1, 1]."""
    n = query.n_options
    g = float(scene.grid_size)
    feats = np.zeros((n, FEATURE_DIM))

    subject = other = None
    if query.kind != "count_shape":
        try:
            subject = resolve(scene, query.subject_ref)
            if query.object_ref is not None:
                other = resolve(scene, query.object_ref)
        except OracleError:
            subject = other = None

    agreement = _agreement(scene, query, subject, other)
    kind_index = QUERY_KINDS.index(query.kind)
    variant = query.template_variant
    negated = 1.0 if query.negated else 0.0
    center = (scene.grid_size - 1) / 2.0

    for k, content in enumerate(query.options):
        row = feats[k]
        row[OFFSETS["kind"] + kind_index] = 1.0
        row[OFFSETS["content"] + _content_slot(content)] = 1.0
        row[OFFSETS["position"] + k] = 1.0

        if subject is not None:
            if other is not None:
                ref_x, ref_y = other.x, other.y
            elif query.kind == "nearest":
                target = scene.by_id(int(content.split(":", 1)[1]))
                ref_x, ref_y = target.x, target.y
            else:
                ref_x, ref_y = center, center
            row[OFFSETS["delta"]] = (subject.x - ref_x) / g
            row[OFFSETS["delta"] + 1] = (subject.y - ref_y) / g
            row[SIDE_H] = _half_sign(subject.x, scene.grid_size) * _LEFT_CONTENT.get(content, 0.0)
            row[SIDE_V] = _half_sign(subject.y, scene.grid_size) * _TOP_CONTENT.get(content, 0.0)

        row[AGREEMENT] = agreement[k]
        row[NEGATED_AGREEMENT] = negated * agreement[k]
        row[OFFSETS["variant_position"] + variant * MAX_OPTIONS + k] = 1.0
        row[OFFSETS["variant"] + variant] = 1.0
        row[OFFSETS["negated"]] = negated

    return np.clip(feats, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PolicyParams:
    w: np.ndarray
    b: float
    U: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    @property
    def hidden_units(self) -> int:
        return 0 if self.U is None else int(self.U.shape[0])

    def flat(self) -> np.ndarray:
        parts = [np.asarray(self.w, dtype=float), np.array([self.b], dtype=float)]
        if self.U is not None:
            parts += [np.asarray(self.U, dtype=float).ravel(), np.asarray(self.v, dtype=float)]
        return np.concatenate(parts)

    def with_flat(self, vector: np.ndarray) -> "PolicyParams":
        vector = np.asarray(vector, dtype=float)
        d = len(self.w)
        w = vector[:d].copy()
        b = float(vector[d])
        if self.U is None:
            return PolicyParams(w=w, b=b)
        h = self.hidden_units
        U = vector[d + 1:d + 1 + h * d].reshape(h, d).copy()
        v = vector[d + 1 + h * d:].copy()
        return PolicyParams(w=w, b=b, U=U, v=v)

    def axpy(self, alpha: float, other: "PolicyParams") -> "PolicyParams":
        """Return self + alpha * other."""
        return self.with_flat(self.flat() + alpha * other.flat())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))

    def copy(self) -> "PolicyParams":
        return self.with_flat(self.flat())

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "w": [float(x) for x in self.w],
            "b": float(self.b),
            "feature_dim": int(len(self.w)),
            "schema_version": SCHEMA_VERSION,
            "hidden": None,
        }
        if self.U is not None:
            data["hidden"] = {
                "U": [[float(x) for x in row] for row in self.U],
                "v": [float(x) for x in self.v],
            }
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PolicyParams":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise CheckpointFormatError(f"unsupported schema_version {data.get('schema_version')!r}")
        w = np.asarray(data["w"], dtype=float)
        if data.get("feature_dim") != FEATURE_DIM or w.shape != (FEATURE_DIM,):
            raise CheckpointFormatError(f"expected feature_dim {FEATURE_DIM}, got {data.get('feature_dim')!r}")
        hidden = data.get("hidden")
        if not hidden:
            return cls(w=w, b=float(data["b"]))
        U = np.asarray(hidden["U"], dtype=float)
        v = np.asarray(hidden["v"], dtype=float)
        if U.ndim != 2 or U.shape[1] != FEATURE_DIM or v.shape != (U.shape[0],):
            raise CheckpointFormatError("hidden layer shapes do not match")
        return cls(w=w, b=float(data["b"]), U=U, v=v)


def zero_params(hidden_units: int = 0) -> PolicyParams:
    if hidden_units:
        return PolicyParams(
            w=np.zeros(FEATURE_DIM), b=0.0,
            U=np.zeros((hidden_units, FEATURE_DIM)), v=np.zeros(hidden_units),
        )
    return PolicyParams(w=np.zeros(FEATURE_DIM), b=0.0)


def biased_init(
    rng: np.random.Generator,
    bias_strength: float,
    init_scale: float = 0.05,
    hidden_units: int = 0,
    format_logit: float = 0.0,
) -> PolicyParams:
    """
    Shortcut-prone starting point: strong weight on option position 0, a weaker
    pull towards the option that names the subject's own visual-field side, and
    small random weights everywhere else.
    """
    if bias_strength < 0:
        raise ValueError("bias_strength must be >= 0")
    w = rng.normal(0.0, init_scale, FEATURE_DIM)
    w[POSITION0] = bias_strength
    w[SIDE_H] = bias_strength / 3.0
    w[SIDE_V] = bias_strength / 3.0
    if not hidden_units:
        return PolicyParams(w=w, b=float(format_logit))
    U = rng.normal(0.0, init_scale, (hidden_units, FEATURE_DIM))
    v = rng.normal(0.0, init_scale, hidden_units)
    return PolicyParams(w=w, b=float(format_logit), U=U, v=v)


def oracle_params(format_logit: float = 10.0) -> PolicyParams:
    """Parameters that answer every question by its agreement feature (negation-aware)."""
    w = np.zeros(FEATURE_DIM)
    w[AGREEMENT] = 10.0
    w[NEGATED_AGREEMENT] = -20.0
    return PolicyParams(w=w, b=float(format_logit))


# ---------------------------------------------------------------------------
# Distribution, sampling, gradients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Completion:
    answer: int
    formatted: bool
    log_prob: float


def _log_sigmoid(x: float) -> float:
    return -float(np.logaddexp(0.0, -x))


def _sigmoid(x: float) -> float:
    return float(np.exp(_log_sigmoid(x)))


def score_jacobian(params: PolicyParams, feats: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Scores s (C,) and ds/dtheta (C, P) in flat layout; the b column is zero."""
    n = feats.shape[0]
    scores = feats @ params.w
    d = FEATURE_DIM
    size = params.flat().shape[0]
    jac = np.zeros((n, size))
    jac[:, :d] = feats
    if params.U is not None:
        hidden = np.tanh(feats @ params.U.T)  # (C, H)
        scores = scores + hidden @ params.v
        h = params.hidden_units
        for k in range(n):
            du = np.outer(params.v * (1.0 - hidden[k] ** 2), feats[k])
            jac[k, d + 1:d + 1 + h * d] = du.ravel()
            jac[k, d + 1 + h * d:] = hidden[k]
    return scores, jac


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(scores)):
        raise NonFiniteScoreError(f"non-finite option scores {scores.tolist()}")
    return scores - np.logaddexp.reduce(scores)


def option_scores(params: PolicyParams, scene: Scene, query: Query) -> np.ndarray:
    scores, _ = score_jacobian(params, option_features(scene, query))
    return scores


def answer_log_probs(params: PolicyParams, scene: Scene, query: Query) -> np.ndarray:
    return _log_softmax(option_scores(params, scene, query))


def answer_distribution(params: PolicyParams, scene: Scene, query: Query) -> np.ndarray:
    """
    Probability of each option.

    Raises:
        NonFiniteScoreError: scores overflowed
    """
    return np.exp(answer_log_probs(params, scene, query))


def greedy_answer(params: PolicyParams, scene: Scene, query: Query) -> int:
    """argmax over options; np.argmax returns the lowest index on ties."""
    scores = option_scores(params, scene, query)
    if not np.all(np.isfinite(scores)):
        raise NonFiniteScoreError(f"non-finite option scores {scores.tolist()}")
    return int(np.argmax(scores))


def completion_log_prob(params: PolicyParams, scene: Scene, query: Query, answer: int, formatted: bool) -> float:
    log_p = answer_log_probs(params, scene, query)[answer]
    log_fmt = _log_sigmoid(params.b) if formatted else _log_sigmoid(-params.b)
    return float(log_p + log_fmt)


def sample_completions(
    params: PolicyParams, scene: Scene, query: Query, n: int, rng: np.random.Generator
) -> List[Completion]:
    """Draw ``n`` completions: answers first, then the format flags."""
    if n < 1:
        raise ValueError("n must be >= 1")
    log_p = answer_log_probs(params, scene, query)
    probs = np.exp(log_p)
    probs = probs / probs.sum()
    answers = rng.choice(len(probs), size=n, p=probs)
    p_fmt = _sigmoid(params.b)
    formatted = rng.random(n) < p_fmt
    log_fmt_yes = _log_sigmoid(params.b)
    log_fmt_no = _log_sigmoid(-params.b)
    return [
        Completion(
            answer=int(a),
            formatted=bool(f),
            log_prob=float(log_p[a] + (log_fmt_yes if f else log_fmt_no)),
        )
        for a, f in zip(answers, formatted)
    ]


def grad_log_prob(params: PolicyParams, scene: Scene, query: Query, completion: Completion) -> PolicyParams:
    """Analytic gradient of log p(answer, formatted) in the shape of PolicyParams."""
    if not 0 <= completion.answer < query.n_options:
        raise ValueError(f"answer {completion.answer} outside the option range")
    scores, jac = score_jacobian(params, option_features(scene, query))
    probs = np.exp(_log_softmax(scores))
    grad = jac[completion.answer] - probs @ jac
    grad[FEATURE_DIM] = (1.0 if completion.formatted else 0.0) - _sigmoid(params.b)
    return params.with_flat(grad)


def kl_to_reference(
    params: PolicyParams, ref_params: PolicyParams, scene: Scene, query: Query
) -> Tuple[float, PolicyParams]:
    """
    Exact KL(pi_theta || pi_ref) over the answer options plus the Bernoulli
    format head, and its gradient with respect to params.
    """
    feats = option_features(scene, query)
    scores, jac = score_jacobian(params, feats)
    ref_scores, _ = score_jacobian(ref_params, feats)
    log_p = _log_softmax(scores)
    log_r = _log_softmax(ref_scores)
    probs = np.exp(log_p)
    diff = log_p - log_r
    kl_answer = float(probs @ diff)
    score_grad = probs * (diff - kl_answer)
    grad = score_grad @ jac

    b, b_ref = params.b, ref_params.b
    q = _sigmoid(b)
    log_q, log_1q = _log_sigmoid(b), _log_sigmoid(-b)
    log_r1, log_r0 = _log_sigmoid(b_ref), _log_sigmoid(-b_ref)
    kl_format = q * (log_q - log_r1) + (1.0 - q) * (log_1q - log_r0)
    grad[FEATURE_DIM] = q * (1.0 - q) * (b - b_ref)

    value = max(kl_answer, 0.0) + max(float(kl_format), 0.0)
    return value, params.with_flat(grad)
