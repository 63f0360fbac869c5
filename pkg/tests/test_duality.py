"""
Duality operations: transforms, answer mappings, composition and the axiom check.
"""

import os
import sys

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from config import config
from schemas.config import EnvConfig
from services.duality import (
    BUILTIN_IDS,
    IDENTITY,
    AxiomSampleBudgetError,
    DualityOp,
    NotApplicableError,
    RegistryFormatError,
    UnknownOperationError,
    applicable,
    apply,
    behavior_signature,
    builtin_pool,
    compose,
    discover_candidates,
    export_registry,
    import_registry,
    is_identity_behavior,
    map_answer,
    op_from_dict,
    resolve_op,
    verify_axiom,
)
from services.pool import build_probe_set
from services.scene_env import (
    QUADRANTS,
    Descriptor,
    Query,
    Scene,
    SceneObject,
    ground_truth,
)


def _obj(i, shape, x, y, color="red", size="small"):
    return SceneObject(id=i, shape=shape, color=color, x=x, y=y, size=size)


SCENE = Scene(8, (_obj(0, "circle", 1, 3), _obj(1, "square", 5, 3, color="blue")))
LEFT_RIGHT = Query("rel_pos_h", Descriptor("circle"), Descriptor("square"), ("left", "right"))


class TestBuiltins:
    def test_nine_builtins_in_fixed_order(self):
        ops = builtin_pool()
        assert [op.id for op in ops] == list(BUILTIN_IDS)
        assert len(ops) == 9

    def test_hflip_moves_objects(self):
        dual_scene, dual_query = apply(resolve_op("hflip"), SCENE, LEFT_RIGHT)
        assert (dual_scene.objects[0].x, dual_scene.objects[0].y) == (6, 3)
        assert dual_query == LEFT_RIGHT

    def test_option_reverse(self):
        query = Query("quadrant", Descriptor("circle"), None, QUADRANTS)
        _, dual_query = apply(resolve_op("option_reverse"), SCENE, query)
        assert dual_query.options == tuple(reversed(QUADRANTS))

    def test_negation_marks_query(self):
        dual_scene, dual_query = apply(resolve_op("negation"), SCENE, LEFT_RIGHT)
        assert dual_query.negated
        assert dual_scene == SCENE
        assert "NOT" in dual_query.render()

    def test_negation_outside_domain(self):
        query = Query("quadrant", Descriptor("circle"), None, QUADRANTS)
        with pytest.raises(NotApplicableError):
            apply(resolve_op("negation"), SCENE, query)

    def test_color_invert_skips_color_questions(self):
        query = Query("color_of", Descriptor("circle"), None, ("red", "blue"))
        assert not applicable(resolve_op("color_invert"), SCENE, query)

    def test_color_invert_uses_palette_involution(self):
        dual_scene, _ = apply(resolve_op("color_invert"), SCENE, LEFT_RIGHT)
        assert [o.color for o in dual_scene.objects] == ["green", "yellow"]

    def test_paraphrase_cycles_template(self):
        _, dual_query = apply(resolve_op("paraphrase"), SCENE, LEFT_RIGHT)
        assert dual_query.template_variant == 1
        assert dual_query.render() != LEFT_RIGHT.render()


class TestMapAnswer:
    def test_hflip_left_becomes_right(self):
        op = resolve_op("hflip")
        dual_scene, dual_query = apply(op, SCENE, LEFT_RIGHT)
        assert map_answer(op, LEFT_RIGHT, dual_query, 0) == 1
        assert ground_truth(dual_scene, dual_query) == 1

    def test_option_reverse_tracks_content(self):
        op = resolve_op("option_reverse")
        query = Query("quadrant", Descriptor("circle"), None, QUADRANTS)
        _, dual_query = apply(op, SCENE, query)
        assert map_answer(op, query, dual_query, 1) == 2
        for answer in range(4):
            mapped = map_answer(op, query, dual_query, answer)
            assert dual_query.options[mapped] == query.options[answer]

    def test_option_cycle_tracks_content(self):
        op = resolve_op("option_cycle")
        query = Query("quadrant", Descriptor("circle"), None, QUADRANTS)
        _, dual_query = apply(op, SCENE, query)
        for answer in range(4):
            assert dual_query.options[map_answer(op, query, dual_query, answer)] == query.options[answer]

    def test_paraphrase_is_identity(self):
        op = resolve_op("paraphrase")
        _, dual_query = apply(op, SCENE, LEFT_RIGHT)
        assert [map_answer(op, LEFT_RIGHT, dual_query, a) for a in range(2)] == [0, 1]

    def test_negation_swaps(self):
        op = resolve_op("negation")
        _, dual_query = apply(op, SCENE, LEFT_RIGHT)
        assert map_answer(op, LEFT_RIGHT, dual_query, 0) == 1

    def test_out_of_range_answer(self):
        op = resolve_op("hflip")
        with pytest.raises(ValueError):
            map_answer(op, LEFT_RIGHT, LEFT_RIGHT, 2)

    @pytest.mark.parametrize("op_id", BUILTIN_IDS + ("hflip∘option_reverse∘paraphrase",))
    def test_index_map_is_a_bijection(self, op_id):
        op = resolve_op(op_id)
        seen = 0
        for scene, query in build_probe_set(np.random.default_rng(4), 200, EnvConfig()):
            if not applicable(op, scene, query):
                continue
            _, dual_query = apply(op, scene, query)
            mapped = [map_answer(op, query, dual_query, a) for a in range(query.n_options)]
            assert sorted(mapped) == list(range(dual_query.n_options))
            seen += 1
        assert seen > 0


class TestCompose:
    def test_canonical_id(self):
        op = compose(resolve_op("hflip"), resolve_op("vflip"))
        assert op.id == "hflip∘vflip"
        assert op.transform_chain == ("hflip", "vflip")
        assert op.is_composite
        assert op.to_dict()["mapping_kind"] == "composite"

    def test_hflip_vflip_behaves_like_rot180(self):
        op = resolve_op("hflip∘vflip")
        rot = resolve_op("rot180")
        query = Query("quadrant", Descriptor("circle"), None, QUADRANTS)
        dual_scene, dual_query = apply(op, SCENE, query)
        assert dual_scene == apply(rot, SCENE, query)[0]
        assert map_answer(op, query, dual_query, 0) == QUADRANTS.index("bottom_right")

    def test_hflip_twice_is_identity(self):
        probe = build_probe_set(np.random.default_rng(0), 30, EnvConfig())
        op = compose(resolve_op("hflip"), resolve_op("hflip"))
        assert is_identity_behavior(behavior_signature(op, probe), probe)

    def test_double_negation_has_empty_domain(self):
        op = resolve_op("negation∘negation")
        probe = build_probe_set(np.random.default_rng(1), 50, EnvConfig())
        assert not any(applicable(op, scene, query) for scene, query in probe)

    def test_resolve_round_trip(self):
        op = resolve_op("hflip∘option_reverse∘paraphrase")
        assert op_from_dict(op.to_dict()) == op

    def test_unknown_id(self):
        with pytest.raises(UnknownOperationError):
            resolve_op("hflip∘mirror")

    @pytest.mark.parametrize(
        "a, b, c",
        [
            ("hflip", "vflip", "option_reverse"),
            ("rot180", "option_cycle", "paraphrase"),
            ("color_invert", "hflip", "option_cycle"),
            ("negation", "paraphrase", "hflip"),
        ],
    )
    def test_associative_on_samples(self, a, b, c):
        a, b, c = resolve_op(a), resolve_op(b), resolve_op(c)
        probe = build_probe_set(np.random.default_rng(5), 80, EnvConfig())
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        assert behavior_signature(left, probe) == behavior_signature(right, probe)
        assert any(applicable(left, scene, query) for scene, query in probe)


class TestRegistry:
    def test_export_import_keeps_ids_and_order(self):
        ops = builtin_pool() + [resolve_op("hflip∘option_cycle")]
        registry = import_registry(export_registry(ops))
        assert list(registry) == [op.id for op in ops]
        assert registry["hflip∘option_cycle"].is_composite

    def test_mapping_kind_mismatch(self):
        entry = resolve_op("hflip").to_dict()
        entry["mapping_kind"] = "identity"
        with pytest.raises(RegistryFormatError):
            import_registry([entry])

    def test_unknown_id(self):
        with pytest.raises(RegistryFormatError):
            import_registry([{"id": "mirror"}])

    def test_missing_id(self):
        with pytest.raises(RegistryFormatError):
            op_from_dict({"mapping_kind": "identity"})

    def test_duplicate_entry(self):
        entry = resolve_op("vflip").to_dict()
        with pytest.raises(RegistryFormatError):
            import_registry([entry, dict(entry)])


class TestVerifyAxiom:
    @pytest.mark.parametrize("op_id", BUILTIN_IDS)
    def test_builtins_hold(self, op_id):
        report = verify_axiom(resolve_op(op_id), 300, np.random.default_rng(0))
        assert report.samples == 300
        assert report.ok, report.violations[:3]

    def test_three_op_chain_holds(self):
        report = verify_axiom(resolve_op("hflip∘option_reverse∘paraphrase"), 300, np.random.default_rng(1))
        assert report.ok

    def test_corrupted_mapping_is_caught(self):
        hflip = resolve_op("hflip")
        broken = DualityOp("broken_hflip", IDENTITY, hflip.scene_fn, hflip.query_fn, hflip.domain)
        env = EnvConfig(kinds=["rel_pos_h"])
        report = verify_axiom(broken, 200, np.random.default_rng(2), env)
        assert len(report.violations) == report.samples

    def test_empty_domain_exhausts_budget(self):
        with pytest.raises(AxiomSampleBudgetError):
            verify_axiom(resolve_op("negation∘negation"), 5, np.random.default_rng(3))

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            verify_axiom(resolve_op("hflip"), 0, np.random.default_rng(0))

    @pytest.mark.slow
    def test_builtins_hold_at_full_sample_count(self):
        if not config.RUN_SLOW_TESTS:
            pytest.skip("SAGE_RUN_SLOW not enabled")
        rng = np.random.default_rng(0)
        for op in builtin_pool():
            assert verify_axiom(op, 10_000, rng).ok


def test_discovered_candidates_are_new_and_verified():
    rng = np.random.default_rng(0)
    probe = build_probe_set(rng, 40, EnvConfig())
    found = discover_candidates(probe, 3, rng, verify_samples=50)
    assert 0 < len(found) <= 3
    builtin_signatures = {behavior_signature(op, probe) for op in builtin_pool()}
    for op in found:
        signature = behavior_signature(op, probe)
        assert op.is_composite
        assert signature not in builtin_signatures
        assert not is_identity_behavior(signature, probe)
    assert len({op.id for op in found}) == len(found)
