import json

import pytest

from promptopt.backend import MockBackend
from promptopt.errors import (
    EmptyDataset,
    IdenticalParents,
    KTooLarge,
    MissingContext,
    NonEditableSection,
    SectionSetMismatch,
    UnknownOperator,
)
from promptopt.evaluation import BadCase, ExampleRecord, LabelMetrics, MetricReport
from promptopt.operators import (
    COT_SCAFFOLD,
    OPERATOR_IDS,
    NOOP,
    OperatorContext,
    ToyRetriever,
    apply_operator,
    build_request,
    cot_scaffold,
    few_shot_sample,
    load_registry,
    merge_deterministic,
    parse_operator_response,
    repeat_instructions,
    self_consistency,
)
from promptopt.prompt_model import Candidate, Section

from conftest import body_json, make_prompt


def section(name="horoscope", body="Focus on astrology, horoscope analysis, constellation knowledge, etc.",
            editable=True):
    return Section(id=name, name=name, body=body, editable=editable, position=0)


def ctx_for(sec, **kw):
    return OperatorContext(target_section=sec, **kw)


def scored_candidate(bodies, score, iteration=1, objective="f1"):
    prompt = make_prompt(bodies)
    return Candidate(prompt=prompt).with_score(iteration, {objective: score})


class TestRegistry:
    def test_all_template_ops_load(self):
        registry = load_registry()
        assert set(registry) == {
            "rewrite", "refine", "reflect", "short_instruction",
            "define_sort", "diff_evolution", "merge", "rag",
        }
        for text in registry.values():
            assert text.strip()

    def test_unknown_id_rejected(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"sparkle": "refine.txt"}))
        with pytest.raises(UnknownOperator):
            load_registry(tmp_path / "m.json")

    def test_catalog_size(self):
        assert len(OPERATOR_IDS) == 12


class TestBuildRequest:
    def test_refine_substitutes_both_placeholders(self):
        sec = section()
        req = build_request("refine", ctx_for(sec))
        text = req.messages[0][1]
        assert '"Refine" optimization method' in text
        assert sec.body in text
        assert '"horoscope":""' in text
        assert "{{Module" not in text

    def test_reflect_reasons_verbatim(self):
        sec = section()
        bad = (
            BadCase("1", "a", "b", reason="the label scope is ambiguous"),
            BadCase("2", "c", "d", reason="boundary characters were dropped"),
        )
        req = build_request("reflect", ctx_for(sec, bad_cases=bad))
        text = req.messages[0][1]
        start = text.index("[")
        reasons = json.loads(text[start:text.index("]") + 1])
        assert reasons == [bad[0].reason, bad[1].reason]
        assert "Common problem extraction" in text

    def test_reflect_without_bad_cases(self):
        with pytest.raises(MissingContext):
            build_request("reflect", ctx_for(section()))

    def test_reflect_default_reason_from_case(self):
        bad = (BadCase("1", "gold", "pred"),)
        req = build_request("reflect", ctx_for(section(), bad_cases=bad))
        assert "'gold'" in req.messages[0][1]
        assert "'pred'" in req.messages[0][1]

    def test_non_editable_rejected_before_any_call(self):
        sec = section(editable=False)
        for op in ("rewrite", "refine", "short_instruction"):
            with pytest.raises(NonEditableSection):
                build_request(op, ctx_for(sec))

    def test_diff_evolution_needs_two_parents(self):
        with pytest.raises(MissingContext):
            build_request("diff_evolution", ctx_for(section("s0", "x")))

    def test_diff_evolution_identical_parents(self):
        a = scored_candidate(["same body", "{{Input}}"], 0.5)
        b = scored_candidate(["same body", "{{Input}}"], 0.6)
        with pytest.raises(IdenticalParents):
            build_request(
                "diff_evolution",
                ctx_for(section("s0", "same body"), sibling_candidates=(a, b)),
            )

    def test_diff_evolution_three_parents_ordered_by_score(self):
        cands = [
            scored_candidate(["variant %d" % i, "{{Input}}"], s)
            for i, s in enumerate([0.3, 0.9, 0.6])
        ]
        req = build_request(
            "diff_evolution",
            ctx_for(section("s0", "anything"), sibling_candidates=tuple(cands)),
        )
        text = req.messages[0][1]
        for i in range(3):
            assert "variant %d" % i in text
        # best first
        assert text.index("variant 1") < text.index("variant 2") < text.index("variant 0")

    def test_define_sort_lists_every_section(self):
        prompt = make_prompt(["alpha", "beta", "gamma"])
        req = build_request(
            "define_sort", ctx_for(prompt.section_by_id("s0"), prompt=prompt)
        )
        text = req.messages[0][1]
        for sid in ("s0", "s1", "s2"):
            assert "id: %s" % sid in text

    def test_rag_includes_snippets(self):
        retriever = ToyRetriever(["stars and planets", "cooking pasta"])
        req = build_request("rag", ctx_for(section(body="stars"), retriever=retriever))
        assert "stars and planets" in req.messages[0][1]

    def test_rag_without_retriever(self):
        from promptopt.errors import RetrieverUnavailable

        with pytest.raises(RetrieverUnavailable):
            build_request("rag", ctx_for(section()))

    def test_merge_request_is_greedy(self):
        a = scored_candidate(["one", "{{Input}}"], 0.5)
        b = scored_candidate(["two", "{{Input}}"], 0.6)
        ctx = ctx_for(section("s0", "x"), sibling_candidates=(a, b), temperature=0.9)
        assert build_request("merge", ctx).temperature == 0.0
        assert build_request("refine", ctx_for(section(), temperature=0.9)).temperature == 0.9

    def test_deterministic(self):
        a = build_request("refine", ctx_for(section()))
        b = build_request("refine", ctx_for(section()))
        assert a.content_hash() == b.content_hash()

    def test_unknown_operator(self):
        with pytest.raises(UnknownOperator):
            build_request("sparkle", ctx_for(section()))


class TestParseResponse:
    def test_refine_golden_output(self):
        raw = '{"horoscope":"Dedicated to the fields of astrology, horoscope interpretation and constellation knowledge."}'
        out = parse_operator_response("refine", raw, "horoscope")
        assert out.parse_ok
        assert out.new_body.startswith("Dedicated to the fields of astrology")

    def test_tolerates_prose_and_fences(self):
        raw = 'Sure! Here you go:\n```json\n{"horoscope": "better text"}\n```\nHope that helps.'
        out = parse_operator_response("refine", raw, "horoscope")
        assert out.parse_ok and out.new_body == "better text"

    def test_reflect_reads_improved_key(self):
        raw = json.dumps({
            "Common problem extraction": "x",
            "Root cause analysis": "y",
            "Improved horoscope description": "sharper wording",
        })
        out = parse_operator_response("reflect", raw, "horoscope")
        assert out.parse_ok and out.new_body == "sharper wording"

    def test_single_string_value_fallback(self):
        out = parse_operator_response("refine", '{"wrong_key": "text"}', "horoscope")
        assert out.parse_ok and out.new_body == "text"

    def test_ambiguous_keys_fail(self):
        out = parse_operator_response("refine", '{"a": "x", "b": "y"}', "horoscope")
        assert not out.parse_ok

    def test_define_sort_bare_array(self):
        out = parse_operator_response("define_sort", '["s2", "s0", "s1"]')
        assert out.parse_ok and out.new_order == ("s2", "s0", "s1")

    def test_define_sort_order_object(self):
        out = parse_operator_response("define_sort", '{"order": ["s1", "s0"]}')
        assert out.parse_ok and out.new_order == ("s1", "s0")

    def test_garbage_never_raises(self):
        for raw in ("", "no json here", '{"horoscope": 5}', "[1, 2]"):
            out = parse_operator_response("refine", raw, "horoscope")
            assert not out.parse_ok

    def test_round_trip_with_request(self):
        sec = section()
        req = build_request("refine", ctx_for(sec))
        backend = MockBackend(
            [{"match": {"hash": req.content_hash()},
              "response": body_json(sec.name, "improved body")}]
        )
        res = backend.generate(req)
        out = parse_operator_response("refine", res.text, sec.name)
        assert out.parse_ok and out.new_body == "improved body"


class TestFewShot:
    def test_deterministic(self, cls_examples):
        a = few_shot_sample(cls_examples, "uniform", 3, seed=7)
        b = few_shot_sample(cls_examples, "uniform", 3, seed=7)
        assert a == b
        assert a != few_shot_sample(cls_examples, "uniform", 3, seed=8)

    def test_uniform_format(self, cls_examples):
        block = few_shot_sample(cls_examples, "uniform", 2, seed=0)
        pairs = block.split("\n\n")
        assert len(pairs) == 2
        for pair in pairs:
            assert pair.startswith("Input: ")
            assert '"label"' in pair

    def test_stratified_balances_labels(self, cls_examples):
        block = few_shot_sample(cls_examples, "stratified", 4, seed=3)
        a_count = block.count('"label": "A"')
        b_count = block.count('"label": "B"')
        assert a_count == b_count == 2

    def test_k_zero_empty(self, cls_examples):
        assert few_shot_sample(cls_examples, "uniform", 0, seed=0) == ""

    def test_k_too_large(self, cls_examples):
        with pytest.raises(KTooLarge):
            few_shot_sample(cls_examples, "uniform", 11, seed=0)

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            few_shot_sample([], "uniform", 1, seed=0)

    def test_hard_case_prefers_weak_labels(self, cls_examples):
        report = MetricReport(
            precision=0.5, recall=0.5, f1=0.5, support=10,
            per_label={
                "A": LabelMetrics(1.0, 1.0, 1.0, 5),
                "B": LabelMetrics(0.2, 0.2, 0.2, 5),
            },
        )
        block = few_shot_sample(cls_examples, "hard_case", 3, seed=1, report=report)
        assert block.count('"label": "B"') == 3

    def test_hard_case_requires_report(self, cls_examples):
        with pytest.raises(MissingContext):
            few_shot_sample(cls_examples, "hard_case", 2, seed=0)

    def test_ner_example_format(self):
        ex = ExampleRecord("0", "NER", "Anna went home", {"name": frozenset({(0, 4)})})
        block = few_shot_sample([ex], "uniform", 1, seed=0)
        assert '"Anna": [[0, 4]]' in block


class TestLocalOperators:
    def test_cot_appends_scaffold(self):
        sec = section(body="Classify the text.")
        assert cot_scaffold(sec) == "Classify the text.\n\n" + COT_SCAFFOLD

    def test_cot_idempotent(self):
        sec = section(body="Classify.\n\n" + COT_SCAFFOLD)
        assert cot_scaffold(sec) == sec.body

    def test_cot_empty_body(self):
        assert cot_scaffold(section(body="")) == COT_SCAFFOLD

    def test_repeat_instructions_targets_preoutput_section(self):
        prompt = make_prompt(
            ["Always answer in JSON. Be terse.", "middle", "{{Input}}"],
            editable=[True, True, False],
        )
        target = prompt.section_by_id("s0")
        host_id, new_body = repeat_instructions(prompt, target)
        assert host_id == "s1"
        assert new_body == "middle\n\nAlways answer in JSON."

    def test_repeat_instructions_noop_when_present(self):
        prompt = make_prompt(
            ["Rule one. More.", "Rule one.", "{{Input}}"],
            editable=[True, True, False],
        )
        host_id, new_body = repeat_instructions(prompt, prompt.section_by_id("s0"))
        assert new_body == prompt.section_by_id(host_id).body

    def test_self_consistency_majority(self):
        assert self_consistency(["abc", "abc", "xyz"]) == "abc"

    def test_self_consistency_tie_prefers_shortest(self):
        # both bodies share no tokens, so similarities tie at zero
        assert self_consistency(["bb cc", "a"]) == "a"

    def test_self_consistency_single(self):
        assert self_consistency(["only"]) == "only"

    def test_self_consistency_empty(self):
        with pytest.raises(MissingContext):
            self_consistency([])


class TestToyRetriever:
    def test_ranked_by_overlap(self):
        r = ToyRetriever(["cats sleep a lot", "dogs bark", "cats and dogs play"])
        out = r.retrieve("cats dogs", 2)
        assert out[0] == "cats and dogs play"

    def test_tie_broken_by_index(self):
        r = ToyRetriever(["x y", "x z"])
        assert r.retrieve("x", 2) == ["x y", "x z"]

    def test_cardinality(self):
        r = ToyRetriever(["a", "b", "c"])
        assert len(r.retrieve("a b c", 2)) == 2


class TestMergeDeterministic:
    def test_identical_parents_identity(self):
        a = scored_candidate(["body one", "{{Input}}"], 0.5)
        b = scored_candidate(["body one", "{{Input}}"], 0.4)
        merged = merge_deterministic([a, b])
        assert merged.fingerprint() == a.prompt.fingerprint()

    def test_section_set_mismatch(self):
        a = scored_candidate(["x", "{{Input}}"], 0.5)
        b = scored_candidate(["x", "y", "{{Input}}"], 0.5)
        with pytest.raises(SectionSetMismatch):
            merge_deterministic([a, b])

    def test_needs_two_parents(self):
        with pytest.raises(MissingContext):
            merge_deterministic([scored_candidate(["x", "{{Input}}"], 0.5)])

    def test_donor_is_parent_with_recent_positive_edit(self):
        # parent a scores higher overall; parent b improved s0 at iteration 2
        a = scored_candidate(["a body", "shared", "{{Input}}"], 0.7, iteration=2)
        b = (
            Candidate(prompt=make_prompt(["b body", "shared", "{{Input}}"]))
            .with_score(1, {"f1": 0.4})
            .with_edit(2, "s0", "refine")
            .with_score(2, {"f1": 0.6})
        )
        merged = merge_deterministic([a, b])
        assert merged.section_by_id("s0").body == "b body"
        assert merged.section_by_id("s1").body == "shared"

    def test_no_positive_edits_falls_back_to_best(self):
        a = scored_candidate(["a body", "{{Input}}"], 0.7)
        b = (
            Candidate(prompt=make_prompt(["b body", "{{Input}}"]))
            .with_score(1, {"f1": 0.6})
            .with_edit(2, "s0", "refine")
            .with_score(2, {"f1": 0.5})
        )
        merged = merge_deterministic([a, b])
        assert merged.section_by_id("s0").body == "a body"


class TestApplyOperator:
    def test_cot_is_local(self):
        sec = section(body="Classify.")
        edit = apply_operator("cot", ctx_for(sec))
        assert edit.kind == "body" and COT_SCAFFOLD in edit.new_body

    def test_few_shot_fills_target(self, cls_examples):
        prompt = make_prompt(["task", "", "{{Input}}"], editable=[True, True, False])
        ctx = ctx_for(prompt.section_by_id("s1"), prompt=prompt,
                      dataset=tuple(cls_examples), few_shot_k=2)
        edit = apply_operator("few_shot", ctx)
        assert edit.kind == "body" and edit.new_body.count("Input:") == 2

    def test_refine_round_trip(self):
        sec = section()
        backend = MockBackend([{"response": body_json(sec.name, "new text")}])
        edit = apply_operator("refine", ctx_for(sec), backend)
        assert edit.kind == "body"
        assert edit.section_id == sec.id and edit.new_body == "new text"

    def test_unparseable_is_noop(self):
        backend = MockBackend([{"response": "no json at all"}])
        assert apply_operator("refine", ctx_for(section()), backend) is NOOP

    def test_unchanged_body_is_noop(self):
        sec = section()
        backend = MockBackend([{"response": body_json(sec.name, sec.body)}])
        assert apply_operator("refine", ctx_for(sec), backend) is NOOP

    def test_define_sort_valid_order(self):
        prompt = make_prompt(["a", "b", "{{Input}}"])
        backend = MockBackend([{"response": '{"order": ["s2", "s1", "s0"]}'}])
        ctx = ctx_for(prompt.section_by_id("s0"), prompt=prompt)
        edit = apply_operator("define_sort", ctx, backend)
        assert edit.kind == "order" and edit.new_order == ("s2", "s1", "s0")

    def test_define_sort_invalid_order_is_noop(self):
        prompt = make_prompt(["a", "b", "{{Input}}"])
        backend = MockBackend([{"response": '{"order": ["s0", "s0", "s1"]}'}])
        ctx = ctx_for(prompt.section_by_id("s0"), prompt=prompt)
        assert apply_operator("define_sort", ctx, backend) is NOOP

    def test_self_consistency_picks_majority(self):
        sec = section()
        backend = MockBackend([
            {"response": body_json(sec.name, "abc")},
            {"response": body_json(sec.name, "abc")},
            {"response": body_json(sec.name, "xyz")},
        ])
        edit = apply_operator("self_consistency", ctx_for(sec), backend)
        assert edit.new_body == "abc"

    def test_identical_parents_become_noop(self):
        a = scored_candidate(["same", "{{Input}}"], 0.5)
        b = scored_candidate(["same", "{{Input}}"], 0.6)
        backend = MockBackend([{"response": "unused"}])
        ctx = ctx_for(section("s0", "same"), sibling_candidates=(a, b))
        assert apply_operator("diff_evolution", ctx, backend) is NOOP

    def test_llm_op_without_backend(self):
        with pytest.raises(MissingContext):
            apply_operator("refine", ctx_for(section()))
