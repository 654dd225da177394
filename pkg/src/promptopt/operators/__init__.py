"""Prompt-edit operator catalog.

Template-backed operators build a chat request from a text template and
parse a JSON response; local operators (cot, few_shot, repeat_instructions,
merge in deterministic mode, self_consistency) transform sections without a
model call. New template operators can be added by dropping a template file
and a manifest entry, no code changes needed.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from ..backend import Backend, GenerationRequest, GenerationResponse, user_request
from ..errors import (
    EmptyDataset,
    IdenticalParents,
    KTooLarge,
    MissingContext,
    NonEditableSection,
    RetrieverUnavailable,
    SectionSetMismatch,
    UnknownOperator,
)
from ..evaluation import ExampleRecord, MetricReport
from ..jsontools import extract_first_json
from ..prompt_model import Candidate, MetaPrompt, Section

TEMPLATE_DIR = Path(__file__).parent / "templates"

OPERATOR_IDS = (
    "rewrite",
    "refine",
    "reflect",
    "cot",
    "few_shot",
    "diff_evolution",
    "define_sort",
    "merge",
    "short_instruction",
    "self_consistency",
    "repeat_instructions",
    "rag",
)

# operators that replace the target section's body via a single LLM call
BODY_EDIT_LLM_OPS = ("rewrite", "refine", "reflect", "short_instruction", "rag",
                     "diff_evolution")
# operators that never contact the backend
LOCAL_OPS = ("cot", "few_shot", "repeat_instructions")

COT_SCAFFOLD = (
    "Work step by step: first restate what this part of the task requires, "
    "then reason through the input against each requirement, and only then "
    "produce the answer."
)

DEFAULT_OPERATORS = OPERATOR_IDS


def load_registry(manifest_path=None) -> dict[str, str]:
    """Map operator id -> template text for template-backed operators;
    unknown ids in the manifest are rejected."""
    path = Path(manifest_path) if manifest_path else TEMPLATE_DIR / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    registry = {}
    for op_id, template_file in manifest.items():
        if op_id not in OPERATOR_IDS:
            raise UnknownOperator("manifest references unknown operator %r" % op_id)
        registry[op_id] = (path.parent / template_file).read_text(encoding="utf-8")
    return registry


_REGISTRY: Optional[dict[str, str]] = None


def _registry() -> dict[str, str]:
    global _REGISTRY
    if _REGISTRY is None:
        _REGISTRY = load_registry()
    return _REGISTRY


class Retriever:
    """Interface for RAG knowledge sources."""

    def retrieve(self, query: str, k: int) -> list[str]:
        raise NotImplementedError


class ToyRetriever(Retriever):
    """In-memory corpus ranked by whitespace-token overlap with the query;
    ties broken by document index."""

    def __init__(self, corpus: Sequence[str]):
        self.corpus = list(corpus)

    def retrieve(self, query: str, k: int) -> list[str]:
        q_tokens = query.split()
        scored = []
        for idx, doc in enumerate(self.corpus):
            doc_tokens = doc.split()
            overlap = sum(1 for t in doc_tokens if t in set(q_tokens))
            scored.append((-overlap, idx, doc))
        scored.sort()
        return [doc for neg, _, doc in scored[:k] if -neg > 0 or True][:k]


@dataclass(frozen=True)
class OperatorContext:
    target_section: Section
    prompt: Optional[MetaPrompt] = None
    sibling_candidates: tuple[Candidate, ...] = ()
    bad_cases: tuple = ()
    dataset: tuple[ExampleRecord, ...] = ()
    retriever: Optional[Retriever] = None
    rng_seed: int = 0
    model: str = "default"
    temperature: float = 0.7
    objective: str = "f1"
    metric_report: Optional[MetricReport] = None
    few_shot_k: int = 3
    few_shot_strategy: str = "uniform"


@dataclass(frozen=True)
class OperatorOutcome:
    new_body: Optional[str] = None
    new_order: Optional[tuple[str, ...]] = None
    raw_response: str = ""
    parse_ok: bool = False


def _fill(template: str, **subs) -> str:
    out = template
    for key, value in subs.items():
        out = out.replace("{{%s}}" % key, value)
    return out


def _parent_list(parents: Sequence[Candidate], section_id: str, objective: str) -> tuple[list, str]:
    """Parents sorted by descending score with their target-section bodies,
    rendered as a numbered block."""
    def key(c: Candidate):
        s = c.latest_score(objective)
        return -(s if s is not None else 0.0)

    ordered = sorted(parents, key=key)
    lines = []
    for i, cand in enumerate(ordered, 1):
        body = cand.prompt.section_by_id(section_id).body
        s = cand.latest_score(objective)
        score_text = "unscored" if s is None else "%.5f" % s
        lines.append("Variant %d (score %s):\n%s" % (i, score_text, body))
    return ordered, "\n\n".join(lines)


def build_request(op: str, ctx: OperatorContext) -> GenerationRequest:
    """Build the chat request for a template-backed operator, substituting
    the section name, body, and any operator-specific context blocks."""
    if op not in OPERATOR_IDS:
        raise UnknownOperator(op)
    section = ctx.target_section
    if op in ("rewrite", "refine", "reflect", "short_instruction") and not section.editable:
        raise NonEditableSection(section.id)
    registry = _registry()
    if op not in registry:
        raise UnknownOperator("operator %r has no template; apply it locally" % op)
    template = registry[op]
    subs = {"Module": section.name, "Module_Desc": section.body}

    if op == "reflect":
        if not ctx.bad_cases:
            raise MissingContext("reflect requires at least one bad case")
        reasons = [bc.reason or _default_reason(bc) for bc in ctx.bad_cases]
        subs["Bad_Case_Reason_List"] = json.dumps(reasons, ensure_ascii=False)
    elif op in ("diff_evolution", "merge"):
        if len(ctx.sibling_candidates) < 2:
            raise MissingContext("%s requires at least 2 sibling candidates" % op)
        bodies = {c.prompt.section_by_id(section.id).body for c in ctx.sibling_candidates}
        if op == "diff_evolution" and len(bodies) < 2:
            raise IdenticalParents("parents share the same %r body" % section.id)
        _, block = _parent_list(ctx.sibling_candidates, section.id, ctx.objective)
        subs["Parent_List"] = block
    elif op == "define_sort":
        if ctx.prompt is None:
            raise MissingContext("define_sort needs the full prompt")
        lines = [
            "- id: %s | name: %s | starts: %s" % (s.id, s.name, s.body[:60].replace("\n", " "))
            for s in ctx.prompt.ordered_sections()
        ]
        subs["Section_List"] = "\n".join(lines)
    elif op == "rag":
        if ctx.retriever is None:
            raise RetrieverUnavailable("no retriever registered")
        snippets = ctx.retriever.retrieve(section.body or section.name, 3)
        subs["Snippet_List"] = "\n".join("- %s" % s for s in snippets) if snippets else "(none)"

    text = _fill(template, **subs)
    temperature = 0.0 if op == "merge" else ctx.temperature
    return user_request(text, model=ctx.model, temperature=temperature)


def _default_reason(bc) -> str:
    return "expected %r but the model produced %r" % (bc.expected, bc.predicted)


def parse_operator_response(op: str, raw: str, section_name: Optional[str] = None) -> OperatorOutcome:
    """Extract the operator's result from a model response. Failures never
    raise; they come back with parse_ok=False and the caller treats the edit
    as a no-op."""
    doc = extract_first_json(raw)
    if op == "define_sort":
        order = None
        if isinstance(doc, list):
            order = doc
        elif isinstance(doc, dict) and isinstance(doc.get("order"), list):
            order = doc["order"]
        if order and all(isinstance(x, str) for x in order):
            return OperatorOutcome(new_order=tuple(order), raw_response=raw, parse_ok=True)
        return OperatorOutcome(raw_response=raw, parse_ok=False)

    if not isinstance(doc, dict):
        return OperatorOutcome(raw_response=raw, parse_ok=False)
    key = None
    if op == "reflect" and section_name is not None:
        key = "Improved %s description" % section_name
    elif section_name is not None:
        key = section_name
    body = None
    if key is not None and isinstance(doc.get(key), str):
        body = doc[key]
    elif op == "reflect":
        for k, v in doc.items():
            if k.startswith("Improved") and isinstance(v, str):
                body = v
                break
    else:
        string_values = [v for v in doc.values() if isinstance(v, str)]
        if len(string_values) == 1:
            body = string_values[0]
    if body:
        return OperatorOutcome(new_body=body, raw_response=raw, parse_ok=True)
    return OperatorOutcome(raw_response=raw, parse_ok=False)


# ---------------------------------------------------------------------------
# local operators

def few_shot_sample(dataset: Sequence[ExampleRecord], strategy: str, k: int,
                    seed: int, report: Optional[MetricReport] = None) -> str:
    """Deterministically sample k examples and format them as input/output
    pairs matching the task's output contract."""
    if k == 0:
        return ""
    if not dataset:
        raise EmptyDataset("few_shot needs a training set")
    if k > len(dataset):
        raise KTooLarge("k=%d exceeds dataset size %d" % (k, len(dataset)))
    rng = random.Random(seed)
    if strategy == "uniform":
        chosen = [dataset[i] for i in sorted(rng.sample(range(len(dataset)), k))]
    elif strategy == "stratified":
        chosen = _stratified(dataset, k, rng)
    elif strategy == "hard_case":
        if report is None:
            raise MissingContext("hard_case sampling requires a prior metric report")
        chosen = _hard_case(dataset, k, rng, report)
    else:
        raise ValueError("unknown sampling strategy %r" % strategy)
    return "\n\n".join(_format_example(ex) for ex in chosen)


def _example_label(ex: ExampleRecord) -> str:
    if ex.task == "CLS":
        return ex.gold
    if ex.task == "NER":
        labels = sorted(ex.gold)
        return labels[0] if labels else ""
    return ""


def _stratified(dataset, k, rng) -> list[ExampleRecord]:
    by_label: dict[str, list[ExampleRecord]] = {}
    for ex in dataset:
        by_label.setdefault(_example_label(ex), []).append(ex)
    labels = sorted(by_label)
    pools = {lbl: rng.sample(by_label[lbl], len(by_label[lbl])) for lbl in labels}
    chosen = []
    # round-robin so each label appears at least floor(k/|labels|) times when
    # its pool allows
    while len(chosen) < k:
        progressed = False
        for lbl in labels:
            if pools[lbl] and len(chosen) < k:
                chosen.append(pools[lbl].pop())
                progressed = True
        if not progressed:
            break
    return chosen


def _hard_case(dataset, k, rng, report: MetricReport) -> list[ExampleRecord]:
    difficulty = {lbl: met.f1 for lbl, met in report.per_label.items()}
    ordered = sorted(
        rng.sample(list(dataset), len(dataset)),
        key=lambda ex: difficulty.get(_example_label(ex), 1.0),
    )
    return ordered[:k]


def _format_example(ex: ExampleRecord) -> str:
    if ex.task == "CLS":
        gold = json.dumps({"label": ex.gold}, ensure_ascii=False)
    elif ex.task == "NER":
        doc = {
            label: {ex.input[s:e]: [[s, e]] for s, e in sorted(spans)}
            for label, spans in sorted(ex.gold.items())
        }
        gold = json.dumps(doc, ensure_ascii=False)
    else:
        gold = json.dumps({"answer": ex.gold}, ensure_ascii=False)
    return "Input: %s\nOutput: %s" % (ex.input, gold)


def cot_scaffold(section: Section) -> str:
    """Append a step-by-step reasoning scaffold to the target section."""
    if COT_SCAFFOLD in section.body:
        return section.body
    return (section.body + "\n\n" + COT_SCAFFOLD) if section.body else COT_SCAFFOLD


def repeat_instructions(prompt: MetaPrompt, target: Section) -> tuple[str, str]:
    """Duplicate the target section's first sentence immediately before the
    output contract. Returns (section id to edit, its new body); the edited
    section is the one preceding the first non-editable section."""
    first_sentence = _first_sentence(target.body)
    ordered = prompt.ordered_sections()
    anchor = len(ordered)
    for i, s in enumerate(ordered):
        if not s.editable:
            anchor = i
            break
    host = ordered[anchor - 1] if anchor > 0 else ordered[-1]
    if not first_sentence or first_sentence in host.body.splitlines():
        return host.id, host.body
    new_body = (host.body + "\n\n" + first_sentence) if host.body else first_sentence
    return host.id, new_body


def _first_sentence(text: str) -> str:
    text = text.strip()
    for stop in (". ", "。", "! ", "? "):
        idx = text.find(stop)
        if idx != -1:
            return text[: idx + len(stop)].strip()
    return text.split("\n")[0].strip()


def self_consistency(bodies: Sequence[str]) -> str:
    """Pick the body with maximal mean pairwise token-overlap similarity;
    ties go to the shortest body, then lexicographic order."""
    if not bodies:
        raise MissingContext("self_consistency needs at least one body")
    if len(bodies) == 1:
        return bodies[0]

    def jaccard(a: str, b: str) -> float:
        ta, tb = set(a.split()), set(b.split())
        if not ta and not tb:
            return 1.0
        union = ta | tb
        return len(ta & tb) / len(union) if union else 0.0

    best = None
    for i, body in enumerate(bodies):
        sims = [jaccard(body, other) for j, other in enumerate(bodies) if j != i]
        mean_sim = sum(sims) / len(sims)
        key = (-mean_sim, len(body), body)
        if best is None or key < best[0]:
            best = (key, body)
    return best[1]


def merge_deterministic(parents: Sequence[Candidate], objective: str = "f1") -> MetaPrompt:
    """Compose a prompt section by section: each section's body comes from
    the parent whose most recent edit of that section gained score, falling
    back to the highest-scoring parent."""
    if len(parents) < 2:
        raise MissingContext("merge requires at least 2 parents")
    id_sets = [frozenset(s.id for s in p.prompt.sections) for p in parents]
    if len(set(id_sets)) != 1:
        raise SectionSetMismatch("parents have different section id sets")

    def latest(c: Candidate) -> float:
        s = c.latest_score(objective)
        return s if s is not None else 0.0

    fallback = max(parents, key=latest)
    merged = fallback.prompt
    for section in fallback.prompt.ordered_sections():
        best_parent = None
        best_iteration = -1
        for parent in parents:
            it = _last_positive_edit(parent, section.id, objective)
            if it is not None and it > best_iteration:
                best_iteration = it
                best_parent = parent
        donor = best_parent if best_parent is not None else fallback
        merged = merged.with_body(section.id, donor.prompt.section_by_id(section.id).body)
    return merged


def _last_positive_edit(cand: Candidate, section_id: str, objective: str):
    """Iteration of the candidate's most recent edit of `section_id` whose
    score delta was positive, or None."""
    for iteration, sid, _op in reversed(cand.lineage):
        if sid != section_id:
            continue
        after = cand.score_at(iteration, objective)
        if after is None:
            continue
        before = None
        for it, metrics in reversed(cand.scores):
            if it < iteration:
                for k, v in metrics:
                    if k == objective:
                        before = v
                        break
            if before is not None:
                break
        if before is not None and after > before:
            return iteration
    return None


# ---------------------------------------------------------------------------
# unified application

@dataclass(frozen=True)
class EditResult:
    """What an operator did: a single-section body change, a reordering, a
    whole-prompt composition (merge), or a no-op."""

    kind: str  # body | order | prompt | noop
    section_id: Optional[str] = None
    new_body: Optional[str] = None
    new_order: Optional[tuple[str, ...]] = None
    new_prompt: Optional[MetaPrompt] = None


NOOP = EditResult(kind="noop")


def apply_operator(op: str, ctx: OperatorContext, backend: Optional[Backend] = None,
                   consistency_samples: int = 3) -> EditResult:
    """Run one operator end to end. LLM-backed operators build a request,
    call the backend, and parse; local operators transform directly.
    Unparseable responses come back as a no-op."""
    if op not in OPERATOR_IDS:
        raise UnknownOperator(op)
    section = ctx.target_section

    if op == "cot":
        return EditResult("body", section_id=section.id, new_body=cot_scaffold(section))
    if op == "few_shot":
        block = few_shot_sample(
            tuple(ctx.dataset), ctx.few_shot_strategy, ctx.few_shot_k,
            ctx.rng_seed, report=ctx.metric_report,
        )
        return EditResult("body", section_id=section.id, new_body=block)
    if op == "repeat_instructions":
        if ctx.prompt is None:
            raise MissingContext("repeat_instructions needs the full prompt")
        host_id, new_body = repeat_instructions(ctx.prompt, section)
        if ctx.prompt.section_by_id(host_id).body == new_body:
            return NOOP
        return EditResult("body", section_id=host_id, new_body=new_body)
    if op == "merge":
        merged = merge_deterministic(ctx.sibling_candidates, ctx.objective)
        return EditResult("prompt", new_prompt=merged)
    if op == "self_consistency":
        if backend is None:
            raise MissingContext("self_consistency needs a backend to sample bodies")
        req = build_request("refine", ctx)
        bodies = []
        raw_last = ""
        for res in backend.generate_batch([req] * consistency_samples):
            if isinstance(res, GenerationResponse):
                raw_last = res.text
                outcome = parse_operator_response("refine", res.text, section.name)
                if outcome.parse_ok:
                    bodies.append(outcome.new_body)
        if not bodies:
            return NOOP
        return EditResult("body", section_id=section.id, new_body=self_consistency(bodies))

    # template-backed single-call operators
    if backend is None:
        raise MissingContext("operator %r needs a backend" % op)
    try:
        req = build_request(op, ctx)
    except IdenticalParents:
        return NOOP
    res = backend.generate(req)
    outcome = parse_operator_response(op, res.text, section.name)
    if not outcome.parse_ok:
        return NOOP
    if op == "define_sort":
        if ctx.prompt is None:
            return NOOP
        ids = {s.id for s in ctx.prompt.sections}
        if set(outcome.new_order) != ids or len(outcome.new_order) != len(ids):
            return NOOP
        return EditResult("order", new_order=outcome.new_order)
    if outcome.new_body == section.body:
        return NOOP
    return EditResult("body", section_id=section.id, new_body=outcome.new_body)
