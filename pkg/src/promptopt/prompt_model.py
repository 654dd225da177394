"""Sectioned prompts: ordered, individually editable sections with deterministic rendering.

A prompt is a sequence of named sections. Optimizers edit one section body at a
time (or reorder sections) while everything else stays byte-identical, so score
changes can be attributed to single edits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import (
    DuplicatePlaceholder,
    MissingPlaceholder,
    NotAPermutation,
    TemplateParseError,
    UnknownTaskKind,
)

DEFAULT_PLACEHOLDER = "{{Input}}"

TASK_KINDS = ("NER", "CLS", "MRC")

SECTION_SEPARATOR = "\n\n"


@dataclass(frozen=True)
class Section:
    """One editable unit of a prompt. `id` is stable across edits; only
    `body` and `position` ever change."""

    id: str
    name: str
    body: str
    editable: bool = True
    position: int = 0


@dataclass(frozen=True)
class MetaPrompt:
    sections: tuple[Section, ...]
    input_placeholder: str = DEFAULT_PLACEHOLDER
    output_contract: str = ""

    def __post_init__(self):
        ids = [s.id for s in self.sections]
        if len(set(ids)) != len(ids):
            raise TemplateParseError("duplicate section ids: %r" % (ids,))
        positions = sorted(s.position for s in self.sections)
        if positions != list(range(len(self.sections))):
            raise TemplateParseError("positions are not a permutation of 0..m")

    def ordered_sections(self) -> list[Section]:
        return sorted(self.sections, key=lambda s: s.position)

    def section_by_id(self, section_id: str) -> Section:
        for s in self.sections:
            if s.id == section_id:
                return s
        raise KeyError(section_id)

    def editable_sections(self) -> list[Section]:
        return [s for s in self.ordered_sections() if s.editable]

    def with_body(self, section_id: str, new_body: str) -> "MetaPrompt":
        """Return a copy with one section's body replaced."""
        found = False
        new_sections = []
        for s in self.sections:
            if s.id == section_id:
                new_sections.append(replace(s, body=new_body))
                found = True
            else:
                new_sections.append(s)
        if not found:
            raise KeyError(section_id)
        return replace(self, sections=tuple(new_sections))

    def skeleton(self) -> str:
        """Section bodies joined in position order, placeholder intact."""
        return SECTION_SEPARATOR.join(s.body for s in self.ordered_sections())

    def fingerprint(self) -> str:
        canon = json.dumps(
            [s.body for s in self.ordered_sections()], ensure_ascii=False
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def render(prompt: MetaPrompt, input_text: str) -> str:
    """Concatenate section bodies in position order and substitute the input
    placeholder. Pure function of (prompt, input_text)."""
    skeleton = prompt.skeleton()
    n = skeleton.count(prompt.input_placeholder)
    if n == 0:
        raise MissingPlaceholder(
            "placeholder %r not found in prompt" % prompt.input_placeholder
        )
    if n > 1:
        raise DuplicatePlaceholder(
            "placeholder %r occurs %d times" % (prompt.input_placeholder, n)
        )
    return skeleton.replace(prompt.input_placeholder, input_text)


def reorder(prompt: MetaPrompt, new_order: Sequence[str]) -> MetaPrompt:
    """Reassign positions according to `new_order` (a permutation of section
    ids); bodies and ids are untouched."""
    ids = {s.id for s in prompt.sections}
    if sorted(new_order) != sorted(ids):
        raise NotAPermutation(
            "new_order %r is not a permutation of %r" % (list(new_order), sorted(ids))
        )
    pos = {sid: i for i, sid in enumerate(new_order)}
    new_sections = tuple(replace(s, position=pos[s.id]) for s in prompt.sections)
    return replace(prompt, sections=new_sections)


@dataclass(frozen=True)
class Candidate:
    """A prompt plus its score history and edit lineage. Immutable; edits
    produce new candidates."""

    prompt: MetaPrompt
    # iteration -> {metric name: value in [0, 1]}
    scores: tuple[tuple[int, tuple[tuple[str, float], ...]], ...] = ()
    # (iteration, section id, operator id)
    lineage: tuple[tuple[int, str, str], ...] = ()

    @property
    def fingerprint(self) -> str:
        return self.prompt.fingerprint()

    def with_score(self, iteration: int, metrics: Mapping[str, float]) -> "Candidate":
        for k, v in metrics.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError("score %s=%r outside [0,1]" % (k, v))
        entry = (iteration, tuple(sorted(metrics.items())))
        return replace(self, scores=self.scores + (entry,))

    def with_edit(self, iteration: int, section_id: str, operator_id: str) -> "Candidate":
        return replace(self, lineage=self.lineage + ((iteration, section_id, operator_id),))

    def latest_score(self, metric: str):
        for _, metrics in reversed(self.scores):
            for k, v in metrics:
                if k == metric:
                    return v
        return None

    def score_at(self, iteration: int, metric: str):
        for it, metrics in self.scores:
            if it == iteration:
                for k, v in metrics:
                    if k == metric:
                        return v
        return None


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name.lower())


def scratch_prompt(task_kind: str, labels: Iterable[str] = ()) -> MetaPrompt:
    """Build an empty-bodied skeleton prompt for a task: a task description,
    one definition section per label, a few-shot slot, and the output
    contract."""
    if task_kind not in TASK_KINDS:
        raise UnknownTaskKind(task_kind)
    labels = list(labels)
    contracts = {
        "NER": '{"<label>": {"<mention>": [[start, end]]}}',
        "CLS": '{"label": ""}',
        "MRC": '{"answer": ""}',
    }
    contract = contracts[task_kind]
    sections = [Section(id="task_description", name="task_description", body="")]
    for lbl in labels:
        sections.append(
            Section(id="label:%s" % _slug(lbl), name="label:%s" % lbl, body="")
        )
    sections.append(Section(id="few_shot", name="few_shot", body=""))
    sections.append(
        Section(
            id="output_format",
            name="output_format",
            body="Input:\n{{Input}}\n\nReturn the result directly in JSON format:\n"
            + contract,
            editable=False,
        )
    )
    sections = [replace(s, position=i) for i, s in enumerate(sections)]
    return MetaPrompt(sections=tuple(sections), output_contract=contract)


def load_template(source, task_kind: str | None = None, labels: Iterable[str] = ()) -> MetaPrompt:
    """Load a prompt from a JSON template file, or build one from scratch.

    `source` is a file path, or the literal string "scratch" together with a
    task kind (NER/CLS/MRC) and optional label set.
    """
    if source == "scratch":
        if task_kind is None:
            raise UnknownTaskKind("scratch prompts require a task kind")
        return scratch_prompt(task_kind, labels)
    path = Path(source)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise TemplateParseError("cannot read template %s: %s" % (path, e))
    if not raw.strip():
        raise TemplateParseError("empty template file: %s" % path)
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise TemplateParseError("template %s is not valid JSON: %s" % (path, e))
    return prompt_from_dict(doc)


def prompt_from_dict(doc: Mapping) -> MetaPrompt:
    try:
        raw_sections = doc["sections"]
    except (KeyError, TypeError):
        raise TemplateParseError("template missing 'sections'")
    if not isinstance(raw_sections, list) or not raw_sections:
        raise TemplateParseError("'sections' must be a nonempty list")
    sections = []
    for i, sec in enumerate(raw_sections):
        try:
            name = sec["name"]
            body = sec["body"]
        except (KeyError, TypeError):
            raise TemplateParseError("section %d missing name/body" % i)
        sections.append(
            Section(
                id=sec.get("id", name),
                name=name,
                body=body,
                editable=bool(sec.get("editable", True)),
                position=i,
            )
        )
    return MetaPrompt(
        sections=tuple(sections),
        input_placeholder=doc.get("input_placeholder", DEFAULT_PLACEHOLDER),
        output_contract=doc.get("output_contract", ""),
    )


def prompt_to_dict(prompt: MetaPrompt) -> dict:
    """Canonical serialization: keys in schema order, sections in position
    order."""
    return {
        "sections": [
            {"id": s.id, "name": s.name, "body": s.body, "editable": s.editable}
            for s in prompt.ordered_sections()
        ],
        "input_placeholder": prompt.input_placeholder,
        "output_contract": prompt.output_contract,
    }


def save_template(prompt: MetaPrompt, path) -> None:
    text = json.dumps(prompt_to_dict(prompt), ensure_ascii=False, indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def candidate_to_dict(cand: Candidate) -> dict:
    return {
        "prompt": prompt_to_dict(cand.prompt),
        "scores": [
            {"iteration": it, "metrics": dict(metrics)} for it, metrics in cand.scores
        ],
        "lineage": [list(entry) for entry in cand.lineage],
        "fingerprint": cand.fingerprint,
    }


def candidate_from_dict(doc: Mapping) -> Candidate:
    prompt = prompt_from_dict(doc["prompt"])
    scores = tuple(
        (entry["iteration"], tuple(sorted(entry["metrics"].items())))
        for entry in doc.get("scores", [])
    )
    lineage = tuple(tuple(e) for e in doc.get("lineage", []))
    return Candidate(prompt=prompt, scores=scores, lineage=lineage)
