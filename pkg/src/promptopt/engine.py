"""Training loop: candidate initialization, per-iteration operator
application and evaluation, top-k retention with simulated-annealing
survivors, matrix updates via the configured optimizer, convergence
detection, checkpoints, and reports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import operators as ops
from .backend import Backend, GenerationResponse
from .errors import (
    ConfigError,
    EmptyDataset,
    KTooLarge,
    MissingContext,
    NonEditableSection,
    RetrieverUnavailable,
    SectionSetMismatch,
)
from .evaluation import BadCase, ExampleRecord, evaluate
from .matrix import (
    GradientObservation,
    SelectionPair,
    init_uniform,
    save_matrix,
    select_pairs,
)
from .msgd import msgd_update, norm_delta
from .msgd_rl import (
    ExperienceStore,
    load_experience,
    rl_epoch,
    save_experience,
)
from .prompt_model import (
    Candidate,
    MetaPrompt,
    candidate_to_dict,
    reorder,
)

log = logging.getLogger(__name__)

CONVERGENCE_EPS = 1e-4
CONVERGENCE_WINDOW = 3


@dataclass
class RunConfig:
    iterations: int = 10
    beam_init: int = 6
    top_k: int = 3
    anneal_count: int = 2
    anneal_temperature_start: float = 1.0
    anneal_temperature_decay: float = 0.9
    optimizer: str = "msgd"  # msgd | msgd_rl
    learning_rate_alpha: float = 1.0
    msgd_update_mode: str = "multiplicative"  # or "additive"
    sarsa_alpha: float = 0.5
    sarsa_gamma: float = 0.5
    reward_mode: str = "mean"  # mean | per_pair
    pairs_per_epoch: int = 0  # 0 -> optimizer default (2 msgd / 5 msgd_rl)
    objective: str = "f1"
    seed: int = 0
    model: str = "default"
    operator_temperature: float = 0.7
    operators: tuple[str, ...] = ()
    eval_fraction: float = 1.0
    few_shot_k: int = 3
    few_shot_strategy: str = "uniform"
    experience_in: Optional[str] = None
    experience_out: Optional[str] = None
    output_dir: str = "runs"
    task: str = "CLS"
    cls_average: str = "micro"

    def effective_pairs_per_epoch(self) -> int:
        if self.pairs_per_epoch > 0:
            return self.pairs_per_epoch
        return 5 if self.optimizer == "msgd_rl" else 2

    def effective_operators(self) -> tuple[str, ...]:
        if self.operators:
            return tuple(self.operators)
        return tuple(o for o in ops.OPERATOR_IDS if o != "rag")

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.anneal_count < 0:
            raise ConfigError("anneal_count must be >= 0")
        if self.beam_init < 1:
            raise ConfigError("beam_init must be >= 1")
        if self.optimizer not in ("msgd", "msgd_rl"):
            raise ConfigError("optimizer must be msgd or msgd_rl")
        if self.objective not in ("f1", "precision", "recall"):
            raise ConfigError("objective must be one of f1/precision/recall")
        if not 0 < self.eval_fraction <= 1:
            raise ConfigError("eval_fraction must be in (0, 1]")
        if self.learning_rate_alpha <= 0:
            raise ConfigError("learning_rate_alpha must be positive")
        if not 0 < self.sarsa_alpha <= 1:
            raise ConfigError("sarsa_alpha must be in (0, 1]")
        if not 0 <= self.sarsa_gamma <= 1:
            raise ConfigError("sarsa_gamma must be in [0, 1]")
        for op in self.effective_operators():
            if op not in ops.OPERATOR_IDS:
                raise ConfigError("unknown operator %r" % op)
        if self.task not in ("NER", "CLS", "MRC"):
            raise ConfigError("task must be NER/CLS/MRC")


def config_from_dict(doc: dict) -> RunConfig:
    known = {f.name for f in RunConfig.__dataclass_fields__.values()}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError("unknown config keys: %s" % sorted(unknown))
    doc = dict(doc)
    if "operators" in doc:
        doc["operators"] = tuple(doc["operators"])
    return RunConfig(**doc)


def config_to_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    doc["operators"] = list(doc["operators"])
    return doc


def run_id_for(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


@dataclass
class RunReport:
    iterations: list = field(default_factory=list)
    final_test_objective: Optional[float] = None
    usage: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        # wall clock is excluded from checkpoint files so identical runs
        # produce byte-identical artifacts
        doc = {
            "iterations": self.iterations,
            "final_test_objective": self.final_test_objective,
            "usage": self.usage,
        }
        if include_timing:
            doc["wall_clock_s"] = self.wall_clock_s
        return doc


# ---------------------------------------------------------------------------
# pool management

def _latest(cand: Candidate, objective: str) -> float:
    s = cand.latest_score(objective)
    return s if s is not None else 0.0


def retain(candidates: Sequence[Candidate], top_k: int, anneal_count: int,
           temperature: float, rng: np.random.Generator,
           objective: str = "f1") -> list[Candidate]:
    """Keep the top_k candidates by objective plus up to anneal_count
    lower-scoring survivors sampled with weight exp((score - best)/T). The
    best candidate always survives."""
    if not candidates:
        return []

    def sort_key(c: Candidate):
        return (-_latest(c, objective), len(c.lineage), c.fingerprint)

    ordered = sorted(candidates, key=sort_key)
    survivors = ordered[:top_k]
    rest = ordered[top_k:]
    if rest and anneal_count > 0:
        best_score = _latest(ordered[0], objective)
        t = max(temperature, 1e-9)
        weights = np.array(
            [math.exp((_latest(c, objective) - best_score) / t) for c in rest]
        )
        n_extra = min(anneal_count, len(rest))
        probs = weights / weights.sum()
        picked = rng.choice(len(rest), size=n_extra, replace=False, p=probs)
        survivors.extend(rest[i] for i in sorted(picked))
    return survivors


def initialize_candidates(template: MetaPrompt, backend: Backend, beam_init: int,
                          seed: int, model: str = "default",
                          temperature: float = 0.9,
                          evaluate_fn=None) -> list[Candidate]:
    """Seed the candidate pool: generate beam_init variant bodies per
    editable section (refine at elevated temperature) and assemble the i-th
    candidate from the i-th variant of every section. Duplicate fingerprints
    are collapsed with a warning."""
    base = Candidate(prompt=template)
    if beam_init == 1:
        pool = [base]
    else:
        editable = template.editable_sections()
        reqs = []
        for section in editable:
            ctx = ops.OperatorContext(
                target_section=section, prompt=template, model=model,
                temperature=temperature, rng_seed=seed,
            )
            req = ops.build_request("refine", ctx)
            reqs.extend([req] * beam_init)
        results = backend.generate_batch(reqs)
        variants: dict[str, list[str]] = {}
        idx = 0
        for section in editable:
            bodies = []
            for _ in range(beam_init):
                res = results[idx]
                idx += 1
                body = section.body
                if isinstance(res, GenerationResponse):
                    outcome = ops.parse_operator_response("refine", res.text, section.name)
                    if outcome.parse_ok:
                        body = outcome.new_body
                bodies.append(body)
            variants[section.id] = bodies
        pool = []
        for i in range(beam_init):
            prompt = template
            for section in editable:
                prompt = prompt.with_body(section.id, variants[section.id][i])
            pool.append(Candidate(prompt=prompt))
    deduped: dict[str, Candidate] = {}
    for cand in pool:
        deduped.setdefault(cand.fingerprint, cand)
    if len(deduped) < len(pool):
        log.warning(
            "initial pool collapsed from %d to %d distinct candidates",
            len(pool), len(deduped),
        )
    pool = list(deduped.values())
    if evaluate_fn is not None:
        pool = [evaluate_fn(c) for c in pool]
    return pool


# ---------------------------------------------------------------------------
# training

class _Trainer:
    def __init__(self, cfg: RunConfig, train_set, test_set, template: MetaPrompt,
                 backend: Backend, retriever=None, run_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.backend = backend
        self.retriever = retriever
        self.template = template
        self.rng = np.random.default_rng(cfg.seed)
        self.train_set = self._slice(train_set)
        self.test_set = list(test_set)
        self.run_dir = Path(run_dir) if run_dir else Path(cfg.output_dir) / run_id_for(cfg)
        self.report = RunReport()
        self.bad_cases: dict[str, list[BadCase]] = {}
        self.reports_by_fp: dict = {}
        sections = tuple(s.id for s in template.ordered_sections())
        operators = cfg.effective_operators()
        if cfg.experience_in:
            self.matrix = load_experience(
                cfg.experience_in, sections, operators, task_kind=cfg.task
            )
        else:
            self.matrix = init_uniform(sections, operators)
        editable_ids = {s.id for s in template.editable_sections()}
        mask = np.zeros(self.matrix.q.shape, dtype=bool)
        for i, sid in enumerate(sections):
            if sid in editable_ids:
                mask[i, :] = True
        if retriever is None and "rag" in operators:
            j = operators.index("rag")
            mask[:, j] = False
        self.eligible = mask
        self.epochs_trained = 0

    def _slice(self, examples):
        examples = list(examples)
        if self.cfg.eval_fraction >= 1.0:
            return examples
        n = max(1, int(round(len(examples) * self.cfg.eval_fraction)))
        return examples[:n]

    def _evaluate(self, cand: Candidate, iteration: int, examples=None) -> Candidate:
        examples = examples if examples is not None else self.train_set
        report, bad = evaluate(
            cand, examples, self.backend, objective=self.cfg.objective,
            seed=self.cfg.seed + iteration, model=self.cfg.model,
        )
        scored = cand.with_score(iteration, {
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
        })
        self.bad_cases[scored.fingerprint] = bad
        self.reports_by_fp[scored.fingerprint] = report
        return scored

    def _apply_pair(self, pair: SelectionPair, base: Candidate, iteration: int,
                    pool: Sequence[Candidate], pair_index: int) -> Optional[Candidate]:
        section = base.prompt.section_by_id(pair.section)
        ctx = ops.OperatorContext(
            target_section=section,
            prompt=base.prompt,
            sibling_candidates=tuple(pool),
            bad_cases=tuple(self.bad_cases.get(base.fingerprint, ())),
            dataset=tuple(self.train_set),
            retriever=self.retriever,
            rng_seed=self.cfg.seed * 1_000_003 + iteration * 101 + pair_index,
            model=self.cfg.model,
            temperature=self.cfg.operator_temperature,
            objective=self.cfg.objective,
            metric_report=self.reports_by_fp.get(base.fingerprint),
            few_shot_k=self.cfg.few_shot_k,
            few_shot_strategy=self.cfg.few_shot_strategy,
        )
        try:
            edit = ops.apply_operator(pair.operator, ctx, self.backend)
        except (MissingContext, SectionSetMismatch, EmptyDataset,
                KTooLarge, RetrieverUnavailable, NonEditableSection):
            return None
        if edit.kind == "noop":
            return None
        if edit.kind == "body":
            new_prompt = base.prompt.with_body(edit.section_id, edit.new_body)
        elif edit.kind == "order":
            new_prompt = reorder(base.prompt, edit.new_order)
        else:
            new_prompt = edit.new_prompt
        if new_prompt.fingerprint() == base.prompt.fingerprint():
            return None
        return replace(
            base, prompt=new_prompt,
        ).with_edit(iteration, pair.section, pair.operator)

    def run(self) -> tuple[Candidate, RunReport, ExperienceStore]:
        cfg = self.cfg
        start = time.monotonic()
        self.run_dir.mkdir(parents=True, exist_ok=True)
        pool = initialize_candidates(
            self.template, self.backend, cfg.beam_init, cfg.seed,
            model=cfg.model, temperature=max(cfg.operator_temperature, 0.9),
            evaluate_fn=lambda c: self._evaluate(c, 0),
        )
        stall = 0
        prev_best = max(_latest(c, cfg.objective) for c in pool)
        stopped_early = False
        for iteration in range(1, cfg.iterations + 1):
            pool = self._iteration(iteration, pool)
            best = max(_latest(c, cfg.objective) for c in pool)
            self._checkpoint(iteration, pool)
            if best >= 1.0 - 1e-12:
                stopped_early = True
            elif best - prev_best < CONVERGENCE_EPS:
                stall += 1
                if stall >= CONVERGENCE_WINDOW:
                    stopped_early = True
            else:
                stall = 0
            prev_best = max(prev_best, best)
            if stopped_early:
                log.info("converged at iteration %d (best=%.5f)", iteration, best)
                break

        best_cand = max(pool, key=lambda c: (_latest(c, cfg.objective), -len(c.lineage)))
        if self.test_set:
            test_report, _ = evaluate(
                best_cand, self.test_set, self.backend, objective=cfg.objective,
                seed=cfg.seed, model=cfg.model,
            )
            self.report.final_test_objective = test_report.objective_value()
        self.report.usage = self.backend.usage.snapshot()
        self.report.wall_clock_s = time.monotonic() - start
        self._write_report()
        store = ExperienceStore.new(self.matrix, cfg.task, self.epochs_trained)
        if cfg.experience_out:
            save_experience(store, cfg.experience_out)
        return best_cand, self.report, store

    def _iteration(self, iteration: int, pool: list[Candidate]) -> list[Candidate]:
        cfg = self.cfg
        base = max(pool, key=lambda c: (_latest(c, cfg.objective), -len(c.lineage)))
        base_score = _latest(base, cfg.objective)
        n_pairs = min(cfg.effective_pairs_per_epoch(), int(self.eligible.sum()))
        new_candidates: list[Candidate] = []
        observations: list[GradientObservation] = []

        if cfg.optimizer == "msgd":
            pairs = select_pairs(self.matrix, n_pairs, self.rng, eligible=self.eligible)
            for k, pair in enumerate(pairs):
                cand = self._apply_pair(pair, base, iteration, pool, k)
                if cand is None:
                    observations.append(GradientObservation(pair, base_score, base_score))
                    continue
                cand = self._evaluate(cand, iteration)
                cur = _latest(cand, cfg.objective)
                observations.append(GradientObservation(pair, base_score, cur))
                new_candidates.append(cand)
            for obs in observations:
                if obs.score_prev > 0:
                    norm = norm_delta(obs.score_prev, obs.score_cur)
                else:
                    # zero baseline: fall back to the absolute score change
                    norm = obs.gradient
                self.matrix = msgd_update(
                    self.matrix, obs.pair, norm,
                    alpha=cfg.learning_rate_alpha, mode=cfg.msgd_update_mode,
                )
        else:
            holder: dict[str, Candidate] = {}

            def apply_hook(pair, _k=[0]):
                cand = self._apply_pair(pair, base, iteration, pool, _k[0])
                _k[0] += 1
                return cand

            def eval_hook(cand):
                scored = self._evaluate(cand, iteration)
                holder[scored.fingerprint] = scored
                return _latest(scored, cfg.objective)

            self.matrix, observations, edited = rl_epoch(
                self.matrix, base_score, n_pairs, self.rng,
                apply_hook, eval_hook,
                sarsa_alpha=cfg.sarsa_alpha, sarsa_gamma=cfg.sarsa_gamma,
                eligible=self.eligible, reward_mode=cfg.reward_mode,
            )
            new_candidates = [holder[c.fingerprint] for c in edited
                              if c.fingerprint in holder]

        self.epochs_trained += 1
        merged: dict[str, Candidate] = {}
        for cand in pool + new_candidates:
            merged.setdefault(cand.fingerprint, cand)
        temperature = cfg.anneal_temperature_start * (
            cfg.anneal_temperature_decay ** (iteration - 1)
        )
        pool = retain(
            list(merged.values()), cfg.top_k, cfg.anneal_count, temperature,
            self.rng, objective=cfg.objective,
        )
        scores = [_latest(c, cfg.objective) for c in pool]
        self.report.iterations.append({
            "iteration": iteration,
            "best": max(scores),
            "mean": sum(scores) / len(scores),
            "selections": [
                {"section": o.pair.section, "operator": o.pair.operator,
                 "gradient": o.gradient}
                for o in observations
            ],
            "pool_size": len(pool),
        })
        return pool

    def _checkpoint(self, iteration: int, pool: list[Candidate]):
        it_dir = self.run_dir / ("iter_%03d" % iteration)
        it_dir.mkdir(parents=True, exist_ok=True)
        _write_json(it_dir / "candidates.json", [candidate_to_dict(c) for c in pool])
        save_matrix(self.matrix, it_dir / "matrix.json")
        _write_json(it_dir / "report.json", self.report.to_dict())

    def _write_report(self):
        _write_json(self.run_dir / "report.json", self.report.to_dict())
        with open(self.run_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
            op_ids = list(self.cfg.effective_operators())
            writer = csv.writer(fh)
            writer.writerow(["iteration", "best", "mean"] + ["count_%s" % o for o in op_ids])
            for row in self.report.iterations:
                counts = {o: 0 for o in op_ids}
                for sel in row["selections"]:
                    counts[sel["operator"]] += 1
                writer.writerow(
                    [row["iteration"], "%.6f" % row["best"], "%.6f" % row["mean"]]
                    + [counts[o] for o in op_ids]
                )


def _write_json(path, doc):
    Path(path).write_text(
        json.dumps(doc, indent=2, ensure_ascii=False, sort_keys=True) + "\n",
        encoding="utf-8", newline="\n",
    )


def train(cfg: RunConfig, train_set: Sequence[ExampleRecord],
          test_set: Sequence[ExampleRecord], template: MetaPrompt,
          backend: Backend, retriever=None, run_dir=None,
          ) -> tuple[Candidate, RunReport, ExperienceStore]:
    """Run the full optimization loop and return the best candidate, the run
    report, and the learned experience."""
    return _Trainer(cfg, train_set, test_set, template, backend,
                    retriever=retriever, run_dir=run_dir).run()
