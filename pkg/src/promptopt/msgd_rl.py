"""Sarsa-style optimizer over (section, operator) edits, with experience
persistence across datasets.

Each epoch samples several cells, applies each operator in isolation from
the epoch's base candidate, turns the score changes into a shared mean
reward, and updates each sampled cell toward reward + gamma * next-Q, where
next-Q is the provisional estimate q + gradient.
"""

from __future__ import annotations

import datetime
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    CorruptFile,
    EmptySample,
    InvalidHyperparameter,
    VersionMismatch,
)
from .matrix import (
    Q_FLOOR,
    GradientObservation,
    SelectionPair,
    TransitionMatrix,
    select_pairs,
)

log = logging.getLogger(__name__)

EXPERIENCE_VERSION = 1


def provisional_next_q(q_current: float, gradient: float) -> float:
    """Bootstrapped estimate of the next state-action value: the current cell
    value shifted by the observed score change."""
    return q_current + gradient


def mean_reward(gradients: Sequence[float]) -> float:
    """One shared reward per epoch: the arithmetic mean of the sampled pairs'
    gradients."""
    if not gradients:
        raise EmptySample("need at least one gradient")
    return float(sum(gradients)) / len(gradients)


def sarsa_update(q: float, reward: float, q_next: float,
                 alpha: float = 0.5, gamma: float = 0.5) -> float:
    """Standard Sarsa target: q + alpha * (reward + gamma * q_next - q)."""
    if not 0 < alpha <= 1:
        raise InvalidHyperparameter("alpha must be in (0,1], got %r" % alpha)
    if not 0 <= gamma <= 1:
        raise InvalidHyperparameter("gamma must be in [0,1], got %r" % gamma)
    return q + alpha * (reward + gamma * q_next - q)


def rl_epoch(
    m: TransitionMatrix,
    base_score: float,
    pairs_per_epoch: int,
    rng: np.random.Generator,
    apply_pair: Callable[[SelectionPair], object],
    evaluate_candidate: Callable[[object], float],
    sarsa_alpha: float = 0.5,
    sarsa_gamma: float = 0.5,
    eligible: Optional[np.ndarray] = None,
    reward_mode: str = "mean",
    q_floor: float = Q_FLOOR,
) -> tuple[TransitionMatrix, list[GradientObservation], list[object]]:
    """Run one optimization epoch.

    `apply_pair` turns a sampled (section, operator) cell into an edited
    candidate (or None for a no-op edit); `evaluate_candidate` scores it.
    Every edit is applied in isolation from the same base, so each gradient
    is attributable to exactly one cell. Returns the updated matrix, the
    gradient observations, and the edited candidates for retention.
    """
    if pairs_per_epoch < 1:
        raise InvalidHyperparameter("pairs_per_epoch must be >= 1")
    pairs = select_pairs(m, pairs_per_epoch, rng, eligible=eligible)
    observations: list[GradientObservation] = []
    candidates: list[object] = []
    for pair in pairs:
        cand = apply_pair(pair)
        if cand is None:
            # no-op edit: the prompt did not change, so the score cannot move
            observations.append(GradientObservation(pair, base_score, base_score))
            continue
        cur = evaluate_candidate(cand)
        observations.append(GradientObservation(pair, base_score, cur))
        candidates.append(cand)

    out = apply_sarsa_updates(
        m, observations, sarsa_alpha, sarsa_gamma,
        reward_mode=reward_mode, q_floor=q_floor,
    )
    return out, observations, candidates


def apply_sarsa_updates(
    m: TransitionMatrix,
    observations: Sequence[GradientObservation],
    sarsa_alpha: float = 0.5,
    sarsa_gamma: float = 0.5,
    reward_mode: str = "mean",
    q_floor: float = Q_FLOOR,
) -> TransitionMatrix:
    """Apply one epoch's Sarsa updates to the sampled cells, in pair order,
    leaving every other cell untouched."""
    gradients = [o.gradient for o in observations]
    shared_reward = mean_reward(gradients)
    out = m.copy()
    for obs in observations:
        i, j = out.index(obs.pair.section, obs.pair.operator)
        q = float(out.q[i, j])
        reward = shared_reward if reward_mode == "mean" else obs.gradient
        q_next = provisional_next_q(q, obs.gradient)
        out.q[i, j] = max(
            sarsa_update(q, reward, q_next, sarsa_alpha, sarsa_gamma), q_floor
        )
    return out


# ---------------------------------------------------------------------------
# experience persistence

@dataclass
class ExperienceStore:
    matrix: TransitionMatrix
    task_kind: str
    epochs_trained: int = 0
    created_at: str = ""
    updated_at: str = ""
    version: int = EXPERIENCE_VERSION

    @classmethod
    def new(cls, matrix: TransitionMatrix, task_kind: str, epochs_trained: int = 0):
        now = datetime.datetime.now(datetime.timezone.utc).isoformat()
        return cls(matrix, task_kind, epochs_trained, created_at=now, updated_at=now)


def save_experience(store: ExperienceStore, path) -> None:
    doc = {
        "version": store.version,
        "task_kind": store.task_kind,
        "sections": list(store.matrix.sections),
        "operators": list(store.matrix.operators),
        "q": [[float(x) for x in row] for row in store.matrix.q],
        "epochs_trained": store.epochs_trained,
        "created_at": store.created_at,
        "updated_at": store.updated_at,
    }
    Path(path).write_text(
        json.dumps(doc, indent=2) + "\n", encoding="utf-8", newline="\n"
    )


def read_experience(path) -> ExperienceStore:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        version = doc["version"]
        sections = tuple(doc["sections"])
        operators = tuple(doc["operators"])
        q = np.array(doc["q"], dtype=np.float64)
        matrix = TransitionMatrix(sections, operators, q)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise CorruptFile("cannot read experience file %s: %s" % (path, e))
    if version != EXPERIENCE_VERSION:
        raise VersionMismatch("unsupported experience version %r" % version)
    return ExperienceStore(
        matrix=matrix,
        task_kind=doc.get("task_kind", ""),
        epochs_trained=int(doc.get("epochs_trained", 0)),
        created_at=doc.get("created_at", ""),
        updated_at=doc.get("updated_at", ""),
        version=version,
    )


def load_experience(path, sections: Sequence[str], operators: Sequence[str],
                    task_kind: Optional[str] = None) -> TransitionMatrix:
    """Load a prior matrix and align it to the current vocabulary by name.

    Matched (section, operator) cells are copied. A new operator column gets
    the per-row mean over matched operators; a new section row gets the
    per-column mean over matched sections; cells new on both axes get the
    prior's global mean. With no overlap at all the result is uniform.
    """
    store = read_experience(path)
    if task_kind and store.task_kind and task_kind != store.task_kind:
        log.warning(
            "loading %s experience into a %s run; operator preferences are "
            "task-specific and may not transfer", store.task_kind, task_kind,
        )
    prior = store.matrix
    sec_map = {s: i for i, s in enumerate(prior.sections)}
    op_map = {o: j for j, o in enumerate(prior.operators)}
    matched_secs = [s for s in sections if s in sec_map]
    matched_ops = [o for o in operators if o in op_map]
    n, m = len(sections), len(operators)
    if not matched_secs and not matched_ops:
        q = np.full((n, m), 1.0 / (n * m))
        return TransitionMatrix(tuple(sections), tuple(operators), q)
    global_mean = float(prior.q.mean())
    q = np.empty((n, m))
    for i, s in enumerate(sections):
        for j, o in enumerate(operators):
            if s in sec_map and o in op_map:
                q[i, j] = prior.q[sec_map[s], op_map[o]]
            elif s in sec_map and matched_ops:
                q[i, j] = np.mean([prior.q[sec_map[s], op_map[o2]] for o2 in matched_ops])
            elif o in op_map and matched_secs:
                q[i, j] = np.mean([prior.q[sec_map[s2], op_map[o]] for s2 in matched_secs])
            else:
                q[i, j] = global_mean
    return TransitionMatrix(tuple(sections), tuple(operators), q)
