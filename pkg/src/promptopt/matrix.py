"""Section-by-operator value table driving operator selection.

The table holds nonnegative values Q[section, operator]; normalizing the
whole table gives the probability of picking operator j to edit section i.
An optional logits table supports softmax-based selection instead of
value-proportional selection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CountTooLarge, EmptyAxis, MissingLogits, ZeroMass

Q_FLOOR = 1e-4


@dataclass
class TransitionMatrix:
    sections: tuple[str, ...]
    operators: tuple[str, ...]
    q: np.ndarray  # shape (len(sections), len(operators)), nonnegative
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.shape != (len(self.sections), len(self.operators)):
            raise ValueError("q shape %r does not match axes" % (self.q.shape,))
        if len(set(self.sections)) != len(self.sections):
            raise ValueError("duplicate section labels")
        if len(set(self.operators)) != len(self.operators):
            raise ValueError("duplicate operator labels")
        if (self.q < 0).any():
            raise ValueError("q entries must be nonnegative")

    def index(self, section: str, operator: str) -> tuple[int, int]:
        return self.sections.index(section), self.operators.index(operator)

    def value(self, section: str, operator: str) -> float:
        i, j = self.index(section, operator)
        return float(self.q[i, j])

    def set_value(self, section: str, operator: str, value: float):
        i, j = self.index(section, operator)
        self.q[i, j] = value

    def copy(self) -> "TransitionMatrix":
        return TransitionMatrix(
            self.sections,
            self.operators,
            self.q.copy(),
            None if self.logits is None else self.logits.copy(),
        )


@dataclass(frozen=True)
class SelectionPair:
    section: str
    operator: str
    q_at_selection: float


@dataclass(frozen=True)
class GradientObservation:
    pair: SelectionPair
    score_prev: float
    score_cur: float

    @property
    def gradient(self) -> float:
        return self.score_cur - self.score_prev


def init_uniform(sections: Sequence[str], operators: Sequence[str]) -> TransitionMatrix:
    """Every cell starts at 1/(rows*cols) so the table is itself the uniform
    selection distribution."""
    if not sections or not operators:
        raise EmptyAxis("need at least one section and one operator")
    n, m = len(sections), len(operators)
    q = np.full((n, m), 1.0 / (n * m))
    return TransitionMatrix(tuple(sections), tuple(operators), q)


def selection_distribution(m: TransitionMatrix, mode: str = "value_proportional") -> np.ndarray:
    """Probability of each (section, operator) cell: the q table normalized
    by its sum, or a whole-matrix softmax of the logits."""
    if mode == "value_proportional":
        total = m.q.sum()
        if total <= 0:
            raise ZeroMass("matrix sum is zero; cannot normalize")
        return m.q / total
    if mode == "softmax_logits":
        if m.logits is None:
            raise MissingLogits("matrix has no logits table")
        z = np.exp(m.logits - m.logits.max())
        return z / z.sum()
    raise ValueError("unknown mode %r" % mode)


def select_pairs(m: TransitionMatrix, count: int, rng: np.random.Generator,
                 eligible: Optional[np.ndarray] = None,
                 mode: str = "value_proportional") -> list[SelectionPair]:
    """Sample `count` distinct cells without replacement, each draw
    proportional to the current distribution restricted to the remaining
    cells. `eligible` is an optional boolean mask (e.g. editable sections
    only)."""
    probs = selection_distribution(m, mode=mode).copy()
    if eligible is not None:
        probs = np.where(eligible, probs, 0.0)
    flat = probs.ravel()
    available = int((flat > 0).sum())
    if count > available:
        raise CountTooLarge(
            "requested %d pairs but only %d eligible cells" % (count, available)
        )
    n_ops = len(m.operators)
    chosen = []
    weights = flat.copy()
    for _ in range(count):
        total = weights.sum()
        idx = int(rng.choice(len(weights), p=weights / total))
        weights[idx] = 0.0
        i, j = divmod(idx, n_ops)
        chosen.append(
            SelectionPair(m.sections[i], m.operators[j], float(m.q[i, j]))
        )
    return chosen


def matrix_to_dict(m: TransitionMatrix) -> dict:
    return {
        "sections": list(m.sections),
        "operators": list(m.operators),
        "q": [[float(x) for x in row] for row in m.q],
    }


def matrix_from_dict(doc: dict) -> TransitionMatrix:
    return TransitionMatrix(
        tuple(doc["sections"]),
        tuple(doc["operators"]),
        np.array(doc["q"], dtype=np.float64),
    )


def save_matrix(m: TransitionMatrix, path):
    Path(path).write_text(
        json.dumps(matrix_to_dict(m), indent=2) + "\n", encoding="utf-8", newline="\n"
    )


def load_matrix(path) -> TransitionMatrix:
    return matrix_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
