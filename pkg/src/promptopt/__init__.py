"""Sectioned-prompt optimization with learned operator selection."""

from .matrix import (
    GradientObservation,
    SelectionPair,
    TransitionMatrix,
    init_uniform,
    select_pairs,
    selection_distribution,
)
from .msgd import msgd_update, norm_delta
from .msgd_rl import (
    ExperienceStore,
    load_experience,
    mean_reward,
    provisional_next_q,
    rl_epoch,
    sarsa_update,
    save_experience,
)
from .prompt_model import Candidate, MetaPrompt, Section, load_template, render, reorder

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "ExperienceStore",
    "GradientObservation",
    "MetaPrompt",
    "Section",
    "SelectionPair",
    "TransitionMatrix",
    "init_uniform",
    "load_experience",
    "load_template",
    "mean_reward",
    "msgd_update",
    "norm_delta",
    "provisional_next_q",
    "render",
    "reorder",
    "rl_epoch",
    "sarsa_update",
    "save_experience",
    "select_pairs",
    "selection_distribution",
]
