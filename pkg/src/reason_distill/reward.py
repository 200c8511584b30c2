"""Rule-based five-dimensional reward, its weighted aggregate and group advantages."""

from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np

from .synth import ANSWER_TOKENS, World

ADVANTAGE_EPS = 1e-8
DIMENSIONS = (
    "query_understanding",
    "service_understanding",
    "rule_compliance",
    "reasoning_consistency",
    "answer_correctness",
)


@dataclass(frozen=True)
class RewardVector:
    query_understanding: float
    service_understanding: float
    rule_compliance: float
    reasoning_consistency: float
    answer_correctness: float

    def __post_init__(self):
        for name, v in zip(DIMENSIONS, astuple(self)):
            if not 0.0 <= v <= 4.0:
                raise ValueError(f"{name}={v} outside [0, 4]")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @property
    def thinking(self) -> float:
        """Process reward: mean of the first four dimensions."""
        return float(np.mean(astuple(self)[:4]))

    @property
    def label(self) -> float:
        return self.answer_correctness


def _fraction(wanted: Sequence[str], mentioned: set[str]) -> float:
    return sum(t in mentioned for t in wanted) / len(wanted)


def score_output(
    world: World,
    query: Sequence[str],
    service: Sequence[str],
    label: int,
    reason: Sequence[str],
    answer: str | None,
) -> RewardVector:
    """Score a generated (reason, answer) against the world's ground truth.

    * query understanding: share of the intent's concept tokens named
      (a head synonym counts as its concept);
    * service understanding: share of the service's key attributes named;
      with no key attribute any non-empty reason gets full credit;
    * rule compliance: the deciding rule token is cited;
    * reasoning consistency: the answer equals the label implied by the last
      cited rule;
    * answer correctness: the answer equals the ground-truth label.
    """
    intent = world.intent_of_query(query)
    mentioned = {world.canonical(t) for t in reason}
    d1 = 4.0 * _fraction(world.intents[intent], mentioned)
    key = world.key_attrs(intent, service)
    d2 = 4.0 * _fraction(key, mentioned) if key else (4.0 if reason else 0.0)
    _, rule_tok = world.decide(intent, world.service_attrs(service))
    d3 = 4.0 if rule_tok in mentioned else 0.0
    answer_label = ANSWER_TOKENS.index(answer) if answer in ANSWER_TOKENS else None
    cited = [world.rule_label(t) for t in reason if world.rule_label(t) is not None]
    d4 = 4.0 if cited and answer_label is not None and cited[-1] == answer_label else 0.0
    d5 = 4.0 if answer_label is not None and answer_label == label else 0.0
    return RewardVector(d1, d2, d3, d4, d5)


def aggregate_reward(rv: RewardVector, alpha: float = 0.5, beta: float = 0.5) -> float:
    """``alpha * R_thinking + beta * R_label``."""
    if alpha < 0 or beta < 0:
        raise ValueError("reward weights must be non-negative")
    if alpha + beta <= 0:
        raise ValueError("at least one reward weight must be positive")
    return alpha * rv.thinking + beta * rv.label


def compute_advantages(finals: Sequence[float]) -> np.ndarray:
    """Group-normalised advantages with the population standard deviation;
    a group whose spread is below 1e-8 gets all-zero advantages."""
    r = np.asarray(finals, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two outputs")
    centred = r - r.mean()
    std = np.sqrt(np.mean(centred * centred))
    if std < ADVANTAGE_EPS:
        return np.zeros_like(r)
    return centred / std
