"""Answer scoring (EM, token-F1, containment accuracy) and group ranking."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass
from statistics import mean
from typing import Sequence

from .model import ExecutionPlan, Query, Reward, Trajectory

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip articles (a/an/the), strip punctuation, collapse whitespace."""
    text = text.lower()
    text = _ARTICLE_RE.sub(" ", text)
    text = text.translate(_PUNCT_TABLE)
    return " ".join(text.split())


def _token_f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def score_answer(prediction: str, gold_answers: Sequence[str]) -> tuple[int, float, int]:
    """Score a prediction against acceptable answers; returns (em, f1, accuracy).

    em is exact match of normalized strings against any gold; f1 is the max
    token-level F1 over golds on normalized token multisets; accuracy is 1
    when any normalized gold appears as a substring of the normalized
    prediction.
    """
    if not gold_answers:
        raise ValueError("gold_answers must be nonempty")
    if not prediction:
        return 0, 0.0, 0
    pred_norm = normalize_answer(prediction)
    pred_tokens = pred_norm.split()
    em, best_f1, accuracy = 0, 0.0, 0
    for gold in gold_answers:
        gold_norm = normalize_answer(gold)
        if pred_norm == gold_norm:
            em = 1
        if gold_norm in pred_norm:
            accuracy = 1
        best_f1 = max(best_f1, _token_f1(pred_tokens, gold_norm.split()))
    if em == 1:
        best_f1 = 1.0
    return em, best_f1, accuracy


def build_reward(trajectory: Trajectory, query: Query) -> Reward:
    """Assemble the trajectory's reward from its final answer and token total."""
    em, f1, accuracy = score_answer(trajectory.final_answer, query.gold_answers)
    return Reward(f1=f1, em=em, accuracy=accuracy, total_tokens=trajectory.total_tokens)


@dataclass(frozen=True)
class GroupMember:
    plan: ExecutionPlan
    trajectory: Trajectory
    reward: Reward


def rank_group(members: Sequence[GroupMember]) -> tuple[tuple[int, ...], bool, float]:
    """Hierarchically rank group members; returns (ranking, mixed, baseline).

    Members sort by f1 descending, then total tokens ascending, then original
    index (stable). The baseline is the group mean f1; a member is successful
    iff its f1 strictly exceeds the baseline. The group is mixed when it
    contains both successful and non-successful members and the f1 spread is
    nonzero; only mixed groups carry a learning signal.
    """
    if len(members) < 2:
        raise ValueError("rank_group requires at least 2 members")
    ranking = tuple(
        sorted(
            range(len(members)),
            key=lambda i: (-members[i].reward.f1, members[i].reward.total_tokens, i),
        )
    )
    baseline = mean(m.reward.f1 for m in members)
    successful = [m.reward.f1 > baseline for m in members]
    f1s = [m.reward.f1 for m in members]
    mixed = any(successful) and not all(successful) and max(f1s) > min(f1s)
    return ranking, mixed, baseline


@dataclass(frozen=True)
class GroupRollout:
    """G (plan, trajectory, reward) triples for one query, ranked."""

    query_id: str
    members: tuple[GroupMember, ...]
    ranking: tuple[int, ...]
    mixed: bool
    baseline: float

    @classmethod
    def build(cls, query_id: str, members: Sequence[GroupMember]) -> "GroupRollout":
        ranking, mixed, baseline = rank_group(members)
        return cls(
            query_id=query_id,
            members=tuple(members),
            ranking=ranking,
            mixed=mixed,
            baseline=baseline,
        )

    def ranked_members(self) -> list[GroupMember]:
        return [self.members[i] for i in self.ranking]

    def best(self) -> GroupMember:
        return self.members[self.ranking[0]]
