"""Uniform and proposal masking, 80/10/10 corruption, exploration mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import TokenSequence, Vocabulary
from .mapnet import (
    PROPOSAL,
    UNIFORM,
    MapNetParams,
    MaskPlan,
    importance_ratio,
    num_masked,
    propose,
    sample_positions,
)

ACTION_MASK, ACTION_RANDOM, ACTION_KEEP = 0, 1, 2


@dataclass(frozen=True)
class ExplorationSchedule:
    start_p: float = 1.0
    end_p: float = 0.33
    end_step: int = 10_000

    def __post_init__(self):
        if not 0.0 <= self.end_p <= self.start_p <= 1.0:
            raise ValueError("need 0 <= end_p <= start_p <= 1")
        if self.end_step < 0:
            raise ValueError("end_step must be non-negative")

    @classmethod
    def pinned(cls, p: float) -> "ExplorationSchedule":
        return cls(p, p, 0)


def explore_p(schedule: ExplorationSchedule, step: int) -> float:
    """Probability of the uniform branch at ``step``: linear, then flat at ``end_p``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if schedule.end_step == 0 or step >= schedule.end_step:
        return schedule.end_p
    frac = step / schedule.end_step
    return schedule.start_p + (schedule.end_p - schedule.start_p) * frac


def rand_mask(x: TokenSequence, mask_rate: float, rng: np.random.Generator, bernoulli: bool = False) -> MaskPlan:
    """Uniform masking of ``K = max(1, round(mask_rate * n))`` positions.

    With ``bernoulli=True`` each position is instead kept independently with
    probability ``mask_rate`` (possibly none); only the variance lab uses that.
    """
    n = len(x)
    if n == 0:
        raise ValueError("cannot mask an empty sentence")
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie in (0, 1)")
    if bernoulli:
        positions = np.flatnonzero(rng.random(n) < mask_rate)
    else:
        positions = np.sort(rng.choice(n, size=num_masked(n, mask_rate), replace=False))
    return MaskPlan(positions, np.full(positions.size, 1.0 / n), 1.0, 1.0, UNIFORM)


def corruption_actions(count: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(count)
    return np.where(u < 0.8, ACTION_MASK, np.where(u < 0.9, ACTION_RANDOM, ACTION_KEEP))


def corrupt(
    x: TokenSequence, positions, rng: np.random.Generator, vocab_size: int, return_actions: bool = False
):
    """Apply 80/10/10 corruption at ``positions``; other positions are untouched.

    Random replacements are drawn uniformly from the non-reserved tokens.
    """
    positions = np.asarray(getattr(positions, "positions", positions), dtype=np.int64)
    tokens = x.tokens.copy()
    actions = corruption_actions(positions.size, rng)
    tokens[positions[actions == ACTION_MASK]] = Vocabulary.mask_id
    rand_at = positions[actions == ACTION_RANDOM]
    if rand_at.size:
        tokens[rand_at] = rng.integers(Vocabulary.num_reserved, vocab_size, size=rand_at.size)
    out = x.replace_tokens(tokens)
    return (out, actions) if return_actions else out


def proposal_mask(
    x: TokenSequence,
    probs: np.ndarray,
    mask_rate: float,
    eps: float,
    rng: np.random.Generator,
) -> MaskPlan:
    n = len(x)
    K = num_masked(n, mask_rate)
    positions, raw = sample_positions(probs, K, rng)
    r, r_clip = importance_ratio(raw, n, K, eps)
    return MaskPlan(positions, raw, r, r_clip, PROPOSAL)


def choose_branch(p: float, rng: np.random.Generator) -> str:
    """Uniform branch with probability ``p``; degenerate ``p`` consumes no randomness."""
    if p >= 1.0:
        return UNIFORM
    if p <= 0.0:
        return PROPOSAL
    return UNIFORM if rng.random() < p else PROPOSAL


def mixed_mask(
    x: TokenSequence,
    step: int,
    schedule: ExplorationSchedule,
    mapnet: MapNetParams,
    mask_rate: float,
    eps: float,
    rng: np.random.Generator,
) -> MaskPlan:
    """Per-sentence coin between uniform masking and MAP-Net sampling."""
    if choose_branch(explore_p(schedule, step), rng) == UNIFORM:
        return rand_mask(x, mask_rate, rng)
    return proposal_mask(x, propose(mapnet, x).probs, mask_rate, eps, rng)
