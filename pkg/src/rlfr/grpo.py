"""Group-relative policy optimization pieces.

Outcome rewards are normalized inside each group of rollouts sharing a
prompt; flow rewards extend that per-response advantage to per-token
advantages via discounted suffix sums; the policy is updated with the
PPO-style clipped surrogate (asymmetric clip range).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .latents import Trajectory

ADV_STD_FLOOR = 1e-6


@dataclass(frozen=True)
class ClipRange:
    eps_low: float = 0.2
    eps_high: float = 0.28

    def __post_init__(self):
        if not 0.0 < self.eps_low < 1.0:
            raise ValueError("eps_low must lie in (0, 1)")
        if self.eps_high <= 0.0:
            raise ValueError("eps_high must be positive")


@dataclass(frozen=True)
class GroupRollout:
    """G trajectories sampled for one prompt."""

    trajectories: tuple[Trajectory, ...]

    def __post_init__(self):
        if len(self.trajectories) < 2:
            raise ValueError("a group needs at least 2 trajectories")
        prompts = {t.prompt for t in self.trajectories}
        if len(prompts) != 1:
            raise ValueError("all trajectories in a group must share the prompt")

    @property
    def size(self) -> int:
        return len(self.trajectories)

    @property
    def outcomes(self) -> np.ndarray:
        return np.array([t.outcome for t in self.trajectories], dtype=np.float64)


def group_advantage(outcomes: Sequence[float]) -> np.ndarray:
    """(r_i - mean) / std over the group, population std, floored to zero.

    A degenerate group (all outcomes equal) carries no signal and gets
    all-zero advantages rather than a division blow-up.
    """
    r = np.asarray(outcomes, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group advantage needs G >= 2")
    std = r.std()
    if std < ADV_STD_FLOOR:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def token_advantages(flow_rewards: np.ndarray, gamma: float, outcome_advantage: float) -> np.ndarray:
    """A_k = sum_{s>=k} gamma^(s-k) r_s + A_o (discounted flow return per token)."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    r = np.asarray(flow_rewards, dtype=np.float64)
    returns = np.zeros_like(r)
    acc = 0.0
    for k in range(r.size - 1, -1, -1):
        acc = r[k] + gamma * acc
        returns[k] = acc
    return returns + outcome_advantage


def _sequence_objective(logp_new, logp_old, advantages, clip: ClipRange):
    ratio = torch.exp(logp_new - logp_old)
    clipped = torch.clamp(ratio, 1.0 - clip.eps_low, 1.0 + clip.eps_high)
    return torch.minimum(ratio * advantages, clipped * advantages).mean()


def grpo_objective(logp_new, logp_old, advantages, clip: ClipRange = ClipRange()):
    """Clipped surrogate, averaged per token within a response then per group.

    Accepts one sequence (1-D tensors/arrays) or a group (list of
    sequences). Returns the maximization objective as a torch scalar; the
    trainer negates it for gradient descent. ``logp_old`` and
    ``advantages`` are treated as constants.
    """
    single = not isinstance(logp_new, (list, tuple))
    news = [logp_new] if single else list(logp_new)
    olds = [logp_old] if single else list(logp_old)
    advs = [advantages] if single else list(advantages)
    if not (len(news) == len(olds) == len(advs)):
        raise ValueError("group length mismatch")
    per_seq = []
    for lp_new, lp_old, adv in zip(news, olds, advs):
        lp_new = torch.as_tensor(lp_new, dtype=torch.float64) if not torch.is_tensor(lp_new) else lp_new
        lp_old = torch.as_tensor(np.asarray(lp_old), dtype=lp_new.dtype).detach()
        adv = torch.as_tensor(np.asarray(adv), dtype=lp_new.dtype).detach()
        if lp_new.shape != lp_old.shape or lp_new.shape != adv.shape:
            raise ValueError("per-token arrays must have equal lengths")
        per_seq.append(_sequence_objective(lp_new, lp_old, adv, clip))
    return torch.stack(per_seq).mean()


def policy_entropy(probs) -> float:
    """Shannon entropy -sum p log p of one token distribution."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("negative probability")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()}, expected 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
