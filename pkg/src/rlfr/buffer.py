"""Online reference machinery: rejection sampling into a FIFO buffer.

Rollouts that pass a quality metric are appended to the buffer; once the
buffer holds strictly more than kappa trajectories, batches are popped in
FIFO order and each batch drives one flow train step. Popped trajectories
are gone for good.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .flow import FlowBatch, FlowTrainer
from .latents import Trajectory

METRICS = ("correctness", "entropy_p50", "correctness_and_entropy")


def rejection_sample(rollouts: Sequence[Trajectory], metric: str) -> list[Trajectory]:
    """Subset of a rollout batch passing the quality metric.

    correctness keeps outcome=1; entropy_p50 keeps mean trajectory entropy
    strictly above the batch's 50th percentile; the composite intersects
    both. An empty acceptance is fine.
    """
    if not rollouts:
        raise ValueError("rejection_sample needs a nonempty rollout batch")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    keep = list(rollouts)
    if metric in ("entropy_p50", "correctness_and_entropy"):
        means = np.array([t.mean_entropy for t in rollouts])
        cutoff = np.percentile(means, 50)
        keep = [t for t, m in zip(rollouts, means) if m > cutoff]
    if metric in ("correctness", "correctness_and_entropy"):
        keep = [t for t in keep if t.outcome == 1]
    return keep


@dataclass
class ReferenceBuffer:
    """FIFO store of metric-filtered trajectories with trigger size kappa."""

    kappa: int = 32
    metric: str = "correctness"
    entries: deque[Trajectory] = field(default_factory=deque)

    def __post_init__(self):
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, accepted: Sequence[Trajectory]) -> None:
        """Append already-filtered trajectories, preserving order."""
        self.entries.extend(accepted)

    def accept_and_push(self, rollouts: Sequence[Trajectory]) -> int:
        accepted = rejection_sample(rollouts, self.metric)
        self.push(accepted)
        return len(accepted)

    def drain_and_update(
        self,
        trainer: FlowTrainer,
        batch_builder: Callable[[list[Trajectory]], FlowBatch],
        flow_batch_size: int,
    ) -> tuple[int, float]:
        """Pop FIFO batches and train the flow while occupancy exceeds kappa.

        The trigger is strict: a buffer at exactly kappa takes zero steps.
        Entries are popped after the train step returns (consumed even if
        the step was skipped for a non-finite gradient); on an exception
        the buffer is left untouched so the caller can retry or abort.
        Returns (number of flow steps, mean pre-step loss or nan).
        """
        if flow_batch_size < 1:
            raise ValueError("flow_batch_size must be >= 1")
        n_steps = 0
        losses = []
        while len(self.entries) > self.kappa:
            take = min(flow_batch_size, len(self.entries))
            batch_trajs = [self.entries[i] for i in range(take)]
            loss, _ = trainer.step(batch_builder(batch_trajs))
            for _ in range(take):
                self.entries.popleft()
            n_steps += 1
            losses.append(loss)
        return n_steps, float(np.mean(losses)) if losses else float("nan")
