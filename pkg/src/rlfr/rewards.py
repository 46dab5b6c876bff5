"""Per-token flow rewards from velocity deviations.

A token's latent is scored by how badly the frozen flow field predicts the
bridge velocity toward it: deviation ||v(x_t, t) - (a_k - eps)||^2 with
x_t the linear interpolation between a Gaussian draw and the latent.
Deviations are averaged over a timestep collection and the tapped layers
with a t/(1-t) debias weight (putting all timesteps on the score scale),
then shaped per sequence: minmax to [-1, 1], a threshold that discards
small fluctuations, and a sign flip so low deviation means positive
reward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .flow import FlowField, interpolate, predict_velocity
from .latents import Standardizer, Trajectory, standardize
from .seeding import derive_seed, philox_normal

CONDITION_MODES = ("post", "previous", "identity")


@dataclass(frozen=True)
class RewardConfig:
    """Knobs for flow-reward computation and shaping.

    beta scales shaped rewards, eta is the fluctuation threshold on the
    minmax-normalized deviation, gamma the discount of flow returns,
    timesteps the collection used for deviation evaluation. beta=0 is
    allowed and collapses the method onto plain outcome advantages.
    """

    beta: float = 0.01
    eta: float = 0.6
    gamma: float = 1.0
    timesteps: tuple[float, ...] = (0.8,)
    debias: bool = True
    noise_seed: int = 0
    n_draws: int = 1
    condition_mode: str = "post"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("eta must lie in [0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.timesteps:
            raise ValueError("timestep collection must be nonempty")
        for t in self.timesteps:
            if not 0.0 < t < 1.0:
                raise ValueError(f"timestep {t} outside (0, 1)")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        if self.condition_mode not in CONDITION_MODES:
            raise ValueError(f"condition_mode must be one of {CONDITION_MODES}")


class NoiseSource:
    """Reproducible standard-normal draws for deviation evaluation.

    Every (sequence, token, timestep, layer, draw) combination owns one
    deterministic eps vector, independent of evaluation order. Draws come
    from a counter-based Philox stream keyed by the run seed with the
    sequence id in the counter, consumed in canonical
    (token, timestep, layer, draw) order; creating a fresh generator per
    combination would give the same guarantee at ~70x the cost.
    """

    def __init__(
        self,
        run_seed: int,
        dim: int,
        timesteps: tuple[float, ...],
        layer_ids: tuple[int, ...],
        n_draws: int = 1,
    ):
        self.key = derive_seed(run_seed, "reward-noise")
        self.dim = dim
        self.timesteps = tuple(sorted(timesteps))
        self.layer_ids = tuple(sorted(layer_ids))
        self.n_draws = n_draws

    def block(self, seq_id: int, n_tokens: int) -> np.ndarray:
        """All eps for one sequence: shape (K, n_t, n_layers, n_draws, d)."""
        shape = (n_tokens, len(self.timesteps), len(self.layer_ids), self.n_draws, self.dim)
        flat = philox_normal(self.key, (seq_id, 0, 0, 0), int(np.prod(shape)))
        return flat.reshape(shape)

    def eps(self, seq_id: int, token_idx: int, t: float, layer_idx: int, draw: int = 0) -> np.ndarray:
        t_idx = self.timesteps.index(t)
        layer_pos = self.layer_ids.index(layer_idx)
        return self.block(seq_id, token_idx + 1)[token_idx, t_idx, layer_pos, draw]


def _as_detached(vec, name: str) -> np.ndarray:
    if torch.is_tensor(vec):
        if vec.requires_grad:
            raise ValueError(f"{name} carries gradients; latents must be detached")
        vec = vec.detach().cpu().numpy()
    arr = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite {name}")
    return arr


def velocity_deviation(
    field: FlowField,
    a_k,
    t: float,
    layer_idx: int,
    cond,
    eps: np.ndarray,
) -> float:
    """||v(x_t, t) - (a_k - eps)||^2 with x_t on the eps -> a_k bridge."""
    if not 0.0 < t < 1.0:
        raise ValueError("t must lie strictly inside (0, 1)")
    a = _as_detached(a_k, "latent")
    e = np.asarray(eps, dtype=np.float64)
    c = None if cond is None else _as_detached(cond, "condition")
    x_t = interpolate(e, a, t)
    v = predict_velocity(field, x_t.astype(np.float32), t, layer_idx, c).numpy()
    target = a - e
    return float(np.sum((v.astype(np.float64) - target) ** 2))


def score_from_velocity(x_t, t: float, v):
    """Score implied by a velocity under the linear schedule.

    s(x_t) = -x_t/(1-t) + (t/(1-t)) v; exact for the linear bridge.
    """
    if not 0.0 < t < 1.0:
        raise ValueError("t must lie strictly inside (0, 1)")
    return -x_t / (1.0 - t) + (t / (1.0 - t)) * v


def debias_weight(t: float, debias: bool) -> float:
    return t / (1.0 - t) if debias else 1.0


def debiased_reward(
    field: FlowField,
    a_k,
    cond,
    layer_set,
    timesteps,
    debias: bool = True,
    *,
    noise: NoiseSource | np.ndarray,
    seq_id: int = 0,
    token_idx: int = 0,
    n_draws: int = 1,
) -> float:
    """Deviation averaged over timesteps and layers with debias weighting.

    ``a_k`` and ``cond`` may be single vectors (reused for every layer) or
    mappings layer_idx -> vector. ``noise`` is either a NoiseSource or a
    fixed eps vector shared by every combination (handy in tests).
    """
    layers = tuple(sorted(layer_set))
    ts = tuple(sorted(timesteps))
    if not layers or not ts:
        raise ValueError("layer_set and timesteps must be nonempty")

    def pick(obj, layer_idx):
        if obj is None:
            return None
        if isinstance(obj, Mapping):
            return obj[layer_idx]
        return obj

    total = 0.0
    for t in ts:
        w = debias_weight(t, debias)
        for layer_idx in layers:
            for draw in range(n_draws):
                if isinstance(noise, NoiseSource):
                    eps = noise.eps(seq_id, token_idx, t, layer_idx, draw)
                else:
                    eps = noise
                dev = velocity_deviation(
                    field, pick(a_k, layer_idx), t, layer_idx, pick(cond, layer_idx), eps
                )
                total += w * dev
    return total / (len(ts) * len(layers) * n_draws)


def conditions_for(latmat: np.ndarray, mode: str) -> np.ndarray:
    """Condition latents per token under the given mode.

    post: successor token's latent (zero for the last token);
    previous: predecessor's latent (zero for the first token);
    identity: the token's own latent.
    """
    if mode == "identity":
        return latmat.copy()
    cond = np.zeros_like(latmat)
    if mode == "post":
        cond[:-1] = latmat[1:]
    elif mode == "previous":
        cond[1:] = latmat[:-1]
    else:
        raise ValueError(f"unknown condition mode {mode}")
    return cond


def _deviation_inputs(
    field: FlowField,
    std_latents: Mapping[int, np.ndarray],
    config: RewardConfig,
    noise: NoiseSource,
    seq_id: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flattened (x_t, t, slots, cond, target) rows for one trajectory."""
    layers = noise.layer_ids
    ts = noise.timesteps
    first = next(iter(std_latents.values()))
    n_tokens, dim = first.shape
    n_t, n_l, n_d = len(ts), len(layers), noise.n_draws

    eps = noise.block(seq_id, n_tokens)  # (K, n_t, n_l, n_d, d)
    x1 = np.empty((n_tokens, n_t, n_l, n_d, dim))
    cond = np.empty_like(x1)
    for li, layer_idx in enumerate(layers):
        lat = np.asarray(std_latents[layer_idx], dtype=np.float64)
        if not np.all(np.isfinite(lat)):
            raise ValueError(f"non-finite latents at layer {layer_idx}")
        cmat = conditions_for(lat, config.condition_mode)
        x1[:, :, li] = lat[:, None, None, :]
        cond[:, :, li] = cmat[:, None, None, :]
    t_grid = np.asarray(ts)[None, :, None, None].repeat(n_tokens, 0).repeat(n_l, 2).repeat(n_d, 3)
    x_t = (1.0 - t_grid[..., None]) * eps + t_grid[..., None] * x1
    slots = np.array([field.slot_of(l) for l in layers])[None, None, :, None]
    slots = np.broadcast_to(slots, (n_tokens, n_t, n_l, n_d))
    target = x1 - eps
    return (
        x_t.reshape(-1, dim),
        t_grid.reshape(-1),
        slots.reshape(-1),
        cond.reshape(-1, dim),
        target.reshape(-1, dim),
    )


def _fold_deviations(
    sq_err: np.ndarray, n_tokens: int, config: RewardConfig, noise: NoiseSource
) -> np.ndarray:
    dev = sq_err.reshape(n_tokens, len(noise.timesteps), len(noise.layer_ids), noise.n_draws)
    weights = np.array([debias_weight(t, config.debias) for t in noise.timesteps])
    return (dev * weights[None, :, None, None]).mean(axis=(1, 2, 3))


def trajectory_deviations(
    field: FlowField,
    std_latents: Mapping[int, np.ndarray],
    config: RewardConfig,
    noise: NoiseSource,
    seq_id: int,
) -> np.ndarray:
    """Debiased deviation per token, batched over (token, t, layer, draw).

    ``std_latents`` maps layer_idx -> standardized (K, d) latents. Matches
    looped ``debiased_reward`` calls exactly; this path just evaluates the
    flow once on the flattened combination batch.
    """
    first = next(iter(std_latents.values()))
    n_tokens, dim = first.shape
    if n_tokens == 0:
        return np.zeros(0)
    x_t, t_flat, slots, cond, target = _deviation_inputs(
        field, std_latents, config, noise, seq_id
    )
    with torch.no_grad():
        v = field(
            torch.as_tensor(x_t, dtype=torch.float32),
            torch.as_tensor(t_flat, dtype=torch.float32),
            torch.as_tensor(slots, dtype=torch.long),
            torch.as_tensor(cond, dtype=torch.float32),
        ).numpy().astype(np.float64)
    sq_err = ((v - target) ** 2).sum(axis=1)
    return _fold_deviations(sq_err, n_tokens, config, noise)


def shape_token_rewards(devs: np.ndarray, config: RewardConfig) -> np.ndarray:
    """Sequence-level shaping: minmax to [-1, 1], threshold, sign, final zero.

    The final token's reward is zeroed because post-token conditioning has
    no successor latent there; its deviation still participates in the
    minmax so the other tokens are normalized consistently.
    """
    devs = np.asarray(devs, dtype=np.float64)
    if devs.ndim != 1 or devs.size == 0:
        raise ValueError("devs must be a nonempty 1-D array")
    if not np.all(np.isfinite(devs)):
        raise ValueError("non-finite deviations")
    lo, hi = devs.min(), devs.max()
    if hi == lo:
        normalized = np.zeros_like(devs)
    else:
        normalized = 2.0 * (devs - lo) / (hi - lo) - 1.0
    rewards = -config.beta * normalized * (np.abs(normalized) > config.eta)
    rewards[-1] = 0.0
    return rewards


def flow_rewards_for_trajectory(
    field: FlowField,
    standardizers: Mapping[int, Standardizer],
    traj: Trajectory,
    config: RewardConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw debiased deviations and shaped rewards for one trajectory."""
    layers = tuple(sorted(traj.latents))
    noise = NoiseSource(
        config.noise_seed, field.config.dim, config.timesteps, layers, config.n_draws
    )
    std_latents = {
        layer_idx: standardize(np.asarray(traj.latents[layer_idx], dtype=np.float64), standardizers[layer_idx])
        for layer_idx in layers
    }
    devs = trajectory_deviations(field, std_latents, config, noise, traj.seq_id)
    return devs, shape_token_rewards(devs, config)


def flow_rewards_for_trajectories(
    field: FlowField,
    standardizers: Mapping[int, Standardizer],
    trajs: list[Trajectory],
    config: RewardConfig,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-trajectory (deviations, shaped rewards) in one flow evaluation.

    Numerically equivalent to mapping ``flow_rewards_for_trajectory``; the
    eps draws, deviations and shaping are identical, only the forward pass
    is shared across trajectories.
    """
    if not trajs:
        return []
    layers = tuple(sorted(trajs[0].latents))
    noise = NoiseSource(
        config.noise_seed, field.config.dim, config.timesteps, layers, config.n_draws
    )
    rows_per, xts, ts_flat, slots, conds, targets = [], [], [], [], [], []
    for traj in trajs:
        if tuple(sorted(traj.latents)) != layers:
            raise ValueError("trajectories must share the tapped layer set")
        std_latents = {
            l: standardize(np.asarray(traj.latents[l], dtype=np.float64), standardizers[l])
            for l in layers
        }
        x_t, t_flat, slot, cond, target = _deviation_inputs(
            field, std_latents, config, noise, traj.seq_id
        )
        rows_per.append(len(traj.response))
        xts.append(x_t)
        ts_flat.append(t_flat)
        slots.append(slot)
        conds.append(cond)
        targets.append(target)
    with torch.no_grad():
        v = field(
            torch.as_tensor(np.concatenate(xts), dtype=torch.float32),
            torch.as_tensor(np.concatenate(ts_flat), dtype=torch.float32),
            torch.as_tensor(np.concatenate(slots), dtype=torch.long),
            torch.as_tensor(np.concatenate(conds), dtype=torch.float32),
        ).numpy().astype(np.float64)
    sq_err = ((v - np.concatenate(targets)) ** 2).sum(axis=1)
    out = []
    cursor = 0
    per_token = len(config.timesteps) * len(layers) * config.n_draws
    for traj, n_tokens in zip(trajs, rows_per):
        n_rows = n_tokens * per_token
        devs = _fold_deviations(sq_err[cursor : cursor + n_rows], n_tokens, config, noise)
        cursor += n_rows
        out.append((devs, shape_token_rewards(devs, config)))
    return out
