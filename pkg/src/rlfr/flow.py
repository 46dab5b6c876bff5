"""Conditional flow-matching field over standardized policy latents.

The network maps (x_t, t, layer, condition) to a velocity of the latent
dimension. Training follows the usual linear-interpolation recipe: draw a
data latent x1, a Gaussian x0, a uniform t, and regress the velocity onto
x1 - x0. Timesteps stay strictly below 1 during training so the
downstream t/(1-t) debias weight is always finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .arrayio import load_arrays, save_arrays
from .latents import Standardizer

CHECKPOINT_VERSION = 1

# Training timesteps are capped below 1 (the paper's U[0,1] would make the
# debias weight t/(1-t) unbounded at the top end).
T_MAX_TRAIN = 0.99


@dataclass(frozen=True)
class FlowConfig:
    dim: int = 64
    n_blocks: int = 4
    hidden: int | None = None  # defaults to 4 * dim
    time_features: int = 32
    layer_ids: tuple[int, ...] = (1, 2, 3)

    @property
    def width(self) -> int:
        return self.hidden if self.hidden is not None else 4 * self.dim


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.act = nn.SiLU()

    def forward(self, h):
        return h + self.fc2(self.act(self.fc1(self.norm(h))))


def sinusoidal_features(t: torch.Tensor, n_features: int) -> torch.Tensor:
    """Fixed sin/cos features of a timestep in [0, 1)."""
    half = n_features // 2
    freqs = torch.exp(
        torch.linspace(math.log(1.0), math.log(1000.0), half, dtype=t.dtype)
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class FlowField(nn.Module):
    """Velocity network v(x_t, t, layer, cond) -> R^d.

    The condition latent is concatenated to x_t at the input projection
    (zero vector = no condition); timestep and layer-position embeddings
    are added to the projected input.
    """

    def __init__(self, config: FlowConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        d, h = config.dim, config.width
        self.in_proj = nn.Linear(2 * d, h)
        self.time_proj = nn.Linear(config.time_features, h)
        self.layer_embed = nn.Embedding(len(config.layer_ids), h)
        self.blocks = nn.ModuleList(ResidualBlock(h) for _ in range(config.n_blocks))
        self.out_norm = nn.LayerNorm(h)
        self.out_proj = nn.Linear(h, d)
        self._slot = {layer: i for i, layer in enumerate(config.layer_ids)}
        self.reset_parameters(init_seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.ndim >= 2 or "embed" in name:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            # Zero-initialized output keeps early training stable: the field
            # starts as the zero velocity.
            self.out_proj.weight.zero_()
            self.out_proj.bias.zero_()

    def slot_of(self, layer_idx: int) -> int:
        if layer_idx not in self._slot:
            raise ValueError(f"layer {layer_idx} not in flow layer set {self.config.layer_ids}")
        return self._slot[layer_idx]

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        layer_slots: torch.Tensor,
        cond: torch.Tensor,
    ) -> torch.Tensor:
        h = self.in_proj(torch.cat([x_t, cond], dim=-1))
        h = h + self.time_proj(sinusoidal_features(t, self.config.time_features))
        h = h + self.layer_embed(layer_slots)
        for block in self.blocks:
            h = block(h)
        return self.out_proj(self.out_norm(h))

    def zero_(self) -> "FlowField":
        """Set every parameter to zero (degenerate field used in tests)."""
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def interpolate(x0, x1, t):
    """Linear bridge point (1-t) x0 + t x1 for t in [0, 1]."""
    t_arr = np.asarray(t) if not torch.is_tensor(t) else t
    lo = float(t_arr.min()) if hasattr(t_arr, "min") else float(t_arr)
    hi = float(t_arr.max()) if hasattr(t_arr, "max") else float(t_arr)
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"t outside [0, 1]: {t}")
    if torch.is_tensor(x0) and torch.is_tensor(t) and t.ndim == 1:
        t = t[:, None]
    elif isinstance(t_arr, np.ndarray) and t_arr.ndim == 1 and np.ndim(x0) == 2:
        t = t_arr[:, None]
    return (1.0 - t) * x0 + t * x1


@dataclass
class FlowBatch:
    """One training batch: data latents, conditions, layers, times, noise."""

    x1: torch.Tensor
    cond: torch.Tensor
    layer_ids: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor

    def __post_init__(self):
        n = self.x1.shape[0]
        for name in ("cond", "layer_ids", "t", "eps"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} batch size mismatch")
        if n and (float(self.t.min()) < 0.0 or float(self.t.max()) >= 1.0):
            raise ValueError("t must lie in [0, 1); the debias weight needs 1 - t > 0")

    def __len__(self) -> int:
        return int(self.x1.shape[0])


def predict_velocity(
    field: FlowField,
    x_t: torch.Tensor | np.ndarray,
    t: float | torch.Tensor,
    layer_idx: int,
    cond: torch.Tensor | np.ndarray | None = None,
) -> torch.Tensor:
    """Evaluate the velocity net on one point or a batch (no gradients).

    ``cond=None`` means the null condition (zero vector).
    """
    x_t = torch.as_tensor(x_t, dtype=torch.float32)
    single = x_t.ndim == 1
    if single:
        x_t = x_t[None, :]
    n = x_t.shape[0]
    if cond is None:
        cond = torch.zeros_like(x_t)
    else:
        cond = torch.as_tensor(cond, dtype=torch.float32)
        if cond.ndim == 1:
            cond = cond[None, :].expand(n, -1)
    t_vec = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    if t_vec.numel() == 1:
        t_vec = t_vec.expand(n)
    if float(t_vec.min()) < 0.0 or float(t_vec.max()) >= 1.0:
        raise ValueError("t must lie in [0, 1)")
    if not (torch.isfinite(x_t).all() and torch.isfinite(cond).all()):
        raise ValueError("non-finite input to predict_velocity")
    slots = torch.full((n,), field.slot_of(layer_idx), dtype=torch.long)
    with torch.no_grad():
        v = field(x_t, t_vec, slots, cond)
    return v[0] if single else v


def fm_loss(field: FlowField, batch: FlowBatch) -> torch.Tensor:
    """Mean over the batch of ||v(x_t, t) - (x1 - x0)||^2 with x0 = eps."""
    if len(batch) == 0:
        raise ValueError("empty flow batch")
    x_t = interpolate(batch.eps, batch.x1, batch.t)
    slots = torch.tensor(
        [field.slot_of(int(l)) for l in batch.layer_ids], dtype=torch.long
    )
    v = field(x_t, batch.t, slots, batch.cond)
    target = batch.x1 - batch.eps
    return ((v - target) ** 2).sum(dim=-1).mean()


def train_step(
    field: FlowField, batch: FlowBatch, optimizer: torch.optim.Optimizer
) -> tuple[float, bool]:
    """One optimizer step on the flow-matching loss.

    Returns (pre-step loss, stepped). A non-finite gradient skips the step
    and reports stepped=False instead of corrupting the parameters.
    """
    optimizer.zero_grad(set_to_none=True)
    loss = fm_loss(field, batch)
    loss.backward()
    finite = all(
        p.grad is None or bool(torch.isfinite(p.grad).all()) for p in field.parameters()
    )
    if finite:
        optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return loss.detach().item(), finite


class FlowTrainer:
    """Adam wrapper with linear warmup; the single mutation path for the field.

    ``total_steps`` turns on cosine decay from the post-warmup peak to zero,
    used when the training budget is fixed up front (offline start, oracle
    fits); online refresh runs at constant lr.
    """

    def __init__(
        self,
        field: FlowField,
        lr: float = 1e-4,
        warmup_steps: int = 0,
        total_steps: int | None = None,
    ):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.field = field
        self.base_lr = lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.optimizer = torch.optim.Adam(field.parameters(), lr=lr)
        self.steps_taken = 0

    def _lr_scale(self) -> float:
        step = self.steps_taken
        scale = 1.0
        if self.warmup_steps > 0:
            scale = min(1.0, (step + 1) / self.warmup_steps)
        if self.total_steps is not None and step > self.warmup_steps:
            frac = (step - self.warmup_steps) / max(1, self.total_steps - self.warmup_steps)
            scale *= 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))
        return scale

    def step(self, batch: FlowBatch) -> tuple[float, bool]:
        for group in self.optimizer.param_groups:
            group["lr"] = self.base_lr * self._lr_scale()
        loss, stepped = train_step(self.field, batch, self.optimizer)
        self.steps_taken += 1
        return loss, stepped


def save_flow_checkpoint(
    path: str | Path,
    field: FlowField,
    standardizers: dict[int, Standardizer],
    extra_meta: dict | None = None,
) -> None:
    cfg = field.config
    arrays = {
        f"param/{name}": p.detach().cpu().numpy() for name, p in field.named_parameters()
    }
    for layer_idx, stats in standardizers.items():
        arrays[f"standardizer/{layer_idx}/mean"] = stats.mean
        arrays[f"standardizer/{layer_idx}/std"] = stats.std
    meta = {
        "version": CHECKPOINT_VERSION,
        "d": cfg.dim,
        "n_blocks": cfg.n_blocks,
        "h": cfg.width,
        "time_features": cfg.time_features,
        "layer_ids": list(cfg.layer_ids),
        "standardizer_layers": sorted(standardizers),
    }
    if extra_meta:
        meta["extra"] = extra_meta
    save_arrays(path, meta, arrays)


def load_flow_checkpoint(path: str | Path) -> tuple[FlowField, dict[int, Standardizer]]:
    meta, arrays = load_arrays(path)
    cfg = FlowConfig(
        dim=meta["d"],
        n_blocks=meta["n_blocks"],
        hidden=meta["h"],
        time_features=meta["time_features"],
        layer_ids=tuple(meta["layer_ids"]),
    )
    field = FlowField(cfg)
    state = {
        name.removeprefix("param/"): torch.from_numpy(arr)
        for name, arr in arrays.items()
        if name.startswith("param/")
    }
    field.load_state_dict(state, strict=True)
    standardizers = {
        layer_idx: Standardizer(
            mean=arrays[f"standardizer/{layer_idx}/mean"].astype(np.float64),
            std=arrays[f"standardizer/{layer_idx}/std"].astype(np.float64),
        )
        for layer_idx in meta["standardizer_layers"]
    }
    return field, standardizers
