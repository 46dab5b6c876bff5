"""Latent records, trajectory containers, layer tapping, standardization.

Shared data model for the rest of the pipeline. Latents are hidden states
of the policy tapped at fixed layer percentiles (never the final layer);
they are standardized per layer before entering the flow field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .arrayio import load_arrays, save_arrays

STD_FLOOR = 1e-6

LATENT_FILE_VERSION = 1


@dataclass(frozen=True)
class LatentRecord:
    """One hidden vector: which sequence, which token, which tapped layer."""

    seq_id: int
    token_idx: int
    layer_idx: int
    vec: np.ndarray

    def __post_init__(self):
        if self.token_idx < 0:
            raise ValueError("token_idx must be >= 0")
        if self.layer_idx < 1:
            raise ValueError("layer_idx must be >= 1")


@dataclass(frozen=True)
class Trajectory:
    """One sampled response with everything RL and reward shaping need.

    ``latents`` maps layer_idx -> float32 array of shape (K, d), one row per
    response token; it may be empty when flow rewards are not in play.
    ``flow_rewards`` and ``advantages`` start as zeros and are filled in by
    the trainer via ``dataclasses.replace``.
    """

    seq_id: int
    prompt: tuple[int, ...]
    response: tuple[int, ...]
    logp_old: np.ndarray
    entropy: np.ndarray
    latents: Mapping[int, np.ndarray]
    outcome: int
    flow_rewards: np.ndarray = field(default=None)  # type: ignore[assignment]
    advantages: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        k = len(self.response)
        if self.flow_rewards is None:
            object.__setattr__(self, "flow_rewards", np.zeros(k))
        if self.advantages is None:
            object.__setattr__(self, "advantages", np.zeros(k))
        lengths = {
            "logp_old": len(self.logp_old),
            "entropy": len(self.entropy),
            "flow_rewards": len(self.flow_rewards),
            "advantages": len(self.advantages),
        }
        for name, n in lengths.items():
            if n != k:
                raise ValueError(f"{name} has length {n}, expected {k} (= |response|)")
        if self.outcome not in (0, 1):
            raise ValueError(f"outcome must be 0 or 1, got {self.outcome}")
        for layer_idx, mat in self.latents.items():
            if mat.shape[0] != k:
                raise ValueError(
                    f"latents[{layer_idx}] has {mat.shape[0]} rows, expected {k}"
                )
        if np.any(self.entropy < -1e-9):
            raise ValueError("entropy must be nonnegative")

    def records(self, layer_idx: int) -> Iterator[LatentRecord]:
        mat = self.latents[layer_idx]
        for token_idx in range(mat.shape[0]):
            yield LatentRecord(self.seq_id, token_idx, layer_idx, mat[token_idx])

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropy)) if len(self.entropy) else 0.0


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine normalization, fit once and then frozen."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if np.any(self.std < STD_FLOOR * (1 - 1e-12)):
            raise ValueError(f"std components must be >= {STD_FLOOR}")


def tap_layers(total_layers: int, percentiles: Iterable[float]) -> tuple[int, ...]:
    """Layer indices at the given percentiles, excluding the final layer.

    Rounding is half-up, clamped to [1, total_layers - 1]; duplicates
    collapse. Percentiles at or beyond the endpoints are rejected since the
    final hidden layer is heavily shaped by the output head and carries no
    usable reward signal.
    """
    if total_layers < 2:
        raise ValueError("need at least 2 layers to tap a non-final layer")
    out = set()
    for tau in percentiles:
        if not 0.0 < tau < 1.0:
            raise ValueError(f"percentile {tau} outside (0, 1)")
        idx = math.floor(tau * total_layers + 0.5)
        out.add(min(max(idx, 1), total_layers - 1))
    return tuple(sorted(out))


def fit_standardizer(records: Iterable[LatentRecord], layer_idx: int) -> Standardizer:
    """Population mean/std over all records of one layer, std floored at 1e-6."""
    vecs = [r.vec for r in records if r.layer_idx == layer_idx]
    if len(vecs) < 2:
        raise ValueError(f"need >= 2 records for layer {layer_idx}, got {len(vecs)}")
    mat = np.stack(vecs).astype(np.float64)
    mean = mat.mean(axis=0)
    std = np.maximum(mat.std(axis=0), STD_FLOOR)
    return Standardizer(mean=mean, std=std)


def standardize(vec: np.ndarray, stats: Standardizer) -> np.ndarray:
    if vec.shape[-1] != stats.mean.shape[0]:
        raise ValueError(
            f"dimension mismatch: vec has {vec.shape[-1]}, standardizer {stats.mean.shape[0]}"
        )
    return (vec - stats.mean) / stats.std


def save_latents(
    path: str | Path,
    latents: Mapping[int, Mapping[int, np.ndarray]],
    dim: int,
    layers: Iterable[int],
) -> None:
    """Write a latent export file: one flat array per (seq_id, layer).

    ``latents`` maps seq_id -> {layer_idx -> (K, d) array}. The manifest
    records the format version, latent dimension and tapped layer list so
    externally produced latents can be scored against a flow checkpoint.
    """
    layer_list = sorted(layers)
    arrays = {}
    for seq_id in sorted(latents):
        for layer_idx in sorted(latents[seq_id]):
            mat = np.asarray(latents[seq_id][layer_idx])
            if mat.ndim != 2 or mat.shape[1] != dim:
                raise ValueError(f"latents for seq {seq_id} layer {layer_idx} not (K, {dim})")
            arrays[f"seq{seq_id}/layer{layer_idx}"] = mat
    meta = {"version": LATENT_FILE_VERSION, "d": dim, "layers": layer_list}
    save_arrays(path, meta, arrays)


def load_latents(path: str | Path) -> tuple[dict, dict[int, dict[int, np.ndarray]]]:
    meta, arrays = load_arrays(path)
    out: dict[int, dict[int, np.ndarray]] = {}
    for name, mat in arrays.items():
        seq_part, layer_part = name.split("/")
        seq_id = int(seq_part.removeprefix("seq"))
        layer_idx = int(layer_part.removeprefix("layer"))
        out.setdefault(seq_id, {})[layer_idx] = mat
    return meta, out
