"""End-to-end orchestration: offline flow start, online RL, eval, probing.

Pipeline per run directory:
  1. ``pretrain_flow``: build the expert dataset, warmstart the policy by
     supervised learning on it, extract teacher-forced latents of response
     tokens, fit per-layer standardizers, train the flow field, write
     ``policy_init.ckpt`` and ``flow_init.ckpt``.
  2. ``train``: per step -- rollouts, group advantages, (rlfr only) flow
     rewards and per-token advantage shaping, one clipped-surrogate policy
     step, rejection sampling into the reference buffer, flow refresh
     while the buffer exceeds kappa, one metrics record.
  3. ``evaluate`` / ``probe``: pass@k measurement and linear separability
     of latents for correct vs incorrect trajectories.

rlvr runs never construct a flow field or buffer; with beta=0 the rlfr
path reproduces rlvr's policy trajectory bitwise.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import policy_env
from .buffer import ReferenceBuffer
from .flow import (
    T_MAX_TRAIN,
    FlowBatch,
    FlowConfig,
    FlowField,
    FlowTrainer,
    load_flow_checkpoint,
    save_flow_checkpoint,
)
from .grpo import ClipRange, GroupRollout, grpo_objective, group_advantage, token_advantages
from .latents import Standardizer, Trajectory, fit_standardizer, standardize, tap_layers
from .policy_env import (
    Task,
    TinyPolicy,
    PolicyConfig,
    build_expert_dataset,
    generate_task,
    load_expert_dataset,
    load_policy_checkpoint,
    rollout_tasks,
    save_expert_dataset,
    save_policy_checkpoint,
    score_responses,
    supervised_finetune,
    verify,
)
from .rewards import RewardConfig, conditions_for, flow_rewards_for_trajectories
from .seeding import derive_seed


class TrainAbortError(RuntimeError):
    """Raised when a non-finite loss shows up; desk runs fail loudly."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    algo: str = "rlfr"
    difficulties: tuple[int, ...] = (1, 2)
    group_size: int = 8
    batch_prompts: int = 32
    policy_lr: float = 1e-4
    flow_lr: float = 1e-4
    total_steps: int = 300
    out_dir: str = "runs/default"
    kappa: int = 32
    metric: str = "correctness"
    percentiles: tuple[float, ...] = (0.25, 0.5, 0.75)
    temperature: float = 1.0
    reward: RewardConfig = field(default_factory=RewardConfig)
    clip: ClipRange = field(default_factory=ClipRange)
    policy_layers: int = 4
    policy_dim: int = 64
    policy_heads: int = 4
    max_len: int = 64
    flow_blocks: int = 4
    flow_hidden: int | None = None
    expert_tasks: int = 3000
    sft_steps: int = 700
    sft_batch: int = 64
    sft_lr: float = 3e-3
    flow_pretrain_steps: int = 800
    flow_batch_tokens: int = 128
    flow_warmup_ratio: float = 0.1
    flow_batch_trajs: int | None = None  # defaults to kappa
    flow_tokens_per_update: int = 128
    offline_start: bool = True
    rejection_sampling: bool = True
    eval_tasks: int = 64
    threads: int = 1
    save_mid_checkpoint: bool = True

    def __post_init__(self):
        if self.algo not in ("rlvr", "rlfr"):
            raise ValueError("algo must be 'rlvr' or 'rlfr'")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @property
    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            n_layers=self.policy_layers,
            d_model=self.policy_dim,
            n_heads=self.policy_heads,
            max_len=self.max_len,
        )

    @property
    def tapped_layers(self) -> tuple[int, ...]:
        return tap_layers(self.policy_layers, self.percentiles)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(
            dim=self.policy_dim,
            n_blocks=self.flow_blocks,
            hidden=self.flow_hidden,
            layer_ids=self.tapped_layers,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["reward"] = dataclasses.asdict(self.reward)
        d["clip"] = dataclasses.asdict(self.clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "reward" in d and isinstance(d["reward"], dict):
            rw = dict(d["reward"])
            if "timesteps" in rw:
                rw["timesteps"] = tuple(rw["timesteps"])
            d["reward"] = RewardConfig(**rw)
        if "clip" in d and isinstance(d["clip"], dict):
            d["clip"] = ClipRange(**d["clip"])
        for key in ("difficulties", "percentiles"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        text = Path(path).read_text()
        data = yaml.safe_load(text)  # YAML is a superset of JSON
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    outcome_mean: float
    eval_pass1: float
    flow_reward_abs_mean: float
    response_len_mean: float
    entropy_mean: float
    flow_loss: float | None
    buffer_size: int
    flow_steps: int
    wall_time: float

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        if d["flow_loss"] is not None and not np.isfinite(d["flow_loss"]):
            d["flow_loss"] = None
        return json.dumps(d)


# --- artifact paths -------------------------------------------------------


def _paths(config: RunConfig) -> dict[str, Path]:
    out = Path(config.out_dir)
    return {
        "out": out,
        "expert": out / "expert.jsonl",
        "policy_init": out / "policy_init.ckpt",
        "flow_init": out / "flow_init.ckpt",
        "policy_mid": out / "policy_mid.ckpt",
        "policy_final": out / "policy_final.ckpt",
        "flow_final": out / "flow_final.ckpt",
        "metrics": out / "metrics.jsonl",
        "summary": out / "summary.json",
    }


def _setup(config: RunConfig) -> dict[str, Path]:
    torch.set_num_threads(max(1, config.threads))
    paths = _paths(config)
    paths["out"].mkdir(parents=True, exist_ok=True)
    return paths


# --- offline start --------------------------------------------------------


def _ensure_expert_dataset(config: RunConfig, paths) -> list[tuple[Task, tuple[int, ...]]]:
    if not paths["expert"].exists():
        entries = build_expert_dataset(config.expert_tasks, config.difficulties, config.seed)
        save_expert_dataset(paths["expert"], entries)
    return load_expert_dataset(paths["expert"])


def _ensure_policy_init(config: RunConfig, paths, dataset) -> TinyPolicy:
    if paths["policy_init"].exists():
        return load_policy_checkpoint(paths["policy_init"])
    policy = TinyPolicy(config.policy_config, init_seed=derive_seed(config.seed, "policy-init"))
    supervised_finetune(
        policy, dataset, config.sft_steps, config.sft_batch, config.sft_lr,
        seed=derive_seed(config.seed, "sft"),
    )
    save_policy_checkpoint(paths["policy_init"], policy)
    return policy


def collect_expert_latents(
    policy: TinyPolicy,
    dataset: Sequence[tuple[Task, tuple[int, ...]]],
    layer_ids: tuple[int, ...],
    chunk: int = 256,
) -> tuple[dict[int, np.ndarray], list[tuple[int, int]]]:
    """Teacher-forced latents of response tokens only, stacked per layer.

    Returns (layer -> (N, d) float32, segments) where segments give each
    sequence's (start, length) inside the stacked arrays -- needed to form
    successor/predecessor conditions without crossing sequence boundaries.
    Prompt positions are sliced away before anything is stacked, so prompt
    latents can never leak into a flow batch.
    """
    by_layer: dict[int, list[np.ndarray]] = {l: [] for l in layer_ids}
    segments: list[tuple[int, int]] = []
    cursor = 0
    order = sorted(range(len(dataset)), key=lambda i: len(dataset[i][0].prompt_tokens))
    for lo in range(0, len(order), chunk):
        idxs = order[lo : lo + chunk]
        # a chunk may mix prompt lengths; split again just in case
        by_plen: dict[int, list[int]] = {}
        for i in idxs:
            by_plen.setdefault(len(dataset[i][0].prompt_tokens), []).append(i)
        for plen, group_idxs in sorted(by_plen.items()):
            prompts = torch.tensor(
                [dataset[i][0].prompt_tokens for i in group_idxs], dtype=torch.long
            )
            responses = [dataset[i][1] for i in group_idxs]
            lat = policy_env._batched_latents(policy, prompts, responses, layer_ids)
            for resp, lat_i in zip(responses, lat):
                k = len(resp)
                assert all(m.shape[0] == k for m in lat_i.values()), "response mask broken"
                for l in layer_ids:
                    by_layer[l].append(lat_i[l])
                segments.append((cursor, k))
                cursor += k
    stacked = {l: np.concatenate(mats, axis=0) for l, mats in by_layer.items()}
    return stacked, segments


def _fit_standardizers(
    stacked: dict[int, np.ndarray], layer_ids: tuple[int, ...]
) -> dict[int, Standardizer]:
    from .latents import LatentRecord

    out = {}
    for l in layer_ids:
        records = (
            LatentRecord(seq_id=0, token_idx=i, layer_idx=l, vec=stacked[l][i])
            for i in range(stacked[l].shape[0])
        )
        out[l] = fit_standardizer(records, l)
    return out


@dataclass
class PretrainResult:
    losses: list[float]
    flow_path: Path
    policy_path: Path
    standardizers: dict[int, Standardizer]


def pretrain_flow(config: RunConfig) -> PretrainResult:
    """Offline start: expert data -> policy warmstart -> flow training."""
    paths = _setup(config)
    dataset = _ensure_expert_dataset(config, paths)
    policy = _ensure_policy_init(config, paths, dataset)
    layers = config.tapped_layers

    stacked, segments = collect_expert_latents(policy, dataset, layers)
    standardizers = _fit_standardizers(stacked, layers)
    std_pool = {l: standardize(stacked[l].astype(np.float64), standardizers[l]) for l in layers}
    cond_pool = {}
    for l in layers:
        cond = np.zeros_like(std_pool[l])
        for start, length in segments:
            cond[start : start + length] = conditions_for(
                std_pool[l][start : start + length], config.reward.condition_mode
            )
        cond_pool[l] = cond

    flow = FlowField(config.flow_config(), init_seed=derive_seed(config.seed, "flow-init"))
    warmup = int(config.flow_warmup_ratio * config.flow_pretrain_steps)
    trainer = FlowTrainer(
        flow, lr=config.flow_lr, warmup_steps=warmup, total_steps=config.flow_pretrain_steps
    )
    n_rows = std_pool[layers[0]].shape[0]
    losses = []
    for step in range(config.flow_pretrain_steps):
        rng = np.random.default_rng(derive_seed(config.seed, "flow-pretrain", step))
        rows = rng.integers(0, n_rows, size=config.flow_batch_tokens)
        layer_choice = rng.integers(0, len(layers), size=config.flow_batch_tokens)
        x1 = np.stack([std_pool[layers[c]][r] for r, c in zip(rows, layer_choice)])
        cond = np.stack([cond_pool[layers[c]][r] for r, c in zip(rows, layer_choice)])
        batch = FlowBatch(
            x1=torch.as_tensor(x1, dtype=torch.float32),
            cond=torch.as_tensor(cond, dtype=torch.float32),
            layer_ids=torch.as_tensor([layers[c] for c in layer_choice], dtype=torch.long),
            t=torch.as_tensor(rng.uniform(0.0, T_MAX_TRAIN, size=config.flow_batch_tokens), dtype=torch.float32),
            eps=torch.as_tensor(rng.standard_normal(x1.shape), dtype=torch.float32),
        )
        loss, _ = trainer.step(batch)
        losses.append(loss)
    save_flow_checkpoint(paths["flow_init"], flow, standardizers, {"seed": config.seed})
    return PretrainResult(losses, paths["flow_init"], paths["policy_init"], standardizers)


# --- online training ------------------------------------------------------


def _make_online_batch_builder(config: RunConfig, standardizers, rng_state: dict):
    layers = config.tapped_layers

    def build(trajs: list[Trajectory]) -> FlowBatch:
        if config.metric == "correctness":
            assert all(t.outcome == 1 for t in trajs), "non-correct trajectory in flow batch"
        rng = np.random.default_rng(derive_seed(config.seed, "flow-online", rng_state["counter"]))
        rng_state["counter"] += 1
        pairs = [(ti, k) for ti, t in enumerate(trajs) for k in range(len(t.response))]
        n = config.flow_tokens_per_update
        pick = rng.integers(0, len(pairs), size=n)
        layer_choice = rng.integers(0, len(layers), size=n)
        x1 = np.empty((n, config.policy_dim))
        cond = np.empty((n, config.policy_dim))
        std_cache: dict[tuple[int, int], np.ndarray] = {}
        for out_i, (pair_i, lc) in enumerate(zip(pick, layer_choice)):
            ti, k = pairs[pair_i]
            layer = layers[lc]
            key = (ti, layer)
            if key not in std_cache:
                std_cache[key] = standardize(
                    np.asarray(trajs[ti].latents[layer], dtype=np.float64), standardizers[layer]
                )
            mat = std_cache[key]
            x1[out_i] = mat[k]
            cmat = conditions_for(mat, config.reward.condition_mode)
            cond[out_i] = cmat[k]
        return FlowBatch(
            x1=torch.as_tensor(x1, dtype=torch.float32),
            cond=torch.as_tensor(cond, dtype=torch.float32),
            layer_ids=torch.as_tensor([layers[c] for c in layer_choice], dtype=torch.long),
            t=torch.as_tensor(rng.uniform(0.0, T_MAX_TRAIN, size=n), dtype=torch.float32),
            eps=torch.as_tensor(rng.standard_normal((n, config.policy_dim)), dtype=torch.float32),
        )

    return build


def _sample_step_tasks(config: RunConfig, step: int) -> list[Task]:
    rng = random.Random(f"tasks:{config.seed}:{step}")
    tasks = []
    for i in range(config.batch_prompts):
        difficulty = rng.choice(list(config.difficulties))
        tasks.append(generate_task(derive_seed(config.seed, "task", step, i), difficulty))
    return tasks


def _eval_probe_tasks(config: RunConfig) -> list[Task]:
    rng = random.Random(f"evalprobe:{config.seed}")
    return [
        generate_task(derive_seed(config.seed, "eval-probe", i), rng.choice(list(config.difficulties)))
        for i in range(config.eval_tasks)
    ]


def _greedy_pass1(policy: TinyPolicy, tasks: Sequence[Task]) -> float:
    responses = policy.respond(tasks, temperature=0.0, seed=0)
    return float(np.mean([verify(r, t) for r, t in zip(responses, tasks)]))


@dataclass
class TrainResult:
    config: RunConfig
    metrics: list[MetricsRecord]
    summary: dict
    phase_log: list[tuple[int, str]]
    paths: dict[str, Path]


def train(config: RunConfig) -> TrainResult:
    """Algorithm-1 online loop (also the plain-RLVR baseline when algo=rlvr)."""
    paths = _setup(config)
    if not paths["policy_init"].exists():
        raise FileNotFoundError(
            f"{paths['policy_init']} missing; run pretrain_flow (or the pretrain-flow "
            "subcommand) for this out_dir first"
        )
    policy = load_policy_checkpoint(paths["policy_init"])

    use_flow = config.algo == "rlfr"
    flow = None
    flow_trainer = None
    buffer = None
    standardizers = None
    builder = None
    if use_flow:
        if config.offline_start:
            if not paths["flow_init"].exists():
                raise FileNotFoundError(
                    f"{paths['flow_init']} missing; run pretrain_flow first or pass "
                    "offline_start=False"
                )
            flow, standardizers = load_flow_checkpoint(paths["flow_init"])
        else:
            # ablation: random flow, but standardization stats still come
            # from the expert latents (plumbing, not flow knowledge)
            dataset = _ensure_expert_dataset(config, paths)
            stacked, _ = collect_expert_latents(policy, dataset, config.tapped_layers)
            standardizers = _fit_standardizers(stacked, config.tapped_layers)
            flow = FlowField(config.flow_config(), init_seed=derive_seed(config.seed, "flow-init"))
        flow_trainer = FlowTrainer(flow, lr=config.flow_lr)
        buffer = ReferenceBuffer(kappa=config.kappa, metric=config.metric)
        builder = _make_online_batch_builder(config, standardizers, {"counter": 0})

    optimizer = torch.optim.Adam(policy.parameters(), lr=config.policy_lr)
    probe_tasks = _eval_probe_tasks(config)
    layers = config.tapped_layers if use_flow else ()
    metrics: list[MetricsRecord] = []
    phase_log: list[tuple[int, str]] = []
    t_start = time.monotonic()

    with open(paths["metrics"], "w") as metrics_file:
        for step in range(config.total_steps):
            tasks = _sample_step_tasks(config, step)
            groups = rollout_tasks(
                policy,
                tasks,
                config.group_size,
                config.temperature,
                seed=derive_seed(config.seed, "rollout-step", step),
                layer_ids=layers,
                seq_id_start=step * config.batch_prompts * config.group_size,
            )
            phase_log.append((step, "rollout"))

            if use_flow:
                flat = [t for g in groups for t in g.trajectories]
                rewards = flow_rewards_for_trajectories(flow, standardizers, flat, config.reward)
                shaped_by_id = {t.seq_id: r_v for t, (_, r_v) in zip(flat, rewards)}
            shaped_groups: list[GroupRollout] = []
            for g in groups:
                adv_o = group_advantage(g.outcomes)
                new_trajs = []
                for traj, a_o in zip(g.trajectories, adv_o):
                    if use_flow:
                        r_v = shaped_by_id[traj.seq_id]
                    else:
                        r_v = np.zeros(len(traj.response))
                    adv = token_advantages(r_v, config.reward.gamma, float(a_o))
                    new_trajs.append(replace(traj, flow_rewards=r_v, advantages=adv))
                shaped_groups.append(GroupRollout(trajectories=tuple(new_trajs)))

            all_trajs = [t for g in shaped_groups for t in g.trajectories]
            logp_new = [lp for grp in score_responses(policy, shaped_groups, config.temperature) for lp in grp]
            objective = grpo_objective(
                logp_new,
                [t.logp_old for t in all_trajs],
                [t.advantages for t in all_trajs],
                config.clip,
            )
            loss = -objective
            if not torch.isfinite(loss):
                metrics_file.write(json.dumps({"step": step, "abort": "non-finite policy loss"}) + "\n")
                raise TrainAbortError(f"non-finite policy loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            phase_log.append((step, "policy_update"))

            flow_loss: float | None = None
            n_flow_steps = 0
            if use_flow and config.rejection_sampling:
                buffer.accept_and_push(all_trajs)
                phase_log.append((step, "buffer_push"))
                n_flow_steps, drained_loss = buffer.drain_and_update(
                    flow_trainer, builder, config.flow_batch_trajs or config.kappa
                )
                if n_flow_steps:
                    flow_loss = drained_loss
                    phase_log.append((step, "flow_drain"))

            eval_pass1 = _greedy_pass1(policy, probe_tasks)
            n_tok = sum(len(t.response) for t in all_trajs)
            record = MetricsRecord(
                step=step,
                outcome_mean=float(np.mean([t.outcome for t in all_trajs])),
                eval_pass1=eval_pass1,
                flow_reward_abs_mean=float(
                    sum(np.abs(t.flow_rewards).sum() for t in all_trajs) / n_tok
                ),
                response_len_mean=float(np.mean([len(t.response) for t in all_trajs])),
                entropy_mean=float(sum(t.entropy.sum() for t in all_trajs) / n_tok),
                flow_loss=flow_loss,
                buffer_size=len(buffer) if buffer is not None else 0,
                flow_steps=n_flow_steps,
                wall_time=time.monotonic() - t_start,
            )
            if not all(
                np.isfinite(v)
                for v in (record.outcome_mean, record.entropy_mean, record.response_len_mean)
            ):
                metrics_file.write(json.dumps({"step": step, "abort": "non-finite metrics"}) + "\n")
                raise TrainAbortError(f"non-finite metrics at step {step}")
            metrics.append(record)
            metrics_file.write(record.to_json() + "\n")
            metrics_file.flush()

            if config.save_mid_checkpoint and step == config.total_steps // 2:
                save_policy_checkpoint(paths["policy_mid"], policy)

    save_policy_checkpoint(paths["policy_final"], policy)
    if use_flow:
        save_flow_checkpoint(paths["flow_final"], flow, standardizers, {"seed": config.seed})
    final = evaluate(
        policy,
        n_tasks=128,
        k=1,
        temperature=0.0,
        seed=derive_seed(config.seed, "final-eval"),
        difficulties=config.difficulties,
    )
    summary = {
        "algo": config.algo,
        "seed": config.seed,
        "steps": config.total_steps,
        "final_pass1": final["pass1"],
        "max_eval_pass1": max(m.eval_pass1 for m in metrics),
        "last_eval_pass1": metrics[-1].eval_pass1,
    }
    paths["summary"].write_text(json.dumps(summary, indent=2) + "\n")
    config.save(paths["out"] / "config.json")
    return TrainResult(config, metrics, summary, phase_log, paths)


# --- evaluation -----------------------------------------------------------


def pass_at_k(correct: np.ndarray) -> float:
    """Fraction of tasks with at least one correct among their k samples."""
    correct = np.asarray(correct)
    if correct.ndim != 2:
        raise ValueError("expected (n_tasks, k) outcome matrix")
    return float(correct.any(axis=1).mean())


def evaluate(
    policy,
    n_tasks: int,
    k: int,
    temperature: float,
    seed: int = 0,
    difficulties: Sequence[int] = (1, 2),
) -> dict:
    """pass@1 at temperature 0 plus pass@k at the given temperature."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = random.Random(f"eval:{seed}")
    tasks = [
        generate_task(derive_seed(seed, "eval-task", i), rng.choice(list(difficulties)))
        for i in range(n_tasks)
    ]
    greedy = policy.respond(tasks, temperature=0.0, seed=derive_seed(seed, "eval-greedy"))
    pass1 = float(np.mean([verify(r, t) for r, t in zip(greedy, tasks)]))
    if k == 1 and temperature == 0.0:
        return {"pass1": pass1, "passk": pass1, "k": 1}
    rep_tasks = [t for t in tasks for _ in range(k)]
    samples = policy.respond(rep_tasks, temperature, seed=derive_seed(seed, "eval-samples"))
    correct = np.array(
        [verify(r, t) for r, t in zip(samples, rep_tasks)], dtype=bool
    ).reshape(n_tasks, k)
    return {"pass1": pass1, "passk": pass_at_k(correct), "k": k}


# --- latent separability probe --------------------------------------------


def _auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    from scipy.stats import rankdata

    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _project_2d(features: np.ndarray) -> np.ndarray:
    centered = features - features.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def _lda_scores(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    mu1 = z[labels == 1].mean(axis=0)
    mu0 = z[labels == 0].mean(axis=0)
    cov = np.cov(z.T) + 1e-6 * np.eye(z.shape[1])
    w = np.linalg.solve(cov, mu1 - mu0)
    return z @ w


def probe(
    policy: TinyPolicy,
    layer_ids: tuple[int, ...],
    n_rollouts: int,
    seed: int = 0,
    difficulties: Sequence[int] = (2,),
    temperature: float = 1.0,
    out_csv: str | Path | None = None,
    group_size: int = 4,
) -> list[dict]:
    """Linear separability of head/tail latents for trajectory correctness.

    Token latents of each response half are projected to 2-D and scored by
    a linear discriminant against the trajectory outcome; a trajectory's
    score is the mean over its tokens, and the report row carries the
    AUROC of those scores for correct vs incorrect trajectories. Mixed
    outcomes are required -- an all-correct or all-incorrect batch has no
    contrast to probe.
    """
    n_tasks = max(1, n_rollouts // group_size)
    rng = random.Random(f"probe:{seed}")
    tasks = [
        generate_task(derive_seed(seed, "probe-task", i), rng.choice(list(difficulties)))
        for i in range(n_tasks)
    ]
    groups = rollout_tasks(
        policy, tasks, group_size, temperature,
        seed=derive_seed(seed, "probe-rollout"), layer_ids=layer_ids,
    )
    trajs = [t for g in groups for t in g.trajectories]
    labels = np.array([t.outcome for t in trajs])
    if labels.min() == labels.max():
        raise ValueError("probe needs both correct and incorrect rollouts")

    rows = []
    for layer in layer_ids:
        for half in ("head", "tail"):
            feats, owner = [], []
            for i, t in enumerate(trajs):
                mat = np.asarray(t.latents[layer], dtype=np.float64)
                k = mat.shape[0]
                sel = mat[: (k + 1) // 2] if half == "head" else mat[k // 2 :]
                feats.append(sel)
                owner.extend([i] * sel.shape[0])
            owner = np.array(owner)
            z = _project_2d(np.concatenate(feats))
            token_scores = _lda_scores(z, labels[owner])
            traj_scores = np.array(
                [token_scores[owner == i].mean() for i in range(len(trajs))]
            )
            auroc = _auroc(traj_scores, labels)
            rows.append(
                {"layer": layer, "half": half, "auroc": auroc,
                 "n_pos": int(labels.sum()), "n_neg": int((1 - labels).sum())}
            )
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["layer", "half", "auroc", "n_pos", "n_neg"])
            writer.writeheader()
            writer.writerows(rows)
    return rows
