"""Synthetic verifiable-reasoning environment and a tiny causal policy.

Tasks are modular-arithmetic chains ("start 3, +4, *2, ... -> ?") over a
fixed 24-token vocabulary. The expert solver emits a scratchpad of
intermediate values followed by the answer, the verifier checks only the
token after the answer marker, and a small causal attention model plays
the policy, exposing hidden states at every (layer, position) so latents
can be tapped below the final layer.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grpo import GroupRollout
from .latents import Trajectory
from .seeding import derive_seed

# --- vocabulary ---------------------------------------------------------

DIGIT_BASE = 0  # ids 0..9 are the digits themselves
PLUS, MINUS, MUL = 10, 11, 12
START, ASK, STEP, ANS, END = 13, 14, 15, 16, 17
BOS, PAD = 18, 19
VOCAB_SIZE = 24  # ids 20..23 reserved

MODULUS = 10

TOKEN_STRS = {i: str(i) for i in range(10)}
TOKEN_STRS.update(
    {PLUS: "+", MINUS: "-", MUL: "*", START: "S", ASK: "?", STEP: "=",
     ANS: ">", END: ".", BOS: "^", PAD: "_"}
)

_OP_FNS = {
    PLUS: lambda a, b: (a + b) % MODULUS,
    MINUS: lambda a, b: (a - b) % MODULUS,
    MUL: lambda a, b: (a * b) % MODULUS,
}

MAX_DIFFICULTY = 8


def decode(tokens: Iterable[int]) -> str:
    return " ".join(TOKEN_STRS.get(t, f"<{t}>") for t in tokens)


# --- tasks --------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    prompt_tokens: tuple[int, ...]
    truth: int
    difficulty: int


def make_task(start: int, ops: Sequence[tuple[int, int]]) -> Task:
    """Build a task from a start digit and (operator token, operand) steps."""
    if not 0 <= start < MODULUS:
        raise ValueError("start digit out of range")
    prompt = [BOS, START, start]
    value = start
    for op, operand in ops:
        if op not in _OP_FNS or not 0 <= operand < MODULUS:
            raise ValueError(f"bad operation ({op}, {operand})")
        prompt.extend([op, operand])
        value = _OP_FNS[op](value, operand)
    prompt.append(ASK)
    return Task(prompt_tokens=tuple(prompt), truth=value, difficulty=len(ops))


def generate_task(seed: int, difficulty: int) -> Task:
    """Deterministic random task: ``difficulty`` chained operations mod 10."""
    if not 1 <= difficulty <= MAX_DIFFICULTY:
        raise ValueError(f"difficulty must lie in [1, {MAX_DIFFICULTY}]")
    rng = random.Random(f"task:{seed}:{difficulty}")
    start = rng.randrange(MODULUS)
    ops = [
        (rng.choice((PLUS, MINUS, MUL)), rng.randrange(MODULUS))
        for _ in range(difficulty)
    ]
    return make_task(start, ops)


def _parse_prompt(task: Task) -> tuple[int, list[tuple[int, int]]]:
    p = task.prompt_tokens
    if len(p) < 4 or p[0] != BOS or p[1] != START or p[-1] != ASK:
        raise ValueError(f"malformed prompt {decode(p)}")
    start = p[2]
    body = p[3:-1]
    if len(body) % 2:
        raise ValueError("malformed prompt body")
    return start, [(body[i], body[i + 1]) for i in range(0, len(body), 2)]


def solve_expert(task: Task) -> tuple[int, ...]:
    """Scripted expert response: one scratchpad step per operation, then the answer."""
    value, ops = _parse_prompt(task)
    out: list[int] = []
    for op, operand in ops:
        value = _OP_FNS[op](value, operand)
        out.extend([STEP, value])
    out.extend([ANS, value, END])
    return tuple(out)


def verify(response: Sequence[int], task: Task) -> int:
    """1 iff the token after the first answer marker equals the truth digit."""
    resp = list(response)
    if ANS not in resp:
        return 0
    idx = resp.index(ANS)
    if idx + 1 >= len(resp):
        return 0
    answer = resp[idx + 1]
    return int(0 <= answer < MODULUS and answer == task.truth)


# --- expert dataset file -------------------------------------------------


def save_expert_dataset(path: str | Path, entries: Iterable[tuple[int, int, Sequence[int]]]) -> None:
    """One JSON record per line: task seed, difficulty, response token ids."""
    with open(path, "w") as f:
        for seed, difficulty, tokens in entries:
            f.write(json.dumps({"seed": seed, "difficulty": difficulty,
                                "tokens": list(map(int, tokens))}) + "\n")


def load_expert_dataset(path: str | Path) -> list[tuple[Task, tuple[int, ...]]]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            task = generate_task(rec["seed"], rec["difficulty"])
            out.append((task, tuple(rec["tokens"])))
    return out


def build_expert_dataset(
    n_tasks: int, difficulties: Sequence[int], seed: int
) -> list[tuple[int, int, tuple[int, ...]]]:
    """(seed, difficulty, expert response) triples over the difficulty mix."""
    rng = random.Random(f"expert-set:{seed}")
    entries = []
    for i in range(n_tasks):
        difficulty = rng.choice(list(difficulties))
        task_seed = derive_seed(seed, "expert-task", i)
        task = generate_task(task_seed, difficulty)
        entries.append((task_seed, difficulty, solve_expert(task)))
    return entries


# --- policy -------------------------------------------------------------


@dataclass(frozen=True)
class PolicyConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    max_len: int = 64


class _LayerCache:
    """Preallocated per-layer key/value store for incremental decoding."""

    def __init__(self, batch: int, n_heads: int, max_len: int, head_dim: int):
        self.k = torch.zeros(batch, n_heads, max_len, head_dim)
        self.v = torch.zeros(batch, n_heads, max_len, head_dim)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x, cache: _LayerCache | None = None, start_pos: int = 0):
        B, L, _ = x.shape
        qkv = self.qkv(x).view(B, L, 3, self.n_heads, self.head_dim)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))  # (B, H, L, hd)
        if cache is not None:
            cache.k[:, :, start_pos : start_pos + L] = k
            cache.v[:, :, start_pos : start_pos + L] = v
            k = cache.k[:, :, : start_pos + L]
            v = cache.v[:, :, : start_pos + L]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if L > 1:
            q_pos = start_pos + torch.arange(L)
            k_pos = torch.arange(k.shape[2])
            att = att.masked_fill(k_pos[None, :] > q_pos[:, None], float("-inf"))
        out = att.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(B, L, -1)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x, cache=None, start_pos: int = 0):
        x = x + self.attn(self.ln1(x), cache, start_pos)
        return x + self.mlp(self.ln2(x))


class TinyPolicy(nn.Module):
    """Small causal LM exposing per-layer hidden states on demand."""

    def __init__(self, config: PolicyConfig = PolicyConfig(), init_seed: int = 0):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_len, config.d_model)
        self.blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size)
        self.reset_parameters(init_seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.ndim >= 2 or "emb" in name:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
                elif name.endswith("weight"):  # layer norms
                    p.fill_(1.0)
                else:
                    p.zero_()

    def make_caches(self, batch: int) -> list[_LayerCache]:
        c = self.config
        return [
            _LayerCache(batch, c.n_heads, c.max_len, c.d_model // c.n_heads)
            for _ in range(c.n_layers)
        ]

    def forward(
        self,
        tokens: torch.Tensor,
        caches: list[_LayerCache] | None = None,
        start_pos: int = 0,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Logits plus the output of every block (the tappable hidden states)."""
        B, L = tokens.shape
        if start_pos + L > self.config.max_len:
            raise ValueError("sequence exceeds max_len")
        pos = torch.arange(start_pos, start_pos + L)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None, :, :]
        hiddens = []
        for i, block in enumerate(self.blocks):
            x = block(x, caches[i] if caches is not None else None, start_pos)
            hiddens.append(x)
        logits = self.lm_head(self.ln_f(x))
        return logits, hiddens

    def respond(
        self, tasks: Sequence[Task], temperature: float, seed: int
    ) -> list[tuple[int, ...]]:
        """Sampled responses only (evaluation path; no latents, no log-probs)."""
        out: list[tuple[int, ...] | None] = [None] * len(tasks)
        for bucket_no, idxs in enumerate(_buckets_by_prompt_len(tasks)):
            prompts = torch.tensor([tasks[i].prompt_tokens for i in idxs], dtype=torch.long)
            gen = torch.Generator().manual_seed(derive_seed(seed, "respond", bucket_no))
            tokens, _, _ = sample_tokens(self, prompts, temperature, gen)
            for row, i in enumerate(idxs):
                out[i] = tokens[row]
        return out  # type: ignore[return-value]


class ExpertPolicy:
    """Scripted stand-in with the evaluation interface of TinyPolicy."""

    def respond(self, tasks, temperature, seed):
        return [solve_expert(t) for t in tasks]


def _buckets_by_prompt_len(tasks: Sequence[Task]) -> list[list[int]]:
    by_len: dict[int, list[int]] = {}
    for i, t in enumerate(tasks):
        by_len.setdefault(len(t.prompt_tokens), []).append(i)
    return [by_len[n] for n in sorted(by_len)]


# --- sampling ------------------------------------------------------------


@torch.no_grad()
def sample_tokens(
    policy: TinyPolicy,
    prompts: torch.Tensor,
    temperature: float,
    gen: torch.Generator,
) -> tuple[list[tuple[int, ...]], np.ndarray, np.ndarray]:
    """Autoregressive sampling for a batch of equal-length prompts.

    Returns per-row response tokens (up to and including END, or truncated
    at max_len), plus (B, K_max) arrays of per-step log-probs and entropies
    of the sampling distribution actually used (temperature 0 = greedy,
    log-prob 0, entropy 0).
    """
    if temperature < 0:
        raise ValueError("temperature must be nonnegative")
    B, P = prompts.shape
    max_new = policy.config.max_len - P
    if max_new <= 0:
        raise ValueError("prompt leaves no room to respond")
    caches = policy.make_caches(B)
    logits, _ = policy(prompts, caches, start_pos=0)
    last = logits[:, -1]
    done = torch.zeros(B, dtype=torch.bool)
    tok_mat = np.full((B, max_new), PAD, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    logps = np.zeros((B, max_new))
    ents = np.zeros((B, max_new))
    for step in range(max_new):
        if temperature == 0.0:
            nxt = last.argmax(dim=-1)
            logp_step = torch.zeros(B)
            ent_step = torch.zeros(B)
        else:
            logp_all = F.log_softmax(last / temperature, dim=-1)
            p_all = logp_all.exp()
            nxt = torch.multinomial(p_all, 1, generator=gen).squeeze(1)
            logp_step = logp_all.gather(1, nxt[:, None]).squeeze(1)
            ent_step = -(p_all * logp_all).sum(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        active = (~done).numpy()
        tok_mat[active, step] = nxt.numpy()[active]
        logps[active, step] = logp_step.numpy()[active]
        ents[active, step] = ent_step.numpy()[active]
        lengths[active] += 1
        done = done | (nxt == END)
        if bool(done.all()) or step == max_new - 1:
            break
        logits, _ = policy(nxt[:, None], caches, start_pos=P + step)
        last = logits[:, -1]
    toks = [tuple(tok_mat[row, : lengths[row]].tolist()) for row in range(B)]
    return toks, logps, ents


@torch.no_grad()
def teacher_forced_latents(
    policy: TinyPolicy, tokens: Sequence[int], layer_ids: Iterable[int]
) -> dict[int, np.ndarray]:
    """Hidden states at every position of a forced sequence, per tapped layer."""
    layer_ids = tuple(layer_ids)
    _check_layers(policy, layer_ids)
    toks = list(tokens)
    if any(not 0 <= t < policy.config.vocab_size for t in toks):
        raise ValueError("unknown token id in sequence")
    if len(toks) > policy.config.max_len:
        raise ValueError("sequence exceeds max_len")
    _, hiddens = policy(torch.tensor([toks], dtype=torch.long))
    return {l: hiddens[l - 1][0].numpy().astype(np.float32) for l in layer_ids}


def _check_layers(policy: TinyPolicy, layer_ids: tuple[int, ...]) -> None:
    for l in layer_ids:
        if not 1 <= l <= policy.config.n_layers - 1:
            raise ValueError(
                f"layer {l} not tappable (valid: 1..{policy.config.n_layers - 1}; "
                "the final layer is excluded)"
            )


@torch.no_grad()
def _batched_latents(
    policy: TinyPolicy,
    prompts: torch.Tensor,
    responses: list[tuple[int, ...]],
    layer_ids: tuple[int, ...],
) -> list[dict[int, np.ndarray]]:
    """Latents of response tokens for same-prompt-length sequences, padded."""
    B, P = prompts.shape
    k_max = max(len(r) for r in responses)
    full = torch.full((B, P + k_max), PAD, dtype=torch.long)
    full[:, :P] = prompts
    for row, resp in enumerate(responses):
        full[row, P : P + len(resp)] = torch.tensor(resp, dtype=torch.long)
    _, hiddens = policy(full)
    out = []
    for row, resp in enumerate(responses):
        k = len(resp)
        out.append(
            {l: hiddens[l - 1][row, P : P + k].numpy().astype(np.float32) for l in layer_ids}
        )
    return out


def rollout_tasks(
    policy: TinyPolicy,
    tasks: Sequence[Task],
    group_size: int,
    temperature: float,
    seed: int,
    layer_ids: Iterable[int] = (),
    seq_id_start: int = 0,
) -> list[GroupRollout]:
    """Group rollouts for a batch of tasks, with latents tapped if requested.

    Sampling is batched over tasks x group within equal-prompt-length
    buckets; a fixed seed reproduces token streams, log-probs, entropies and
    latents bitwise.
    """
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    layer_ids = tuple(sorted(layer_ids))
    if layer_ids:
        _check_layers(policy, layer_ids)
    trajs: dict[int, list[Trajectory]] = {i: [] for i in range(len(tasks))}
    for bucket_no, idxs in enumerate(_buckets_by_prompt_len(tasks)):
        prompts = torch.tensor(
            [tasks[i].prompt_tokens for i in idxs], dtype=torch.long
        ).repeat_interleave(group_size, dim=0)
        gen = torch.Generator().manual_seed(derive_seed(seed, "rollout", bucket_no))
        responses, logps, ents = sample_tokens(policy, prompts, temperature, gen)
        latents = (
            _batched_latents(policy, prompts, responses, layer_ids)
            if layer_ids
            else [{} for _ in responses]
        )
        for row, resp in enumerate(responses):
            task_i = idxs[row // group_size]
            member = row % group_size
            k = len(resp)
            trajs[task_i].append(
                Trajectory(
                    seq_id=seq_id_start + task_i * group_size + member,
                    prompt=tasks[task_i].prompt_tokens,
                    response=resp,
                    logp_old=logps[row, :k].copy(),
                    entropy=ents[row, :k].copy(),
                    latents=latents[row],
                    outcome=verify(resp, tasks[task_i]),
                )
            )
    return [GroupRollout(trajectories=tuple(trajs[i])) for i in range(len(tasks))]


def rollout(
    policy: TinyPolicy,
    task: Task,
    group_size: int,
    temperature: float,
    seed: int,
    layer_ids: Iterable[int] = (),
    seq_id_start: int = 0,
) -> GroupRollout:
    return rollout_tasks(
        policy, [task], group_size, temperature, seed, layer_ids, seq_id_start
    )[0]


# --- scoring and supervised warmstart ------------------------------------


def score_responses(
    policy: TinyPolicy,
    groups: Sequence[GroupRollout],
    temperature: float = 1.0,
) -> list[list[torch.Tensor]]:
    """Per-token log-probs of recorded responses under the current policy.

    Teacher-forced with gradients; mirrors the sampling-time distribution
    (same temperature), so re-scoring right after a rollout reproduces
    ``logp_old``.
    """
    seqs = [(g_i, t_i, traj) for g_i, g in enumerate(groups) for t_i, traj in enumerate(g.trajectories)]
    lens = [len(t.prompt) + len(t.response) for _, _, t in seqs]
    l_max = max(lens)
    batch = torch.full((len(seqs), l_max), PAD, dtype=torch.long)
    for row, (_, _, traj) in enumerate(seqs):
        full = list(traj.prompt) + list(traj.response)
        batch[row, : len(full)] = torch.tensor(full, dtype=torch.long)
    logits, _ = policy(batch)
    if temperature == 0.0:
        raise ValueError("cannot score under greedy decoding")
    logp_all = F.log_softmax(logits / temperature, dim=-1)
    out: list[list[torch.Tensor]] = [[] for _ in groups]
    for row, (g_i, _, traj) in enumerate(seqs):
        p = len(traj.prompt)
        k = len(traj.response)
        targets = batch[row, p : p + k]
        token_logp = logp_all[row, p - 1 : p + k - 1].gather(1, targets[:, None]).squeeze(1)
        out[g_i].append(token_logp)
    return out


def supervised_finetune(
    policy: TinyPolicy,
    dataset: Sequence[tuple[Task, tuple[int, ...]]],
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    cosine_decay: bool = True,
) -> list[float]:
    """Cross-entropy warmstart on expert responses (prompt tokens masked out).

    Cosine decay to zero by default: a constant lr on a net this small
    keeps kicking it out of the solved regime near convergence.
    """
    if not dataset:
        raise ValueError("empty expert dataset")
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    rng = np.random.default_rng(derive_seed(seed, "sft"))
    losses = []
    for step in range(steps):
        if cosine_decay:
            for g in opt.param_groups:
                g["lr"] = lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))
        idxs = rng.integers(0, len(dataset), size=batch_size)
        items = [dataset[i] for i in idxs]
        lens = [len(t.prompt_tokens) + len(r) for t, r in items]
        l_max = max(lens)
        batch = torch.full((batch_size, l_max), PAD, dtype=torch.long)
        mask = torch.zeros(batch_size, l_max, dtype=torch.bool)
        for row, (task, resp) in enumerate(items):
            full = list(task.prompt_tokens) + list(resp)
            batch[row, : len(full)] = torch.tensor(full, dtype=torch.long)
            mask[row, len(task.prompt_tokens) : len(full)] = True
        logits, _ = policy(batch)
        # logits at j predict token j+1; align and keep response positions only
        pred = logits[:, :-1].reshape(-1, policy.config.vocab_size)
        tgt = batch[:, 1:].reshape(-1)
        keep = mask[:, 1:].reshape(-1)
        loss = F.cross_entropy(pred[keep], tgt[keep])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.detach().item())
    return losses


def save_policy_checkpoint(path: str | Path, policy: TinyPolicy) -> None:
    from .arrayio import save_arrays

    cfg = policy.config
    arrays = {f"param/{n}": p.detach().numpy() for n, p in policy.named_parameters()}
    save_arrays(
        path,
        {
            "version": 1,
            "n_layers": cfg.n_layers,
            "d_model": cfg.d_model,
            "n_heads": cfg.n_heads,
            "vocab_size": cfg.vocab_size,
            "max_len": cfg.max_len,
        },
        arrays,
    )


def load_policy_checkpoint(path: str | Path) -> TinyPolicy:
    from .arrayio import load_arrays

    meta, arrays = load_arrays(path)
    cfg = PolicyConfig(
        n_layers=meta["n_layers"],
        d_model=meta["d_model"],
        n_heads=meta["n_heads"],
        vocab_size=meta["vocab_size"],
        max_len=meta["max_len"],
    )
    policy = TinyPolicy(cfg)
    state = {
        n.removeprefix("param/"): torch.from_numpy(a)
        for n, a in arrays.items()
        if n.startswith("param/")
    }
    policy.load_state_dict(state, strict=True)
    return policy
