"""Acceptance suite: one test per criterion, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
complete. The end-to-end criterion (8) trains ten 300-step runs and
dominates the runtime; its artifacts are shared with criterion 10.
"""

import dataclasses
import shutil
import time

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

import rlfr.trainer as trainer_mod
from rlfr.buffer import ReferenceBuffer, rejection_sample
from rlfr.flow import FlowBatch, FlowConfig, FlowField, FlowTrainer, predict_velocity
from rlfr.grpo import group_advantage, grpo_objective
from rlfr.latents import Trajectory, tap_layers
from rlfr.oracles import gaussian_loglik, gaussian_score, gaussian_velocity
from rlfr.policy_env import (
    PolicyConfig,
    TinyPolicy,
    build_expert_dataset,
    generate_task,
    supervised_finetune,
)
from rlfr.rewards import (
    NoiseSource,
    RewardConfig,
    score_from_velocity,
    shape_token_rewards,
    trajectory_deviations,
)
from rlfr.seeding import derive_seed
from rlfr.trainer import RunConfig, _auroc, pretrain_flow, probe, train


def report(n, ok, detail):
    print(f"\n[criterion {n:>2}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


class AnalyticGaussianField(FlowField):
    """Closed-form optimal velocity for iid N(0, sigma^2) dims."""

    def __init__(self, config, sigma=1.0):
        super().__init__(config)
        self.sigma = sigma

    def forward(self, x_t, t, layer_slots, cond):
        s2 = self.sigma**2
        coeff = (t * s2 - (1 - t)) / ((1 - t) ** 2 + t**2 * s2)
        return coeff[:, None] * x_t


# --- criterion 1: score-velocity identity ----------------------------------


def test_criterion_1_score_velocity_identity():
    t0 = time.monotonic()
    xs = np.linspace(-3.0, 3.0, 61)
    worst = 0.0
    for sigma in (0.5, 1.0, 2.0):
        for t in np.arange(0.1, 0.95, 0.1):
            got = score_from_velocity(xs, t, gaussian_velocity(xs, t, sigma))
            worst = max(worst, float(np.abs(got - gaussian_score(xs, t, sigma)).max()))
    elapsed = time.monotonic() - t0
    report(1, worst < 1e-10 and elapsed < 1.0,
           f"max abs error {worst:.2e} (< 1e-10), runtime {elapsed:.2f}s (< 1s)")


# --- criterion 2: likelihood anticorrelation --------------------------------


def test_criterion_2_likelihood_anticorrelation():
    t0 = time.monotonic()
    rng = np.random.default_rng(42)
    x = rng.standard_normal(1000)
    out_idx = rng.choice(1000, 100, replace=False)
    x[out_idx] = rng.standard_normal(100) * 5.0  # 10% outliers at 5 sigma
    field = AnalyticGaussianField(FlowConfig(dim=1, n_blocks=1, hidden=4, layer_ids=(1,)))
    ts = tuple(np.arange(0.1, 0.95, 0.1))
    conf = RewardConfig(timesteps=ts, n_draws=128)
    noise = NoiseSource(0, 1, ts, (1,), 128)
    devs = trajectory_deviations(field, {1: x[:, None]}, conf, noise, seq_id=7)
    rho = float(spearmanr(devs, gaussian_loglik(x, 1.0)).statistic)
    elapsed = time.monotonic() - t0
    report(2, rho <= -0.8 and elapsed < 5.0,
           f"spearman {rho:.3f} (<= -0.8), runtime {elapsed:.1f}s (< 5s)")


# --- criterion 3: flow learnability -----------------------------------------


def test_criterion_3_flow_learnability():
    t0 = time.monotonic()
    cfg = FlowConfig(dim=1, n_blocks=4, hidden=64, layer_ids=(1,))
    field = FlowField(cfg, init_seed=0)
    steps = 3000
    trainer = FlowTrainer(field, lr=2e-3, warmup_steps=300, total_steps=steps)
    rng = np.random.default_rng(0)
    batch = 512
    for _ in range(steps):
        x1 = rng.standard_normal((batch, 1))
        trainer.step(FlowBatch(
            x1=torch.as_tensor(x1, dtype=torch.float32),
            cond=torch.zeros(batch, 1),
            layer_ids=torch.ones(batch, dtype=torch.long),
            t=torch.as_tensor(rng.uniform(0, 0.99, batch), dtype=torch.float32),
            eps=torch.as_tensor(rng.standard_normal((batch, 1)), dtype=torch.float32),
        ))
    xs = np.linspace(-3, 3, 25)
    errs = []
    for t in np.arange(0.1, 0.95, 0.1):
        v_hat = predict_velocity(
            field, torch.as_tensor(xs[:, None], dtype=torch.float32), t, 1
        ).numpy().ravel()
        errs.append((v_hat - gaussian_velocity(xs, t, 1.0)) ** 2)
    mse = float(np.mean(errs))
    elapsed = time.monotonic() - t0
    report(3, mse < 0.05 and elapsed < 120.0,
           f"grid MSE vs analytic velocity {mse:.4f} (< 0.05), runtime {elapsed:.0f}s (< 2min)")


# --- criterion 4: debiasing direction ----------------------------------------


def test_criterion_4_debias_direction():
    dim, rank, ambient = 8, 2, 0.35
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.standard_normal((dim, rank)))[0] * 1.6

    def sample_data(n):
        return rng.standard_normal((n, rank)) @ basis.T + ambient * rng.standard_normal((n, dim))

    cfg = FlowConfig(dim=dim, n_blocks=4, hidden=64, layer_ids=(1,))
    field = FlowField(cfg, init_seed=0)
    trainer = FlowTrainer(field, lr=2e-3, warmup_steps=200, total_steps=2000)
    for _ in range(2000):
        x1 = sample_data(256)
        trainer.step(FlowBatch(
            x1=torch.as_tensor(x1, dtype=torch.float32),
            cond=torch.zeros(256, dim),
            layer_ids=torch.ones(256, dtype=torch.long),
            t=torch.as_tensor(rng.uniform(0, 0.99, 256), dtype=torch.float32),
            eps=torch.as_tensor(rng.standard_normal((256, dim)), dtype=torch.float32),
        ))
    n_each = 500
    in_dist = sample_data(n_each)
    sigma = float(np.mean(sample_data(4000).std(axis=0)))
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    shifted = sample_data(n_each) + 3.0 * sigma * direction
    x = np.vstack([in_dist, shifted])
    labels = np.array([0] * n_each + [1] * n_each)

    def auroc_of(ts, debias):
        conf = RewardConfig(timesteps=ts, n_draws=4, debias=debias)
        noise = NoiseSource(1, dim, ts, (1,), 4)
        return _auroc(trajectory_deviations(field, {1: x}, conf, noise, seq_id=0), labels)

    grid = (0.2, 0.4, 0.6, 0.8)
    auc_08, auc_02 = auroc_of((0.8,), True), auroc_of((0.2,), True)
    auc_debias, auc_equal = auroc_of(grid, True), auroc_of(grid, False)
    ok = (auc_08 - auc_02 >= 0.05) and (auc_debias > auc_equal)
    report(4, ok,
           f"AUROC t=0.8 {auc_08:.3f} vs t=0.2 {auc_02:.3f} (margin {auc_08-auc_02:+.3f} >= 0.05); "
           f"debias grid {auc_debias:.3f} > equal grid {auc_equal:.3f}")


# --- criterion 5: GRPO correctness -------------------------------------------


def test_criterion_5_grpo_correctness():
    t0 = time.monotonic()
    adv = group_advantage([1, 0, 0, 0])
    hand = np.array([1.7321, -0.5774, -0.5774, -0.5774])
    adv_ok = np.abs(adv - hand).max() < 1e-4

    rng = np.random.default_rng(5)
    grad_failures = 0
    for _ in range(100):
        n = int(rng.integers(2, 8))
        lp_old = rng.normal(-1.0, 0.5, n)
        lp_new = torch.tensor(lp_old + rng.normal(0, 0.2, n), requires_grad=True)
        advantages = rng.normal(0, 1.0, n)
        (-grpo_objective(lp_new, lp_old, advantages)).backward()
        analytic = lp_new.grad.numpy()
        h = 1e-5
        for i in range(n):
            base = lp_new.detach().numpy()
            plus, minus = base.copy(), base.copy()
            plus[i] += h
            minus[i] -= h
            fd = (
                -grpo_objective(plus, lp_old, advantages).item()
                + grpo_objective(minus, lp_old, advantages).item()
            ) / (2 * h)
            if abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), 1e-8) > 1e-4:
                grad_failures += 1
    elapsed = time.monotonic() - t0
    report(5, adv_ok and grad_failures == 0 and elapsed < 30.0,
           f"hand advantage max err {np.abs(adv-hand).max():.1e} (< 1e-4); "
           f"{grad_failures} gradient mismatches over 100 instances; runtime {elapsed:.0f}s (< 30s)")


# --- criterion 6: beta=0 reduction law ---------------------------------------


def test_criterion_6_beta_zero_reduction(tmp_path_factory):
    out = tmp_path_factory.mktemp("crit6")
    config = RunConfig(
        seed=123, algo="rlvr", out_dir=str(out), total_steps=50,
        batch_prompts=8, group_size=4, expert_tasks=800, sft_steps=300,
        flow_pretrain_steps=300, eval_tasks=16, kappa=16,
        flow_tokens_per_update=64, threads=1,
    )
    pretrain_flow(config)
    rlvr = train(config)
    rlvr_policy = trainer_mod._paths(config)["policy_final"].read_bytes()
    rlfr0 = train(dataclasses.replace(
        config, algo="rlfr", reward=dataclasses.replace(config.reward, beta=0.0)
    ))
    rlfr_policy = trainer_mod._paths(config)["policy_final"].read_bytes()
    policy_ok = rlvr_policy == rlfr_policy
    stream_ok = all(
        (a.outcome_mean, a.eval_pass1, a.response_len_mean, a.entropy_mean)
        == (b.outcome_mean, b.eval_pass1, b.response_len_mean, b.entropy_mean)
        for a, b in zip(rlvr.metrics, rlfr0.metrics)
    )
    report(6, policy_ok and stream_ok,
           f"50-step rlfr(beta=0) vs rlvr: policy bytes equal={policy_ok}, "
           f"policy-side metrics bitwise equal={stream_ok}")


# --- criterion 7: Algorithm 1 semantics --------------------------------------


def _mini_traj(seq_id, outcome=1):
    return Trajectory(
        seq_id=seq_id, prompt=(18, 13, 1, 14), response=(15, 2),
        logp_old=np.zeros(2), entropy=np.zeros(2), latents={}, outcome=outcome,
    )


def test_criterion_7_algorithm1_semantics():
    kappa, b = 6, 3
    calls: list[int] = []

    def make_trainer():
        field = FlowField(FlowConfig(dim=2, n_blocks=1, hidden=8, layer_ids=(1,)))
        return FlowTrainer(field, lr=1e-3)

    def builder(trajs):
        calls.append(len(trajs))
        rng = np.random.default_rng(0)
        return FlowBatch(
            x1=torch.as_tensor(rng.standard_normal((4, 2)), dtype=torch.float32),
            cond=torch.zeros(4, 2), layer_ids=torch.ones(4, dtype=torch.long),
            t=torch.full((4,), 0.5),
            eps=torch.as_tensor(rng.standard_normal((4, 2)), dtype=torch.float32),
        )

    # no update at any occupancy <= kappa
    quiet = True
    for size in range(kappa + 1):
        buf = ReferenceBuffer(kappa=kappa)
        buf.push([_mini_traj(i) for i in range(size)])
        steps, _ = buf.drain_and_update(make_trainer(), builder, b)
        quiet &= steps == 0 and len(buf) == size
    # exact drain arithmetic at kappa + b and kappa + 2b
    buf = ReferenceBuffer(kappa=kappa)
    buf.push([_mini_traj(i) for i in range(kappa + b)])
    one, _ = buf.drain_and_update(make_trainer(), builder, b)
    size_after_one = len(buf)
    buf2 = ReferenceBuffer(kappa=kappa)
    buf2.push([_mini_traj(i) for i in range(kappa + 2 * b)])
    two, _ = buf2.drain_and_update(make_trainer(), builder, b)
    # correctness metric admits only outcome=1
    mixed = [_mini_traj(i, outcome=i % 2) for i in range(40)]
    accepted = rejection_sample(mixed, "correctness")
    correct_only = all(t.outcome == 1 for t in accepted) and len(accepted) == 20
    ok = quiet and one == 1 and size_after_one == kappa and two == 2 and correct_only
    report(7, ok,
           f"no drain at size<=kappa={quiet}; kappa+b -> {one} step (size {size_after_one}); "
           f"kappa+2b -> {two} steps; correctness filter exact={correct_only}")


# --- criterion 8 + 10: end-to-end desk-scale runs ----------------------------


def _run_seed_pair(seed: int, out_dir: str):
    """One seed's pretrain + rlvr + rlfr (worker process, single-threaded)."""
    config = RunConfig(seed=seed, algo="rlvr", out_dir=out_dir,
                       total_steps=300, threads=1)
    pretrain_flow(config)
    rlvr = train(config)
    rlfr = train(dataclasses.replace(config, algo="rlfr"))
    return rlvr, rlfr


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    # two worker processes saturate the desk CPU; each run is
    # single-threaded internally
    import multiprocessing as mp
    from concurrent.futures import ProcessPoolExecutor

    t0 = time.monotonic()
    dirs = [str(tmp_path_factory.mktemp(f"crit8-s{seed}")) for seed in range(5)]
    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=2, mp_context=ctx) as pool:
        pairs = list(pool.map(_run_seed_pair, range(5), dirs))
    results = {"rlvr": [p[0] for p in pairs], "rlfr": [p[1] for p in pairs]}
    return results, time.monotonic() - t0


def test_criterion_8_end_to_end(desk_runs):
    results, elapsed = desk_runs
    rlvr_reached = [max(m.eval_pass1 for m in r.metrics) for r in results["rlvr"]]
    baseline_ok = all(p >= 0.95 for p in rlvr_reached)
    complete_ok = all(len(r.metrics) == 300 for r in results["rlfr"])
    bounded_ok = all(
        m.flow_reward_abs_mean <= r.config.reward.beta + 1e-12
        for r in results["rlfr"] for m in r.metrics
    )
    finite_ok = all(
        np.isfinite([m.outcome_mean, m.eval_pass1, m.response_len_mean, m.entropy_mean]).all()
        for r in results["rlfr"] for m in r.metrics
    )
    med_rlvr = float(np.median([r.summary["final_pass1"] for r in results["rlvr"]]))
    med_rlfr = float(np.median([r.summary["final_pass1"] for r in results["rlfr"]]))
    non_inferior = med_rlfr >= med_rlvr - 0.02
    time_ok = elapsed < 1800
    ok = baseline_ok and complete_ok and bounded_ok and finite_ok and non_inferior and time_ok
    report(8, ok,
           f"rlvr max pass@1 per seed {[f'{p:.2f}' for p in rlvr_reached]} (all >= 0.95); "
           f"rlfr complete={complete_ok} bounded={bounded_ok} finite={finite_ok}; "
           f"median final pass@1 rlfr {med_rlfr:.3f} vs rlvr {med_rlvr:.3f} (>= -0.02); "
           f"runtime {elapsed/60:.1f}min (< 30min)")


# --- criterion 9: probe direction --------------------------------------------


def test_criterion_9_probe_direction():
    # mid-training checkpoint on long chains: grammar learned, arithmetic
    # still mixed (temperature-1 accuracy ~0.35)
    entries = build_expert_dataset(1500, (5,), seed=3)
    dataset = [(generate_task(s, d), tuple(t)) for s, d, t in entries]
    policy = TinyPolicy(PolicyConfig(), init_seed=5)
    supervised_finetune(policy, dataset, steps=640, batch_size=64, lr=3e-3, seed=5)
    layers = tap_layers(4, (0.25, 0.5, 0.75))
    rows = probe(policy, layers, n_rollouts=768, seed=1, difficulties=(5,))
    by = {(r["layer"], r["half"]): r["auroc"] for r in rows}
    margins = {l: by[(l, "tail")] - by[(l, "head")] for l in layers}
    ok = all(m >= 0.0 for m in margins.values())
    detail = "; ".join(
        f"layer {l}: tail {by[(l, 'tail')]:.3f} vs head {by[(l, 'head')]:.3f}" for l in layers
    )
    report(9, ok, f"tail >= head at every tapped layer: {detail}")


# --- criterion 10: shaped-reward laws ----------------------------------------


def test_criterion_10_shaped_reward_laws(desk_runs):
    results, _ = desk_runs
    # across every training run: mean |shaped reward| bounded by beta
    runs_bounded = all(
        m.flow_reward_abs_mean <= r.config.reward.beta + 1e-12
        for algo in results for r in results[algo] for m in r.metrics
    )
    # direct laws over randomized sequences
    rng = np.random.default_rng(0)
    bound_ok = degenerate_ok = sign_ok = True
    for _ in range(500):
        k = int(rng.integers(1, 24))
        conf = RewardConfig(beta=float(rng.uniform(0, 0.5)), eta=float(rng.uniform(0, 0.95)))
        devs = rng.uniform(0, 100, k)
        r = shape_token_rewards(devs, conf)
        bound_ok &= bool(np.all(np.abs(r) <= conf.beta + 1e-15))
        sign_ok &= r[devs.argmin()] >= 0.0
        degenerate = shape_token_rewards(np.full(k, devs[0]), conf)
        degenerate_ok &= bool(np.all(degenerate == 0.0))
    ok = runs_bounded and bound_ok and degenerate_ok and sign_ok
    report(10, ok,
           f"all runs bounded by beta={runs_bounded}; |r|<=beta law={bound_ok}; "
           f"constant-deviation -> zeros={degenerate_ok}; min-deviation never negative={sign_ok}")
