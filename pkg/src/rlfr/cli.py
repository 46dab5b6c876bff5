"""Command-line entry points: pretrain-flow, train, eval, probe."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .policy_env import load_policy_checkpoint
from .rewards import CONDITION_MODES
from .trainer import RunConfig, TrainAbortError, evaluate, pretrain_flow, probe, train


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON/YAML file with RunConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--algo", choices=["rlvr", "rlfr"])
    p.add_argument("--out", dest="out_dir", help="run directory for artifacts")
    p.add_argument("--total-steps", type=int, dest="total_steps")
    p.add_argument("--batch-prompts", type=int, dest="batch_prompts")
    p.add_argument("--threads", type=int)
    # ablation switches
    p.add_argument("--no-offline-start", action="store_true",
                   help="start the flow from random weights instead of the pretrained checkpoint")
    p.add_argument("--no-rejection-sampling", action="store_true",
                   help="freeze the flow online (no buffer pushes or updates)")
    p.add_argument("--no-fluctuation-filter", action="store_true",
                   help="set the reward threshold eta to 0")
    p.add_argument("--debias", dest="debias", action="store_true", default=None)
    p.add_argument("--no-debias", dest="debias", action="store_false")
    p.add_argument("--timesteps", help="comma-separated timestep collection, e.g. 0.2,0.4,0.6,0.8")
    p.add_argument("--condition", choices=list(CONDITION_MODES),
                   help="flow condition mode for velocity prediction")
    p.add_argument("--beta", type=float, help="flow reward coefficient")


def _build_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    updates = {}
    for name in ("seed", "algo", "out_dir", "total_steps", "batch_prompts", "threads"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if args.no_offline_start:
        updates["offline_start"] = False
    if args.no_rejection_sampling:
        updates["rejection_sampling"] = False
    reward_updates = {}
    if args.no_fluctuation_filter:
        reward_updates["eta"] = 0.0
    if args.debias is not None:
        reward_updates["debias"] = args.debias
    if args.timesteps:
        reward_updates["timesteps"] = tuple(float(x) for x in args.timesteps.split(","))
    if args.condition:
        reward_updates["condition_mode"] = args.condition
    if args.beta is not None:
        reward_updates["beta"] = args.beta
    if reward_updates:
        updates["reward"] = dataclasses.replace(config.reward, **reward_updates)
    return dataclasses.replace(config, **updates) if updates else config


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="rlfr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_pre = sub.add_parser("pretrain-flow", help="offline start: warmstart policy, train flow")
    _add_config_args(p_pre)

    p_train = sub.add_parser("train", help="online RL (rlvr baseline or rlfr)")
    _add_config_args(p_train)

    p_eval = sub.add_parser("eval", help="pass@1 / pass@k of a policy checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--n-tasks", type=int, default=128)
    p_eval.add_argument("--k", type=int, default=1)
    p_eval.add_argument("--temperature", type=float, default=0.0)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--difficulties", default="1,2")

    p_probe = sub.add_parser("probe", help="latent separability report for a checkpoint")
    p_probe.add_argument("--checkpoint", required=True)
    p_probe.add_argument("--n-rollouts", type=int, default=512)
    p_probe.add_argument("--seed", type=int, default=0)
    p_probe.add_argument("--difficulties", default="2")
    p_probe.add_argument("--layers", default="1,2,3")
    p_probe.add_argument("--out", dest="out_csv", default="probe.csv")

    args = parser.parse_args(argv)
    try:
        if args.command == "pretrain-flow":
            config = _build_config(args)
            result = pretrain_flow(config)
            print(f"flow checkpoint: {result.flow_path}")
            print(f"policy checkpoint: {result.policy_path}")
            print(f"flow loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
        elif args.command == "train":
            config = _build_config(args)
            result = train(config)
            print(json.dumps(result.summary, indent=2))
        elif args.command == "eval":
            policy = load_policy_checkpoint(args.checkpoint)
            difficulties = tuple(int(x) for x in args.difficulties.split(","))
            report = evaluate(policy, args.n_tasks, args.k, args.temperature,
                              seed=args.seed, difficulties=difficulties)
            print(json.dumps(report, indent=2))
        elif args.command == "probe":
            policy = load_policy_checkpoint(args.checkpoint)
            layers = tuple(int(x) for x in args.layers.split(","))
            difficulties = tuple(int(x) for x in args.difficulties.split(","))
            rows = probe(policy, layers, args.n_rollouts, seed=args.seed,
                         difficulties=difficulties, out_csv=args.out_csv)
            for row in rows:
                print(f"layer {row['layer']:>2} {row['half']:<4} AUROC {row['auroc']:.3f}")
            print(f"report written to {args.out_csv}")
    except TrainAbortError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
