#!/usr/bin/env python3
"""Plot one or more metrics.jsonl streams (post-hoc, no live UI).

Usage: python scripts/plot_metrics.py runs/demo/metrics.jsonl [more.jsonl ...] -o training.png
"""

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

PANELS = [
    ("eval_pass1", "eval pass@1 (greedy)"),
    ("outcome_mean", "mean outcome reward"),
    ("entropy_mean", "mean token entropy"),
    ("response_len_mean", "mean response length"),
    ("flow_reward_abs_mean", "mean |flow reward|"),
    ("flow_loss", "flow loss (drain steps)"),
]


def load_stream(path):
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            if "abort" not in rec:
                records.append(rec)
    return records


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("streams", nargs="+", help="metrics.jsonl files")
    parser.add_argument("-o", "--out", default="training.png")
    args = parser.parse_args()

    fig, axes = plt.subplots(2, 3, figsize=(15, 7))
    for path in args.streams:
        records = load_stream(path)
        steps = [r["step"] for r in records]
        label = Path(path).parent.name or path
        for ax, (key, title) in zip(axes.ravel(), PANELS):
            ys = [r[key] for r in records]
            if all(y is None for y in ys):
                continue
            xs = [s for s, y in zip(steps, ys) if y is not None]
            ax.plot(xs, [y for y in ys if y is not None], label=label, linewidth=1)
            ax.set_title(title)
            ax.set_xlabel("step")
    axes.ravel()[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
