"""Report rendering: matplotlib figures plus delimited summaries.

The report path reads the line-delimited logs that training and
simulation emit and turns them into PNG figures alongside a CSV summary,
so a run directory is inspectable at a glance.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .rewards import schedule


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def plot_weight_schedule(out_path, max_round: int = 30) -> Path:
    """The three reward-weight curves against the dialogue round."""
    ts = np.arange(0, max_round + 1)
    ws = [schedule(int(t)) for t in ts]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ts, [w.div for w in ws], "o-", label="diversity", ms=3)
    ax.plot(ts, [w.cons for w in ws], "s-", label="consistency", ms=3)
    ax.plot(ts, [w.mi for w in ws], "^-", label="preference", ms=3)
    ax.set_xlabel("dialogue round t")
    ax.set_ylabel("weight")
    ax.set_title("Reward weight schedule")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def plot_training_loss(log_path, out_path) -> Path | None:
    records = [r for r in _read_jsonl(log_path) if "loss" in r and "step" in r]
    if not records:
        return None
    stages = sorted({r.get("stage", "train") for r in records})
    fig, ax = plt.subplots(figsize=(6, 4))
    for stage in stages:
        pts = [(r["step"], r["loss"]) for r in records if r.get("stage", "train") == stage]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=stage, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(Path(log_path).stem)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def plot_reward_components(log_path, out_path) -> Path | None:
    records = [r for r in _read_jsonl(log_path) if "rewards" in r]
    if not records:
        return None
    steps = np.arange(len(records))
    fig, axes = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    for key, label in [("div", "diversity"), ("cons", "consistency"),
                       ("mi", "preference"), ("total", "total")]:
        axes[0].plot(steps, [r["rewards"][key] for r in records], label=label, lw=0.8)
    axes[0].set_ylabel("reward")
    axes[0].legend(fontsize=8)
    axes[0].grid(alpha=0.3)
    axes[1].plot(steps, [r["loss_noise"] for r in records], label="noise loss", lw=0.8)
    axes[1].set_yscale("log")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("noise loss")
    axes[1].grid(alpha=0.3)
    fig.suptitle(Path(log_path).stem)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def plot_rounds_histogram(summaries: list[dict], out_path, max_rounds: int = 12) -> Path:
    rounds = [s["rounds"] if s["accepted"] else max_rounds + 1 for s in summaries]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(rounds, bins=np.arange(0.5, max_rounds + 2.5), edgecolor="black")
    ax.set_xlabel("rounds to accept (last bin = abandoned)")
    ax.set_ylabel("sessions")
    ax.set_title("Rounds-to-accept distribution")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def write_report(runs_dir, out_dir) -> list[Path]:
    """Render every known log in a run directory; returns created files."""
    runs_dir, out_dir = Path(runs_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    created = [plot_weight_schedule(out_dir / "weight_schedule.png")]

    for log in sorted(runs_dir.glob("train_*_log.jsonl")):
        p = plot_training_loss(log, out_dir / f"{log.stem}.png")
        if p:
            created.append(p)
    for log in sorted(runs_dir.glob("finetune_log_*.jsonl")):
        p = plot_reward_components(log, out_dir / f"{log.stem}.png")
        if p:
            created.append(p)

    summary_rows = []
    for log in sorted(runs_dir.glob("sessions_*.jsonl")):
        summaries = _read_jsonl(log)
        if not summaries:
            continue
        created.append(plot_rounds_histogram(summaries, out_dir / f"{log.stem}_hist.png"))
        finished = [s["rounds"] for s in summaries if s["accepted"]]
        summary_rows.append({
            "run": log.stem,
            "sessions": len(summaries),
            "accept_rate": np.mean([s["accepted"] for s in summaries]),
            "mean_rounds_accepted": np.mean(finished) if finished else "",
            "mean_round1_diversity": np.mean([s["round1_div"] for s in summaries]),
            "mean_final_pref_score": np.mean([s["final_pref_score"] for s in summaries]),
        })
    if summary_rows:
        csv_path = out_dir / "summary.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(summary_rows[0]))
            writer.writeheader()
            writer.writerows(summary_rows)
        created.append(csv_path)
    return created
