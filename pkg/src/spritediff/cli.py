"""Command-line entry point.

Subcommands: datagen, train-diffusion, train-preference, finetune-rewards,
simulate, eval, serve, report. Training subcommands take a JSON config
file (strict schema); the store path for serve can also come from the
SPRITEDIFF_STORE environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


def _cmd_datagen(args):
    from . import data
    from .world import AttributeTuple  # noqa: F401  (validates import path)

    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pairs > 0:
        pairs = data.synth_preference_pairs(args.pairs, rng)
        path = data.write_preference_pairs(pairs, out)
        print(f"wrote {args.pairs} preference pairs to {path}")
    if args.dialogues > 0:
        records = data.synth_dialogues(args.dialogues, rng, max_rounds=args.max_rounds)
        path = data.write_dialogues(records, out)
        print(f"wrote {len(records)} dialogue rounds ({args.dialogues} sessions) to {path}")


def _cmd_train_diffusion(args):
    from .configs import DiffusionTrainConfig, load_config
    from .pipeline import run_train_diffusion

    cfg = load_config(args.config, DiffusionTrainConfig)
    ckpt = run_train_diffusion(cfg)
    print(f"checkpoint: {ckpt}")


def _cmd_train_preference(args):
    from .configs import PreferenceTrainConfig, load_config
    from .pipeline import run_train_preference

    cfg = load_config(args.config, PreferenceTrainConfig)
    ckpt = run_train_preference(cfg)
    print(f"checkpoint: {ckpt}")


def _cmd_finetune_rewards(args):
    from .configs import RewardFinetuneConfig, load_config
    from .pipeline import run_finetune_rewards

    cfg = load_config(args.config, RewardFinetuneConfig)
    if args.ablation is not None:
        cfg.ablation = args.ablation
    ckpt = run_finetune_rewards(cfg)
    print(f"checkpoint: {ckpt}")


def _cmd_simulate(args):
    from .pipeline import load_bundle, simulate_sessions

    bundle = load_bundle(args.checkpoint, args.preference)
    out = Path(args.out) if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.unlink(missing_ok=True)
    results = simulate_sessions(bundle, args.sessions, seed=args.seed,
                                max_rounds=args.max_rounds, log_path=out)
    accepted = [r for r in results if r["accepted"]]
    rate = len(accepted) / len(results)
    mean_rounds = (sum(r["rounds"] for r in accepted) / len(accepted)
                   if accepted else float("nan"))
    print(f"sessions={len(results)} accept_rate={rate:.2f} "
          f"mean_rounds_accepted={mean_rounds:.2f}")
    if out:
        print(f"log: {out}")


def _cmd_eval(args):
    from .configs import RewardFinetuneConfig, load_config
    from .pipeline import load_bundle, run_finetune_rewards, simulate_sessions

    cfg = load_config(args.config, RewardFinetuneConfig)
    cfg.ablation = args.ablation
    cfg.checkpoint_name = f"finetuned_{args.ablation}.ckpt"
    ckpt = run_finetune_rewards(cfg)
    bundle = load_bundle(ckpt, cfg.preference_checkpoint)
    log = Path(cfg.out_dir) / f"sessions_{args.ablation}.jsonl"
    log.unlink(missing_ok=True)
    results = simulate_sessions(bundle, args.sessions, seed=args.seed,
                                max_rounds=args.max_rounds, log_path=log)
    metrics = {
        "ablation": args.ablation,
        "sessions": len(results),
        "accept_rate": float(np.mean([r["accepted"] for r in results])),
        "mean_round1_diversity": float(np.mean([r["round1_div"] for r in results])),
        "mean_final_pref_score": float(np.mean([r["final_pref_score"] for r in results])),
        "mean_consecutive_cos": float(np.nanmean([r["mean_consecutive_cos"]
                                                  for r in results])),
    }
    print(json.dumps(metrics, indent=2))


def _cmd_serve(args):
    from .dialogue import GenerationSettings
    from .pipeline import load_bundle
    from .service import SessionService, start_server
    from .store import SessionStore

    store_path = args.store or os.environ.get("SPRITEDIFF_STORE")
    if not store_path:
        sys.exit("--store or SPRITEDIFF_STORE is required")
    host, _, port = args.addr.partition(":")
    bundle = load_bundle(args.checkpoint, args.preference)
    service = SessionService(SessionStore(store_path), bundle.generator(),
                             bundle.preference, seed=args.seed)
    ui_dir = Path(args.ui_dir) if args.ui_dir else None
    running = start_server(service, host or "127.0.0.1", int(port or 8008), ui_dir)
    print(f"serving on {running.address} (store: {store_path})")
    try:
        running.thread.join()
    except KeyboardInterrupt:
        running.stop()


def _cmd_report(args):
    from .plots import write_report

    created = write_report(args.runs, args.out)
    for p in created:
        print(f"wrote {p}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spritediff",
        description="Multi-round feedback-driven sprite diffusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="emit preference-pair and dialogue datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=0)
    p.add_argument("--dialogues", type=int, default=0)
    p.add_argument("--max-rounds", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_datagen)

    for name, fn in [("train-diffusion", _cmd_train_diffusion),
                     ("train-preference", _cmd_train_preference)]:
        p = sub.add_parser(name, help=f"{name} from a JSON config")
        p.add_argument("--config", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("finetune-rewards", help="reward-scheduled LoRA fine-tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--ablation", choices=["none", "div", "cons", "mi"], default=None)
    p.set_defaults(func=_cmd_finetune_rewards)

    p = sub.add_parser("simulate", help="run seeded simulated-user sessions")
    p.add_argument("--sessions", type=int, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preference", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-rounds", type=int, default=12)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("eval", help="fine-tune one reward configuration and measure it")
    p.add_argument("--config", required=True)
    p.add_argument("--ablation", choices=["none", "div", "cons", "mi"], required=True)
    p.add_argument("--sessions", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-rounds", type=int, default=12)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("serve", help="run the session service")
    p.add_argument("--addr", default="127.0.0.1:8008")
    p.add_argument("--store", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preference", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ui-dir", default=None)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("report", help="render figures and a CSV summary from run logs")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
