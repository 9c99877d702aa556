"""End-to-end drivers behind the CLI subcommands.

Each driver takes a validated config, runs the corresponding training
or evaluation loop, and leaves a checkpoint plus line-delimited step
logs in the output directory.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import data as datastore
from .autodiff import use_tape
from .checkpoint import load_tensors, save_tensors
from .configs import DiffusionTrainConfig, PreferenceTrainConfig, RewardFinetuneConfig
from .dialogue import DiffusionGenerator, GenerationSettings, run_session
from .diffusion import DenoiserConfig, DenoiserModel, NoiseSchedule
from .lora import AdapterSet
from .preference import PreferenceConfig, PreferenceModel
from .preference import evaluate as pref_evaluate
from .preference import train as pref_train
from .rewards import WeightOverride
from .training import (
    RewardFinetuner,
    TrainItem,
    TrainerConfig,
    multi_round_loss,
    train_autoencoder,
    train_noise_predictor,
)
from .world import AttributeTuple, SimulatedUser, all_renders, SPACE_SIZE


class _StepLog:
    def __init__(self, path: Path):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict):
        self._fh.write(json.dumps(record) + "\n")

    def close(self):
        self._fh.close()


def _all_tuple_items() -> list[TrainItem]:
    renders = all_renders()
    return [TrainItem(prompt=AttributeTuple.from_index(i), target_image=renders[i])
            for i in range(SPACE_SIZE)]


def _dialogue_items(path) -> list[TrainItem]:
    records = datastore.read_dialogues(path)
    return [TrainItem(prompt=r.prompt, target_image=r.image,
                      round_index=r.round_index, prev_image=r.prev_image)
            for r in records]


def run_train_diffusion(cfg: DiffusionTrainConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = _StepLog(out / "train_diffusion_log.jsonl")
    rng = np.random.default_rng(cfg.seed)
    with use_tape():
        model = DenoiserModel(DenoiserConfig(
            latent_channels=cfg.latent_channels, embed_dim=cfg.embed_dim,
            ffn_dim=cfg.ffn_dim, encoder_hidden=cfg.encoder_hidden,
            latent_scale=cfg.latent_scale, seed=cfg.seed))
        schedule = NoiseSchedule(steps=cfg.timesteps, beta_start=cfg.beta_start,
                                 beta_end=cfg.beta_end,
                                 finetune_range=(cfg.finetune_t1, cfg.finetune_t2))
        items = (_dialogue_items(cfg.dialogue_data) if cfg.dialogue_data
                 else _all_tuple_items())
        images = np.stack([it.target_image for it in items])

        train_autoencoder(model, images, cfg.autoencoder_steps,
                          cfg.autoencoder_lr, rng, cfg.batch_size, log)
        train_autoencoder(model, images, cfg.autoencoder_steps_polish,
                          cfg.autoencoder_lr_polish, rng, cfg.batch_size, log)
        train_noise_predictor(model, items, schedule, cfg.noise_steps,
                              cfg.noise_lr, rng, cfg.batch_size, log,
                              randomize_rounds=cfg.randomize_rounds)
        train_noise_predictor(model, items, schedule, cfg.noise_steps_polish,
                              cfg.noise_lr_polish, rng, cfg.batch_size, log,
                              randomize_rounds=cfg.randomize_rounds)

        if cfg.multi_round_aux_steps > 0 and cfg.dialogue_data:
            _run_multi_round_aux(model, schedule, cfg, rng, log)

    table = {**model.state(), **schedule.state()}
    ckpt = out / cfg.checkpoint_name
    save_tensors(ckpt, table)
    log.close()
    return ckpt


def _run_multi_round_aux(model, schedule, cfg, rng, log):
    """Auxiliary one-step reconstruction passes over consecutive-round pairs."""
    from .autodiff import Adam, Tensor, no_grad

    records = datastore.read_dialogues(cfg.dialogue_data)
    by_key = {(r.session, r.round_index): r for r in records}
    pairs = [(r, by_key[(r.session, r.round_index + 1)])
             for r in records if (r.session, r.round_index + 1) in by_key]
    if not pairs:
        return
    opt = Adam(model.eps_parameters(), lr=cfg.noise_lr_polish)
    tape = ad.active_tape()
    for step in range(cfg.multi_round_aux_steps):
        prev, nxt = pairs[int(rng.integers(0, len(pairs)))]
        with no_grad():
            z_prev = model.encode(Tensor(prev.image[None])).detach()
            z_next = model.encode(Tensor(nxt.image[None])).detach()
            psi_prev = model.embed_prompt(prev.prompt, prev.round_index)
            psi_next = model.embed_prompt(nxt.prompt, nxt.round_index)
        tau1 = int(rng.integers(30, 51))
        tau2 = int(rng.integers(15, tau1 - 5))
        loss = multi_round_loss(model, schedule, z_prev, z_next,
                                (psi_prev, psi_next), psi_next, tau1, tau2, rng)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        tape.clear()
        log({"stage": "multi_round_aux", "step": step, "loss": loss.item()})


def run_train_preference(cfg: PreferenceTrainConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    with use_tape():
        model = PreferenceModel(
            PreferenceConfig(num_logits=cfg.num_logits, fusion_dim=cfg.fusion_dim,
                             adapter_rank=cfg.adapter_rank,
                             adapter_scale=cfg.adapter_scale, seed=cfg.seed),
            adapters_enabled=cfg.adapters_enabled)
        if cfg.pairs_data:
            pairs = datastore.read_preference_pairs(cfg.pairs_data)
        else:
            pairs = datastore.synth_preference_pairs(cfg.synth_pairs, rng)
        held = datastore.synth_preference_pairs(cfg.holdout_pairs,
                                                np.random.default_rng(cfg.seed + 1))
        curve = pref_train(model, pairs, cfg.epochs, cfg.lr, cfg.batch_size,
                           seed=cfg.seed + 2, augment_sigma=cfg.augment_sigma)
        curve += pref_train(model, pairs, cfg.epochs_polish, cfg.lr_polish,
                            cfg.batch_size, seed=cfg.seed + 3,
                            augment_sigma=cfg.augment_sigma)
        acc = pref_evaluate(model, held)
    ckpt = out / cfg.checkpoint_name
    save_tensors(ckpt, model.state())
    with open(out / "train_preference_log.jsonl", "w", encoding="utf-8") as fh:
        for i, v in enumerate(curve):
            fh.write(json.dumps({"epoch": i, "loss": v}) + "\n")
        fh.write(json.dumps({"holdout_accuracy": acc}) + "\n")
    return ckpt


@dataclass
class LoadedBundle:
    model: DenoiserModel
    schedule: NoiseSchedule
    adapters: Optional[AdapterSet]
    preference: Optional[PreferenceModel]

    def generator(self, settings: GenerationSettings | None = None) -> DiffusionGenerator:
        return DiffusionGenerator(self.model, self.schedule, self.adapters, settings)


def load_bundle(diffusion_ckpt, preference_ckpt=None,
                with_adapters: bool = True) -> LoadedBundle:
    table = load_tensors(diffusion_ckpt)
    model = DenoiserModel.from_state(table)
    schedule = NoiseSchedule.from_state(table)
    adapters = None
    if with_adapters and any(k.startswith("adapter/") for k in table):
        sites = sorted({k.split("/")[1].split(".")[0] for k in table
                        if k.startswith("adapter/")})
        adapters = AdapterSet()
        d = model.config.embed_dim
        from .lora import LoraAdapter

        for site in sites:
            meta = table[f"adapter/{site}.meta"]
            adapters.add(site, LoraAdapter(d, d, rank=int(meta[0]),
                                           scale=float(meta[1]), lr=float(meta[2])))
        adapters.load_state(table)
    pref = None
    if preference_ckpt is not None:
        pref = PreferenceModel.from_state(load_tensors(preference_ckpt))
    return LoadedBundle(model=model, schedule=schedule, adapters=adapters,
                        preference=pref)


def _round_cohorts(items: list[TrainItem]) -> dict[int, list[TrainItem]]:
    cohorts: dict[int, list[TrainItem]] = {}
    for it in items:
        cohorts.setdefault(it.round_index, []).append(it)
    return cohorts


def run_finetune_rewards(cfg: RewardFinetuneConfig) -> Path:
    """Reward-scheduled fine-tuning over dialogue-round cohorts."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = _StepLog(out / f"finetune_log_{cfg.ablation}.jsonl")
    rng = np.random.default_rng(cfg.seed)
    bundle = load_bundle(cfg.base_checkpoint, cfg.preference_checkpoint,
                         with_adapters=False)
    model, schedule = bundle.model, bundle.schedule
    adapters = model.new_adapters(rank=cfg.adapter_rank, scale=cfg.adapter_scale,
                                  seed=cfg.seed, lr=cfg.adapter_lr)
    trainer_cfg = TrainerConfig(
        learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
        reward_scale=cfg.reward_scale, ppo_clip=cfg.ppo_clip,
        update_mode=cfg.update_mode, adapter_lr=cfg.adapter_lr,
        policy_sigma=cfg.policy_sigma, optimizer=cfg.optimizer, seed=cfg.seed)
    override = WeightOverride.for_ablation(cfg.ablation)

    # synthetic dialogue walks supply round-coherent cohorts: each batch
    # shares a round index and every item knows its previous-round image
    records = datastore.synth_dialogues(max(60, cfg.batch_size * cfg.max_round),
                                        rng, max_rounds=cfg.max_round)
    cohorts: dict[int, list] = {}
    for r in records:
        cohorts.setdefault(r.round_index, []).append(r)
    rounds_avail = sorted(cohorts)
    with use_tape():
        tuner = RewardFinetuner(model, adapters, bundle.preference, schedule,
                                trainer_cfg, override)
        for step in range(cfg.steps):
            round_index = rounds_avail[step % len(rounds_avail)]
            pool = cohorts[round_index]
            idx = rng.integers(0, len(pool), size=cfg.batch_size)
            batch = [TrainItem(prompt=pool[i].prompt,
                               target_image=pool[i].image,
                               round_index=round_index,
                               prev_image=pool[i].prev_image) for i in idx]
            report = tuner.step(batch)
            log(report.as_dict())

    table = {**model.state(), **schedule.state(), **adapters.state()}
    ckpt = out / cfg.checkpoint_name
    save_tensors(ckpt, table)
    log.close()
    return ckpt


def simulate_sessions(bundle: LoadedBundle, n_sessions: int, seed: int,
                      max_rounds: int = 12,
                      log_path: Optional[Path] = None) -> list[dict]:
    """Seeded simulated-user sessions; returns per-session summaries."""
    rng = np.random.default_rng(seed)
    gen = bundle.generator()
    results = []
    for k in range(n_sessions):
        target = AttributeTuple.random(rng)
        initial = AttributeTuple.random(rng)
        user = SimulatedUser(target=target, patience=max_rounds)
        res = run_session(user, initial, max_rounds, gen,
                          session_id=f"sim{k:04d}", seed=int(rng.integers(2**31)),
                          pref_model=bundle.preference, with_alternative=True)
        summary = {
            "session": k,
            "target": target.to_dict(),
            "initial": initial.to_dict(),
            "accepted": res.accepted,
            "rounds": res.rounds_to_accept,
            "rounds_run": len(res.session.rounds),
            "final_pref_score": res.session.rounds[-1].rewards.mi,
            "round1_div": res.session.rounds[0].rewards.div,
            "mean_consecutive_cos": _mean_consecutive_cos(res.session),
        }
        results.append(summary)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(summary) + "\n")
    return results


def _mean_consecutive_cos(session) -> float:
    feats = [r.features for r in session.rounds if r.features.size]
    if len(feats) < 2:
        return float("nan")
    cos = [float(a @ b) for a, b in zip(feats, feats[1:])]
    return float(np.mean(cos))


@dataclass
class VariantMetrics:
    rounds: list[int]          # per session, abandoned = max_rounds + 1
    accept_rate: float
    round1_diversity: float    # Eq-6 score over K round-1 candidates, averaged
    consecutive_cos: float     # mean consecutive-round feature cosine
    final_pref_score: float    # mean preference score of final-round images

    @property
    def mean_rounds(self) -> float:
        return float(np.mean(self.rounds))


def evaluate_variant(bundle: LoadedBundle, reference_model, pref_model,
                     n_sessions: int, seed: int, max_rounds: int = 12,
                     k_round1: int = 6) -> VariantMetrics:
    """Session metrics for one model variant.

    Feature-based metrics use the shared reference model's extractor, so
    comparisons across variants reflect generated content, not drift in
    each variant's own feature map. Session seeds derive only from
    ``seed``, so different variants see identical users and noise streams.
    """
    from .autodiff import Tensor, no_grad
    from .diffusion import extract_features
    from .preference import score as pref_score
    from .rewards import diversity

    gen = bundle.generator()
    rng = np.random.default_rng(seed)

    def ref_features(latent: np.ndarray) -> np.ndarray:
        with no_grad():
            return extract_features(reference_model, Tensor(latent)).data.copy()

    rounds_out: list[int] = []
    div_scores: list[float] = []
    cos_scores: list[float] = []
    pref_scores: list[float] = []
    for k in range(n_sessions):
        target = AttributeTuple.random(rng)
        initial = AttributeTuple.random(rng)
        session_seed = int(rng.integers(2**31))
        user = SimulatedUser(target=target, patience=max_rounds)
        res = run_session(user, initial, max_rounds, gen,
                          session_id=f"eval{k:04d}", seed=session_seed)
        rounds_out.append(res.rounds_to_accept if res.accepted else max_rounds + 1)

        # K independent round-1 candidates for the batch-diversity score
        from .dialogue import DialogueSession

        probe = DialogueSession(session_id="probe", seed=session_seed,
                                initial_prompt=initial)
        latents = [gen.first_round(probe, initial, stream=s)[0]
                   for s in range(k_round1)]
        div_scores.append(float(diversity([ref_features(z) for z in latents]).item()))

        feats = [ref_features(r.latent) for r in res.session.rounds]
        if len(feats) >= 2:
            cos_scores.append(float(np.mean([a @ b for a, b in zip(feats, feats[1:])])))
        if pref_model is not None:
            final = res.session.rounds[-1]
            pref_scores.append(pref_score(pref_model, final.prompt, final.image))

    return VariantMetrics(
        rounds=rounds_out,
        accept_rate=float(np.mean([r <= max_rounds for r in rounds_out])),
        round1_diversity=float(np.mean(div_scores)),
        consecutive_cos=float(np.mean(cos_scores)) if cos_scores else float("nan"),
        final_pref_score=float(np.mean(pref_scores)) if pref_scores else float("nan"),
    )


def sign_test_p_value(a: list[int], b: list[int]) -> float:
    """One-sided paired sign test: P(wins >= observed | fair coin).

    Wins are pairs with a < b; ties are dropped.
    """
    import math

    wins = sum(1 for x, y in zip(a, b) if x < y)
    losses = sum(1 for x, y in zip(a, b) if x > y)
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0**n
