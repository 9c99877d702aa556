"""Training loops: diffusion pretraining, preference training, and the
reward-scheduled fine-tuning step.

The fine-tuning step follows a two-phase structure per batch: a partial
no-gradient denoise from pure noise down to a random timestep in the
configured range, one gradient-tracked step, then (a) an ascent step on
the adapters driven by the weighted reward total and (b) a descent step
on the base denoiser weights driven by the latent reconstruction loss.
The two phases touch disjoint parameter sets, which the tests verify by
checksum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import rewards
from .autodiff import Adam, SGD, Tensor, no_grad
from .checkpoint import digest
from .diffusion import (
    DenoiserModel,
    NoiseSchedule,
    denoise_from,
    denoise_step,
    extract_features,
    forward_diffuse,
    predict_x0,
)
from .lora import AdapterSet
from .preference import PreferenceModel
from .rewards import RewardBreakdown, WeightOverride
from .world import AttributeTuple


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    learning_rate: float = 3e-4
    batch_size: int = 8
    epochs: int = 1
    reward_scale: float = 1.0
    ppo_clip: float = 0.2
    update_mode: str = "ppo-clip"  # or "plain-gradient"
    adapter_lr: float = 3e-4
    policy_sigma: float = 0.1
    optimizer: str = "adam"  # noise-phase optimizer: adam | sgd
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adapter_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (diversity needs pairs)")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not 0.0 < self.ppo_clip < 1.0:
            raise ValueError("ppo clip must lie in (0, 1)")
        if self.update_mode not in ("ppo-clip", "plain-gradient"):
            raise ValueError(f"unknown update mode {self.update_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.policy_sigma <= 0:
            raise ValueError("policy sigma must be positive")


@dataclass(frozen=True)
class TrainItem:
    prompt: AttributeTuple
    target_image: np.ndarray
    round_index: int = 1
    prev_image: Optional[np.ndarray] = None


@dataclass
class StepReport:
    timestep: int
    round_index: int
    loss_noise: float
    loss_reward: float
    breakdown: RewardBreakdown
    grad_norm_adapters: float
    grad_norm_base: float

    def __post_init__(self):
        vals = (self.loss_noise, self.loss_reward, self.grad_norm_adapters,
                self.grad_norm_base, self.breakdown.total)
        if not all(math.isfinite(v) for v in vals):
            raise TrainingError(f"non-finite step report: {vals}")

    def as_dict(self) -> dict:
        return {
            "timestep": self.timestep,
            "round": self.round_index,
            "loss_noise": self.loss_noise,
            "loss_reward": self.loss_reward,
            "grad_norm_adapters": self.grad_norm_adapters,
            "grad_norm_base": self.grad_norm_base,
            "rewards": self.breakdown.as_dict(),
        }


def clipped_surrogate(rho: float, advantage: float, eps: float) -> float:
    """Scalar clipped objective min(rho*A, clip(rho, 1-eps, 1+eps)*A)."""
    return min(rho * advantage, float(np.clip(rho, 1.0 - eps, 1.0 + eps)) * advantage)


def _minimum(a: Tensor, b: Tensor) -> Tensor:
    # min(a, b) = a - relu(a - b); subgradient at the kink follows relu's
    return ad.sub(a, ad.relu(ad.sub(a, b)))


def _clip_tensor(x: Tensor, lo: float, hi: float) -> Tensor:
    return ad.sub(ad.add(ad.relu(ad.sub(x, lo)), lo), ad.relu(ad.sub(x, hi)))


def gaussian_log_prob(action: np.ndarray, mean: Tensor, sigma: float) -> Tensor:
    """Per-sample log-density of a fixed-variance Gaussian policy, (B,)."""
    b = mean.shape[0]
    diff = ad.sub(Tensor(action), mean)
    flat = ad.reshape(ad.mul(diff, diff), (b, int(np.prod(mean.shape[1:]))))
    return ad.mul(ad.sum_(flat, axis=1), -0.5 / (sigma * sigma))


def ppo_update(adapters: AdapterSet, old_log_prob: np.ndarray, new_log_prob: Tensor,
               advantage: np.ndarray, eps: float, lr: Optional[float] = None) -> AdapterSet:
    """Ascent step on the clipped surrogate; only adapter factors move."""
    ratio = ad.exp(ad.sub(new_log_prob, Tensor(old_log_prob)))
    adv = Tensor(advantage)
    surrogate = ad.mean(_minimum(ad.mul(ratio, adv),
                                 ad.mul(_clip_tensor(ratio, 1.0 - eps, 1.0 + eps), adv)))
    if not np.isfinite(ratio.data).all():
        raise TrainingError("non-finite ppo ratio")
    adapters.zero_grads()
    ad.backward(surrogate)
    for _, adapter in adapters:
        if adapter.A._grad is None and adapter.B._grad is None:
            continue  # site not on the surrogate's graph; zero update
        adapter.reward_step(lr)
    return adapters


def noise_loss(x0: Tensor, target_latent: Tensor) -> Tensor:
    """Mean squared latent reconstruction error of the predicted x0."""
    if x0.shape != target_latent.shape:
        raise TrainingError(f"shape mismatch {x0.shape} vs {target_latent.shape}")
    diff = ad.sub(x0, target_latent)
    return ad.mean(ad.mul(diff, diff))


def bce_loss(z_target_next: Tensor, model_output: Tensor) -> Tensor:
    """Residual L2 norm between the next-round target latent and the model
    output (the per-step alignment objective)."""
    if z_target_next.shape != model_output.shape:
        raise TrainingError(
            f"shape mismatch {z_target_next.shape} vs {model_output.shape}")
    diff = ad.sub(z_target_next, model_output)
    return ad.sqrt(ad.sum_(ad.mul(diff, diff)))


def multi_round_loss(model, schedule: NoiseSchedule, z_prev_target: Tensor,
                     z_next_target: Tensor, conditions, psi_pair, tau1: int, tau2: int,
                     rng: np.random.Generator, adapters: Optional[AdapterSet] = None) -> Tensor:
    """One-step reconstruction error at the re-injection boundary.

    The previous round's target latent is noised to tau1, denoised to 0
    under the first condition, re-noised to tau2, and stepped once under
    the second condition; the result is compared (L2 norm) against the
    next round's target latent noised to tau2 - 1. Only the final step
    tracks gradients.
    """
    if z_prev_target.shape != z_next_target.shape:
        raise TrainingError("paired latents must share a shape")
    if not (1 <= tau2 <= tau1 <= schedule.steps):
        raise TrainingError(f"need 1 <= tau2 <= tau1 <= T, got {(tau1, tau2)}")
    c1, c2 = conditions if conditions is not None else (psi_pair, psi_pair)
    with no_grad():
        eps_x = Tensor(rng.standard_normal(z_prev_target.shape))
        z_tau1 = forward_diffuse(z_prev_target, tau1, eps_x, schedule)
        z_mid = denoise_from(model, z_tau1, c1, tau1, 0, schedule, adapters)
        eps_mid = Tensor(rng.standard_normal(z_mid.shape))
        z_xy = forward_diffuse(z_mid, tau2, eps_mid, schedule)
        eps_y = Tensor(rng.standard_normal(z_next_target.shape))
        target = forward_diffuse(z_next_target, tau2 - 1, eps_y, schedule)
    pred = denoise_step(model, z_xy, c2, tau2, schedule, adapters).z_prev
    return bce_loss(target, pred)


def _grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p._grad is not None:
            total += float(np.sum(p._grad * p._grad))
    return math.sqrt(total)


@dataclass
class RewardForward:
    """Everything the two update phases need from one graded forward pass."""

    timestep: int
    eps_hat: Tensor
    x0: Tensor
    z_t: Tensor
    psi: Tensor
    features: Tensor
    target_latent: Tensor
    loss_reward: Tensor
    breakdown: RewardBreakdown
    per_sample_reward: np.ndarray


def reward_forward(model: DenoiserModel, adapters: Optional[AdapterSet],
                   pref_model: PreferenceModel, schedule: NoiseSchedule,
                   batch: Sequence[TrainItem], round_index: int,
                   rng: np.random.Generator, reward_scale: float = 1.0,
                   override: Optional[WeightOverride] = None,
                   prev_features: Optional[np.ndarray] = None,
                   timestep: Optional[int] = None,
                   fixed_z_t: Optional[Tensor] = None) -> RewardForward:
    """Partial no-grad denoise, one graded step, and the reward terms.

    Deterministic given the rng state. ``fixed_z_t`` skips the no-grad
    trajectory so probes can treat the graded step's input as a constant
    (which is how the gradient is defined: only the final step tracks).
    """
    override = override or WeightOverride()
    b = len(batch)
    t1, t2 = schedule.finetune_range
    t = timestep if timestep is not None else int(rng.integers(t1, t2 + 1))
    images = np.stack([item.target_image for item in batch])

    # no-gradient trajectory from pure noise down to t+1
    with no_grad():
        target_latent = model.encode(Tensor(images)).detach()
        if fixed_z_t is None:
            psi_ng = ad.concat([model.embed_prompt(item.prompt, item.round_index)
                                for item in batch], axis=0)
            z = Tensor(rng.standard_normal((b, 4, 4, model.config.latent_channels)))
            fixed_z_t = denoise_from(model, z, psi_ng, schedule.steps, t, schedule,
                                     adapters, stochastic=True, rng=rng)
        # dialogue records carry their own previous-round images; those are
        # the stored features consistency compares against
        if all(item.prev_image is not None for item in batch):
            prev_lat = model.encode(
                Tensor(np.stack([item.prev_image for item in batch]))).detach()
            prev_features = extract_features(model, prev_lat).data.copy()
    z_t = fixed_z_t.detach()

    # gradient-tracked final step
    psi = ad.concat([model.embed_prompt(item.prompt, item.round_index)
                     for item in batch], axis=0)
    eps_hat = model.predict_eps(z_t, psi, t, adapters)
    x0 = predict_x0(z_t, eps_hat, t, schedule)
    feats = extract_features(model, x0)

    # reward terms: batch diversity, consistency against stored features,
    # preference score of the decoded predictions
    r_div_t = rewards.diversity([ad.slice_rows(feats, i, i + 1) for i in range(b)])
    unit = feats.data / np.linalg.norm(feats.data, axis=1, keepdims=True)
    div_per = ((1.0 - unit @ unit.T).sum(axis=1)) / (b - 1)
    if prev_features is not None and len(prev_features) == b:
        prev = Tensor(prev_features)
        cons_per_t = ad.sum_(ad.mul(prev, feats), axis=1)
        r_cons_t = ad.mean(cons_per_t)
        cons_per = cons_per_t.data.copy()
    else:
        r_cons_t = Tensor(0.0)
        cons_per = np.zeros(b)
    decoded = model.decode(x0)
    mi_per_t = pref_model.score_batch([item.prompt for item in batch], decoded)
    r_mi_t = ad.mean(mi_per_t)
    mi_per = mi_per_t.data.copy()

    breakdown = rewards.total(round_index, float(r_div_t.item()),
                              float(r_cons_t.item()), float(r_mi_t.item()), override)
    w = breakdown.weights
    reward_total_t = rewards.total_tensor(round_index, r_div_t, r_cons_t, r_mi_t,
                                          override)
    per_sample = (w.div * div_per + w.cons * cons_per + w.mi * mi_per) * reward_scale
    return RewardForward(
        timestep=t, eps_hat=eps_hat, x0=x0, z_t=z_t, psi=psi, features=feats,
        target_latent=target_latent,
        loss_reward=ad.mul(reward_total_t, reward_scale),
        breakdown=breakdown, per_sample_reward=per_sample)


class RewardFinetuner:
    """Owns one fine-tuning run: adapters via rewards, base via noise loss."""

    def __init__(self, model: DenoiserModel, adapters: AdapterSet,
                 pref_model: PreferenceModel, schedule: NoiseSchedule,
                 config: TrainerConfig, override: Optional[WeightOverride] = None,
                 reward_phase: bool = True, noise_phase: bool = True):
        self.model = model
        self.adapters = adapters
        self.pref_model = pref_model
        self.schedule = schedule
        self.config = config
        self.override = override or WeightOverride()
        self.reward_phase = reward_phase
        self.noise_phase = noise_phase
        self.rng = np.random.default_rng(config.seed)
        params = model.eps_parameters()
        self.noise_opt = (Adam(params, lr=config.learning_rate)
                          if config.optimizer == "adam" else SGD(params, lr=config.learning_rate))
        self.prev_features: Optional[np.ndarray] = None

    def step(self, batch: Sequence[TrainItem]) -> StepReport:
        if not batch:
            raise TrainingError("empty batch")
        rounds = {item.round_index for item in batch}
        if len(rounds) != 1:
            raise TrainingError("batch mixes dialogue rounds; group by round")
        round_index = batch[0].round_index
        tape = ad.active_tape()
        tape.clear()
        try:
            return self._step_inner(batch, round_index)
        except ad.NonFiniteError as exc:
            raise TrainingError(
                f"non-finite value during step (round {round_index}): {exc}") from exc
        finally:
            tape.clear()
            ad.zero_grads(self.model.parameters())
            self.adapters.zero_grads()

    def _step_inner(self, batch: Sequence[TrainItem], round_index: int) -> StepReport:
        cfg, sched, rng = self.config, self.schedule, self.rng
        fwd = reward_forward(self.model, self.adapters, self.pref_model, sched,
                             batch, round_index, rng, cfg.reward_scale,
                             self.override, self.prev_features)
        t = fwd.timestep
        z_t, psi, eps_hat, x0 = fwd.z_t, fwd.psi, fwd.eps_hat, fwd.x0
        loss_reward, breakdown = fwd.loss_reward, fwd.breakdown

        # noise-phase gradients are taken first (before the adapters move)
        # so both phases see gradients at the same forward point
        diff = ad.sub(x0, fwd.target_latent)
        loss_noise = ad.mean(ad.mul(diff, diff))
        base_params = self.model.eps_parameters()
        base_norm = 0.0
        noise_grads = []
        if self.noise_phase:
            ad.zero_grads(self.model.parameters())
            self.adapters.zero_grads()
            ad.backward(loss_noise)
            base_norm = _grad_norm(base_params)
            noise_grads = [None if p._grad is None else p._grad.copy()
                           for p in base_params]

        # -- reward phase: adapters only --------------------------------------
        adapter_norm = 0.0
        if self.reward_phase:
            ad.zero_grads(self.model.parameters())
            self.adapters.zero_grads()
            if cfg.update_mode == "plain-gradient":
                ad.backward(loss_reward)
                adapter_norm = _grad_norm(self.adapters.params())
                for _, adapter in self.adapters:
                    adapter.reward_step(cfg.adapter_lr)
            else:
                per = fwd.per_sample_reward
                std = per.std()
                advantage = ((per - per.mean()) / std if std > 1e-12
                             else np.zeros_like(per))
                # Gaussian policy over the final step's posterior mean
                beta = sched.beta(t)
                ab_t = sched.alpha_bar(t)
                mean_step = ad.mul(
                    ad.sub(z_t, ad.mul(eps_hat, beta / math.sqrt(1.0 - ab_t))),
                    1.0 / math.sqrt(sched.alpha(t)))
                action = (mean_step.data
                          + cfg.policy_sigma * rng.standard_normal(mean_step.shape))
                new_logp = gaussian_log_prob(action, mean_step, cfg.policy_sigma)
                ppo_update(self.adapters, new_logp.data.copy(), new_logp, advantage,
                           cfg.ppo_clip, lr=cfg.adapter_lr)
                adapter_norm = _grad_norm(self.adapters.params())

        # -- noise phase: base weights only ------------------------------------
        if self.noise_phase:
            ad.zero_grads(self.model.parameters())
            self.adapters.zero_grads()
            for p, g in zip(base_params, noise_grads):
                if g is not None:
                    p.accumulate_grad(g)
            self.noise_opt.step()

        self.prev_features = fwd.features.data.copy()
        return StepReport(
            timestep=t,
            round_index=round_index,
            loss_noise=float(loss_noise.item()),
            loss_reward=float(loss_reward.item()),
            breakdown=breakdown,
            grad_norm_adapters=adapter_norm,
            grad_norm_base=base_norm,
        )


def algorithm1_step(batch: Sequence[TrainItem], model: DenoiserModel,
                    adapters: AdapterSet, pref_model: PreferenceModel,
                    schedule: NoiseSchedule, config: TrainerConfig,
                    prev_features: Optional[np.ndarray] = None,
                    override: Optional[WeightOverride] = None) -> StepReport:
    """One-shot wrapper over RewardFinetuner.step for a single batch."""
    tuner = RewardFinetuner(model, adapters, pref_model, schedule, config, override)
    tuner.prev_features = prev_features
    return tuner.step(batch)


# -- drivers -------------------------------------------------------------------


def train_autoencoder(model: DenoiserModel, images: np.ndarray, steps: int,
                      lr: float, rng: np.random.Generator, batch: int = 16,
                      log=None) -> list[float]:
    """Reconstruction pretraining of the image codec."""
    opt = Adam(model.codec_parameters(), lr=lr)
    tape = ad.active_tape()
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(images), size=batch)
        x = Tensor(images[idx])
        recon = model.decode(model.encode(x))
        diff = ad.sub(recon, x)
        loss = ad.mean(ad.mul(diff, diff))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        tape.clear()
        losses.append(loss.item())
        if log is not None:
            log({"stage": "autoencoder", "step": step, "loss": losses[-1]})
    return losses


def train_noise_predictor(model: DenoiserModel, items: Sequence[TrainItem],
                          schedule: NoiseSchedule, steps: int, lr: float,
                          rng: np.random.Generator, batch: int = 16,
                          log=None, randomize_rounds: int = 0) -> list[float]:
    """Standard noise-prediction training of the conditional denoiser.

    ``randomize_rounds`` > 0 draws each sample's round index uniformly from
    [1, randomize_rounds], teaching the conditioning to hold at any round.
    """
    opt = Adam(model.eps_parameters(), lr=lr)
    tape = ad.active_tape()
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(items), size=batch)
        chosen = [items[i] for i in idx]
        with no_grad():
            z0 = model.encode(Tensor(np.stack([c.target_image for c in chosen]))).detach()
        t = int(rng.integers(1, schedule.steps + 1))
        eps = Tensor(rng.standard_normal(z0.shape))
        z_t = forward_diffuse(z0, t, eps, schedule)
        rounds = ([int(rng.integers(1, randomize_rounds + 1)) for _ in chosen]
                  if randomize_rounds > 0 else [c.round_index for c in chosen])
        psi = ad.concat([model.embed_prompt(c.prompt, k)
                         for c, k in zip(chosen, rounds)], axis=0)
        pred = model.predict_eps(z_t, psi, t)
        diff = ad.sub(pred, eps)
        loss = ad.mean(ad.mul(diff, diff))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        tape.clear()
        losses.append(loss.item())
        if log is not None:
            log({"stage": "noise", "step": step, "loss": losses[-1]})
    return losses


def base_weight_digest(model: DenoiserModel) -> str:
    return digest(model.state())


def adapter_digest(adapters: AdapterSet) -> str:
    return digest(adapters.state())
