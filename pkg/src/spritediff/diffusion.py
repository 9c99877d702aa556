"""Toy conditional latent diffusion over the sprite world.

A small convolutional codec maps 16x16x3 images to a 4x4xC latent; a
token-wise denoising net with one cross-attention block (queries from
latent tokens, keys/values from the prompt embedding and a timestep
token) predicts the injected noise. The standard closed-form q-sample,
the DDPM posterior step, a deterministic eta=0 variant, and x0 prediction
live here, together with the final-layer feature extractor used by the
reward functions and a 2-D sanity denoiser for smoke tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .lora import AdapterSet, adapted_matmul
from .world import AttributeTuple, IMAGE_SIZE, N_BACKGROUNDS, N_COLORS, SHAPES, SIZES, COUNTS


class DiffusionError(ValueError):
    pass


class NoiseSchedule:
    """Linear-beta schedule with a conceptual alpha_bar(0) = 1 boundary."""

    def __init__(self, steps: int = 70, beta_start: float = 1e-4,
                 beta_end: float = 0.02, finetune_range: tuple[int, int] = (1, 40)):
        if steps < 1:
            raise DiffusionError("schedule needs at least one step")
        self.steps = steps
        self.betas = np.linspace(beta_start, beta_end, steps)
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise DiffusionError("betas must lie in (0, 1)")
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise DiffusionError("alpha_bar must be strictly decreasing")
        t1, t2 = finetune_range
        if not (1 <= t1 <= t2 <= steps):
            raise DiffusionError(f"finetune range {finetune_range} outside [1, {steps}]")
        self.finetune_range = (t1, t2)

    def beta(self, t: int) -> float:
        self._check(t, low=1)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return 1.0 - self.beta(t)

    def alpha_bar(self, t: int) -> float:
        self._check(t, low=0)
        return float(self.alpha_bars[t])

    def posterior_variance(self, t: int) -> float:
        self._check(t, low=1)
        return (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)

    def _check(self, t: int, low: int):
        if not (low <= t <= self.steps):
            raise DiffusionError(f"timestep {t} outside [{low}, {self.steps}]")

    def state(self) -> dict[str, np.ndarray]:
        t1, t2 = self.finetune_range
        return {"schedule/betas": self.betas.copy(),
                "schedule/finetune_range": np.array([t1, t2], dtype=float)}

    @staticmethod
    def from_state(table: dict[str, np.ndarray]) -> "NoiseSchedule":
        betas = table["schedule/betas"]
        t1, t2 = (int(v) for v in table["schedule/finetune_range"])
        sched = NoiseSchedule.__new__(NoiseSchedule)
        sched.steps = len(betas)
        sched.betas = betas.astype(np.float64)
        sched.alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - sched.betas)])
        sched.finetune_range = (t1, t2)
        return sched


def forward_diffuse(z0: Tensor, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Closed-form q-sample: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    if eps.shape != z0.shape:
        raise DiffusionError("noise shape must match the latent")
    ab = schedule.alpha_bar(t)
    return ad.add(ad.mul(z0, math.sqrt(ab)), ad.mul(eps, math.sqrt(1.0 - ab)))


def predict_x0(z_t: Tensor, eps_hat: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    """Invert the q-sample: (z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)."""
    if t < 1:
        raise DiffusionError("predict_x0 needs t >= 1")
    ab = schedule.alpha_bar(t)
    return ad.mul(ad.sub(z_t, ad.mul(eps_hat, math.sqrt(1.0 - ab))), 1.0 / math.sqrt(ab))


@dataclass
class DenoiserConfig:
    latent_channels: int = 8
    embed_dim: int = 64
    ffn_dim: int = 256
    encoder_hidden: int = 16
    latent_scale: float = 1.0
    seed: int = 0


_ATTR_TABLE_SIZES = {
    "shape": len(SHAPES),
    "color": N_COLORS,
    "size": len(SIZES),
    "background": N_BACKGROUNDS,
    "count": len(COUNTS),
}


def _attr_row(attrs: AttributeTuple, field: str) -> int:
    v = attrs.field(field)
    if field == "shape":
        return SHAPES.index(v)
    if field == "size":
        return SIZES.index(v)
    if field == "count":
        return v - 1
    return int(v)


class StepResult(NamedTuple):
    z_prev: Tensor
    eps_hat: Tensor


class DenoiserModel:
    """Codec + prompt embedder + cross-attention noise predictor.

    The attention projections q/k/v/o are the LoRA sites; keys and values
    come from two context tokens (prompt embedding, timestep embedding) so
    the attention weights are input-dependent.
    """

    ATTENTION_SITES = ("q0", "k0", "v0", "o0")

    def __init__(self, config: DenoiserConfig | None = None):
        self.config = config or DenoiserConfig()
        config = self.config
        c, d, hch = config.latent_channels, config.embed_dim, config.encoder_hidden
        ffn = config.ffn_dim
        rng = np.random.default_rng(config.seed)

        def init(shape, fan_in):
            return Tensor(rng.normal(scale=1.0 / math.sqrt(fan_in), size=shape),
                          requires_grad=True)

        self.params: dict[str, Tensor] = {
            # codec
            "enc1_k": init((9 * 3, hch), 27), "enc1_b": Tensor(np.zeros((1, hch)), requires_grad=True),
            "enc2_k": init((9 * hch, c), 9 * hch), "enc2_b": Tensor(np.zeros((1, c)), requires_grad=True),
            "dec1_k": init((9 * c, hch), 9 * c), "dec1_b": Tensor(np.zeros((1, hch)), requires_grad=True),
            "dec2_k": init((9 * hch, 3), 9 * hch), "dec2_b": Tensor(np.zeros((1, 3)), requires_grad=True),
            # prompt embedding tables
            **{f"emb_{f}": init((n, d), d) for f, n in _ATTR_TABLE_SIZES.items()},
            # epsilon net
            "w_in": init((c, d), c), "b_in": Tensor(np.zeros((1, d)), requires_grad=True),
            "pos": init((16, d), d),
            "w_time": init((d, d), d), "b_time": Tensor(np.zeros((1, d)), requires_grad=True),
            "w_q": init((d, d), d), "w_k": init((d, d), d),
            "w_v": init((d, d), d), "w_o": init((d, d), d),
            "w_f": init((d, ffn), d), "b_f": Tensor(np.zeros((1, ffn)), requires_grad=True),
            "w_out": init((ffn, c), ffn), "b_out": Tensor(np.zeros((1, c)), requires_grad=True),
        }

    # -- parameter groups ---------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def codec_parameters(self) -> list[Tensor]:
        return [self.params[k] for k in
                ("enc1_k", "enc1_b", "enc2_k", "enc2_b", "dec1_k", "dec1_b", "dec2_k", "dec2_b")]

    def eps_parameters(self) -> list[Tensor]:
        codec = set(id(p) for p in self.codec_parameters())
        return [p for p in self.parameters() if id(p) not in codec]

    def state(self) -> dict[str, np.ndarray]:
        table = {f"model/{k}": v.data.copy() for k, v in self.params.items()}
        cfg = self.config
        table["model/meta"] = np.array(
            [cfg.latent_channels, cfg.embed_dim, cfg.encoder_hidden, cfg.seed,
             cfg.latent_scale, cfg.ffn_dim], dtype=float)
        return table

    def load_state(self, table: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.update_(table[f"model/{k}"])

    @staticmethod
    def from_state(table: dict[str, np.ndarray]) -> "DenoiserModel":
        meta = table["model/meta"]
        model = DenoiserModel(DenoiserConfig(
            latent_channels=int(meta[0]), embed_dim=int(meta[1]),
            encoder_hidden=int(meta[2]), seed=int(meta[3]),
            latent_scale=float(meta[4]), ffn_dim=int(meta[5])))
        model.load_state(table)
        return model

    def new_adapters(self, rank: int = 4, scale: float = 4.0, seed: int = 0,
                     lr: float = 3e-4) -> AdapterSet:
        from .lora import init_adapter

        adapters = AdapterSet()
        d = self.config.embed_dim
        for i, site in enumerate(self.ATTENTION_SITES):
            adapters.add(site, init_adapter(d, rank, seed + i, scale=scale, lr=lr))
        return adapters

    # -- codec ---------------------------------------------------------------

    def encode(self, images: Tensor) -> Tensor:
        """(B,16,16,3) images -> (B,4,4,C) latents in (-scale, scale)."""
        h = ad.relu(self._bias4(ad.conv2d(images, self.params["enc1_k"], stride=2), "enc1_b"))
        z = ad.tanh(self._bias4(ad.conv2d(h, self.params["enc2_k"], stride=2), "enc2_b"))
        return ad.mul(z, self.config.latent_scale)

    def decode(self, z: Tensor) -> Tensor:
        """(B,4,4,C) latents -> (B,16,16,3) images in (0, 1)."""
        h = ad.upsample_nearest2x(z)
        h = ad.relu(self._bias4(ad.conv2d(h, self.params["dec1_k"], stride=1), "dec1_b"))
        h = ad.upsample_nearest2x(h)
        return ad.sigmoid(self._bias4(ad.conv2d(h, self.params["dec2_k"], stride=1), "dec2_b"))

    def _bias4(self, x: Tensor, bias_name: str) -> Tensor:
        b, h, w, c = x.shape
        flat = ad.reshape(x, (b * h * w, c))
        return ad.reshape(ad.linear(flat, Tensor(np.eye(c)), self.params[bias_name]),
                          (b, h, w, c))

    # -- prompt embedding ------------------------------------------------------

    ROUND_ENC_SCALE = 0.25

    def embed_prompt(self, attrs: AttributeTuple, round_index: int = 0) -> Tensor:
        """Sum of the five attribute rows plus a fixed round-index encoding, (1,d)."""
        d = self.config.embed_dim
        psi = None
        for field in _ATTR_TABLE_SIZES:
            row = ad.slice_rows(self.params[f"emb_{field}"], _attr_row(attrs, field),
                                _attr_row(attrs, field) + 1)
            psi = row if psi is None else ad.add(psi, row)
        enc = ad.sinusoidal_embedding(float(round_index), d)[None, :]
        return ad.add(psi, Tensor(self.ROUND_ENC_SCALE * enc))

    # -- epsilon prediction -----------------------------------------------------

    def predict_eps(self, z: Tensor, psi: Tensor, t: int,
                    adapters: Optional[AdapterSet] = None,
                    return_features: bool = False):
        """Noise estimate for a (B,4,4,C) latent batch.

        psi is (B,d) (or (1,d), shared across the batch). The final hidden
        activation before the output head is the feature-map source.
        """
        b = z.shape[0]
        c, d = self.config.latent_channels, self.config.embed_dim
        tokens = ad.linear(ad.reshape(z, (b * 16, c)), self.params["w_in"], self.params["b_in"])
        pos = ad.concat([self.params["pos"]] * b, axis=0)
        time_row = ad.linear(Tensor(ad.sinusoidal_embedding(float(t), d)[None, :]),
                             self.params["w_time"], self.params["b_time"])
        tokens = ad.add(ad.add(tokens, pos), ad.tile_rows(time_row, b * 16))
        # pre-LN attention: queries from the normalized stream, residual from
        # the raw one so the latent's scale survives to the output head
        normed = ad.layer_norm(tokens)

        if psi.shape[0] == 1 and b > 1:
            psi = ad.concat([psi] * b, axis=0)
        get = adapters.get if adapters is not None else (lambda site: None)
        scale = 1.0 / math.sqrt(d)
        outs = []
        for i in range(b):
            ti = ad.slice_rows(normed, 16 * i, 16 * (i + 1))
            ctx = ad.concat([ad.slice_rows(psi, i, i + 1), time_row], axis=0)
            q = adapted_matmul(ti, self.params["w_q"], get("q0"))
            k = adapted_matmul(ctx, self.params["w_k"], get("k0"))
            v = adapted_matmul(ctx, self.params["w_v"], get("v0"))
            att = ad.softmax_rows(ad.mul(ad.matmul(q, ad.transpose(k)), scale))
            oi = adapted_matmul(ad.matmul(att, v), self.params["w_o"], get("o0"))
            outs.append(ad.add(ad.slice_rows(tokens, 16 * i, 16 * (i + 1)), oi))
        h = outs[0] if b == 1 else ad.concat(outs, axis=0)
        feat = ad.tanh(ad.linear(h, self.params["w_f"], self.params["b_f"]))
        eps = ad.linear(feat, self.params["w_out"], self.params["b_out"])
        eps = ad.reshape(eps, (b, 4, 4, c))
        if return_features:
            return eps, feat
        return eps


def extract_features(model, z: Tensor) -> Tensor:
    """L2-normalized flattened final-layer activations of the base net.

    Accepts one latent (4,4,C) or a batch (B,4,4,C); returns (D,) or (B,D).
    Uses a neutral prompt/timestep and no adapters, so features are a
    deterministic function of the latent alone.
    """
    single = len(z.shape) == 3
    if single:
        z = ad.reshape(z, (1,) + tuple(z.shape))
    b = z.shape[0]
    psi0 = Tensor(np.zeros((1, model.config.embed_dim)))
    _, feat = model.predict_eps(z, psi0, 0, adapters=None, return_features=True)
    width = 16 * model.config.ffn_dim
    rows = ad.l2_normalize_rows(ad.reshape(feat, (b, width)))
    if single:
        return ad.reshape(rows, (width,))
    return rows


def denoise_step(model, z_t: Tensor, psi: Tensor, t: int, schedule: NoiseSchedule,
                 adapters: Optional[AdapterSet] = None, stochastic: bool = False,
                 rng: Optional[np.random.Generator] = None) -> StepResult:
    """One reverse step z_t -> z_{t-1}.

    stochastic=True is the DDPM posterior-mean step plus posterior noise
    (used in training-time sampling); stochastic=False is the eta=0
    deterministic update used inside dialogue rounds.
    """
    if t < 1:
        raise DiffusionError("denoise_step needs t >= 1")
    eps_hat = model.predict_eps(z_t, psi, t, adapters)
    ab_t = schedule.alpha_bar(t)
    if stochastic:
        if rng is None:
            raise DiffusionError("stochastic stepping requires an rng")
        beta = schedule.beta(t)
        mean = ad.mul(ad.sub(z_t, ad.mul(eps_hat, beta / math.sqrt(1.0 - ab_t))),
                      1.0 / math.sqrt(schedule.alpha(t)))
        if t > 1:
            sigma = math.sqrt(schedule.posterior_variance(t))
            noise = Tensor(rng.standard_normal(z_t.shape))
            return StepResult(ad.add(mean, ad.mul(noise, sigma)), eps_hat)
        return StepResult(mean, eps_hat)
    x0 = predict_x0(z_t, eps_hat, t, schedule)
    ab_prev = schedule.alpha_bar(t - 1)
    z_prev = ad.add(ad.mul(x0, math.sqrt(ab_prev)),
                    ad.mul(eps_hat, math.sqrt(1.0 - ab_prev)))
    return StepResult(z_prev, eps_hat)


def denoise_from(model, z: Tensor, psi: Tensor, t_from: int, t_to: int,
                 schedule: NoiseSchedule, adapters: Optional[AdapterSet] = None,
                 stochastic: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Run reverse steps from t_from down to t_to (exclusive lower bound 0)."""
    for t in range(t_from, t_to, -1):
        z = denoise_step(model, z, psi, t, schedule, adapters, stochastic, rng).z_prev
    return z


def sample(model, psi: Tensor, schedule: NoiseSchedule, seed: int,
           adapters: Optional[AdapterSet] = None, stochastic: bool = True):
    """Full reverse pass from seeded Gaussian noise; returns (z0, image).

    Reproducible: the same (seed, psi, weights) give a bit-identical image.
    """
    rng = np.random.default_rng(seed)
    c = model.config.latent_channels
    with no_grad():
        z = Tensor(rng.standard_normal((1, 4, 4, c)))
        z = denoise_from(model, z, psi, schedule.steps, 0, schedule,
                         adapters, stochastic, rng)
        img = model.decode(z)
    return z.data[0].copy(), img.data[0].copy()


# -- 2-D sanity model ---------------------------------------------------------


class ToyDenoiser2D:
    """Tiny MLP noise predictor over 2-D points, for the standard smoke test."""

    TIME_DIM = 16

    def __init__(self, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)

        def init(shape, fan_in):
            return Tensor(rng.normal(scale=1.0 / math.sqrt(fan_in), size=shape),
                          requires_grad=True)

        td = self.TIME_DIM
        self.params = {
            "w1": init((2 + td, hidden), 2 + td), "b1": Tensor(np.zeros((1, hidden)), requires_grad=True),
            "w2": init((hidden, hidden), hidden), "b2": Tensor(np.zeros((1, hidden)), requires_grad=True),
            "w3": init((hidden, 2), hidden), "b3": Tensor(np.zeros((1, 2)), requires_grad=True),
        }

    def parameters(self):
        return list(self.params.values())

    def predict_eps(self, z: Tensor, psi, t: int, adapters=None) -> Tensor:
        b = z.shape[0]
        tfeat = ad.sinusoidal_embedding(float(t), self.TIME_DIM)[None, :]
        x = ad.concat([z, ad.tile_rows(Tensor(tfeat), b)], axis=1)
        h = ad.relu(ad.linear(x, self.params["w1"], self.params["b1"]))
        h = ad.relu(ad.linear(h, self.params["w2"], self.params["b2"]))
        return ad.linear(h, self.params["w3"], self.params["b3"])


def two_cluster_data(n: int, rng: np.random.Generator,
                     centers=((-1.5, -1.5), (1.5, 1.5)), spread: float = 0.08) -> np.ndarray:
    which = rng.integers(0, len(centers), size=n)
    pts = np.asarray(centers, dtype=float)[which]
    return pts + rng.normal(scale=spread, size=(n, 2))


def train_toy_denoiser(model: ToyDenoiser2D, schedule: NoiseSchedule,
                       data: np.ndarray, steps: int, lr: float,
                       rng: np.random.Generator, batch: int = 128) -> list[float]:
    """Noise-prediction training; returns the per-step loss curve."""
    opt = ad.Adam(model.parameters(), lr=lr)
    losses = []
    tape = ad.active_tape()
    for _ in range(steps):
        idx = rng.integers(0, len(data), size=batch)
        x0 = Tensor(data[idx])
        t = int(rng.integers(1, schedule.steps + 1))
        eps = Tensor(rng.standard_normal((batch, 2)))
        z_t = forward_diffuse(x0, t, eps, schedule)
        pred = model.predict_eps(z_t, None, t)
        diff = ad.sub(pred, eps)
        loss = ad.mean(ad.mul(diff, diff))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        tape.clear()
        losses.append(loss.item())
    return losses


def sample_toy(model: ToyDenoiser2D, schedule: NoiseSchedule, n: int,
               rng: np.random.Generator) -> np.ndarray:
    with no_grad():
        z = Tensor(rng.standard_normal((n, 2)))
        z = denoise_from(model, z, None, schedule.steps, 0, schedule,
                         stochastic=True, rng=rng)
    return z.data.copy()
