"""Learned preference scorer standing in for a mutual-information reward.

A small conv encoder embeds the image, an independent attribute embedder
embeds the prompt, and a fused hidden layer emits L logits whose mean is
the score. Low-rank adapters sit on the three fusion projections; with
adapters enabled, training updates only the adapters and the logit head,
leaving the base encoder untouched. The training objective is the pairwise
logistic loss on score differences of (preferred, dispreferred) images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, no_grad
from .lora import AdapterSet, LoraAdapter, adapted_matmul
from .world import AttributeTuple, COUNTS, N_BACKGROUNDS, N_COLORS, SHAPES, SIZES


class PreferenceError(ValueError):
    pass


@dataclass(frozen=True)
class PreferencePair:
    """A prompt with a preferred (label 1) and a dispreferred (label 0) image."""

    prompt: AttributeTuple
    image_pos: np.ndarray
    image_neg: np.ndarray


@dataclass
class PreferenceConfig:
    num_logits: int = 8
    fusion_dim: int = 128
    prompt_dim: int = 32
    adapter_rank: int = 64
    adapter_scale: float = 16.0
    seed: int = 0


_TABLE_SIZES = {
    "shape": len(SHAPES),
    "color": N_COLORS,
    "size": len(SIZES),
    "background": N_BACKGROUNDS,
    "count": len(COUNTS),
}


def _row_index(attrs: AttributeTuple, field: str) -> int:
    v = attrs.field(field)
    if field == "shape":
        return SHAPES.index(v)
    if field == "size":
        return SIZES.index(v)
    if field == "count":
        return v - 1
    return int(v)


class PreferenceModel:
    FUSION_SITES = ("img_proj", "prompt_proj", "fusion")

    def __init__(self, config: PreferenceConfig | None = None,
                 adapters_enabled: bool = True):
        self.config = config or PreferenceConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)

        def init(shape, fan_in):
            return Tensor(rng.normal(scale=1.0 / math.sqrt(fan_in), size=shape),
                          requires_grad=True)

        fd, pd, nl = cfg.fusion_dim, cfg.prompt_dim, cfg.num_logits
        # base: conv image encoder, prompt tables, fusion projections
        self.base: dict[str, Tensor] = {
            "conv1_k": init((9 * 3, 8), 27), "conv1_b": Tensor(np.zeros((1, 8)), requires_grad=True),
            "conv2_k": init((9 * 8, 16), 72), "conv2_b": Tensor(np.zeros((1, 16)), requires_grad=True),
            **{f"emb_{f}": init((n, pd), pd) for f, n in _TABLE_SIZES.items()},
            "w_img": init((256, fd), 256),
            "w_prompt": init((pd, fd), pd),
            # fusion input is [img + prompt, img * prompt], hence 2*fd wide
            "w_fusion": init((2 * fd, fd), 2 * fd),
            "b_fusion": Tensor(np.zeros((1, fd)), requires_grad=True),
        }
        # head: emits the logit vector whose mean is the score
        self.head: dict[str, Tensor] = {
            "w_head": init((fd, nl), fd),
            "b_head": Tensor(np.zeros((1, nl)), requires_grad=True),
        }
        self.adapters_enabled = adapters_enabled
        self.adapters = AdapterSet()
        widths = {"img_proj": (256, fd), "prompt_proj": (pd, fd), "fusion": (2 * fd, fd)}
        for i, site in enumerate(self.FUSION_SITES):
            d_in, d_out = widths[site]
            rank = min(cfg.adapter_rank, d_in, d_out)
            self.adapters.add(site, LoraAdapter(d_in, d_out, rank=rank,
                                                scale=cfg.adapter_scale,
                                                seed=cfg.seed + 100 + i))

    # -- parameter groups ------------------------------------------------------

    def trainable_parameters(self) -> list[Tensor]:
        if self.adapters_enabled:
            return self.adapters.params() + list(self.head.values())
        return list(self.base.values()) + list(self.head.values())

    def base_encoder_state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.base.items()}

    def state(self) -> dict[str, np.ndarray]:
        table = {f"pref/{k}": v.data.copy() for k, v in self.base.items()}
        table.update({f"pref/{k}": v.data.copy() for k, v in self.head.items()})
        table.update(self.adapters.state("pref_adapter"))
        cfg = self.config
        table["pref/meta"] = np.array(
            [cfg.num_logits, cfg.fusion_dim, cfg.prompt_dim, cfg.adapter_rank,
             cfg.adapter_scale, cfg.seed, 1.0 if self.adapters_enabled else 0.0],
            dtype=float)
        return table

    def load_state(self, table: dict[str, np.ndarray]) -> None:
        for k, v in self.base.items():
            v.update_(table[f"pref/{k}"])
        for k, v in self.head.items():
            v.update_(table[f"pref/{k}"])
        self.adapters.load_state(table, "pref_adapter")

    @staticmethod
    def from_state(table: dict[str, np.ndarray]) -> "PreferenceModel":
        nl, fd, pd, rank, scale, seed, enabled = table["pref/meta"]
        model = PreferenceModel(
            PreferenceConfig(num_logits=int(nl), fusion_dim=int(fd),
                             prompt_dim=int(pd), adapter_rank=int(rank),
                             adapter_scale=float(scale), seed=int(seed)),
            adapters_enabled=bool(enabled))
        model.load_state(table)
        return model

    # -- forward -----------------------------------------------------------------

    def embed_prompt(self, attrs: AttributeTuple) -> Tensor:
        psi = None
        for field in _TABLE_SIZES:
            i = _row_index(attrs, field)
            row = ad.slice_rows(self.base[f"emb_{field}"], i, i + 1)
            psi = row if psi is None else ad.add(psi, row)
        return psi

    def _encode_images(self, images: Tensor) -> Tensor:
        h = ad.relu(self._bias4(ad.conv2d(images, self.base["conv1_k"], stride=2), "conv1_b"))
        h = ad.relu(self._bias4(ad.conv2d(h, self.base["conv2_k"], stride=2), "conv2_b"))
        return ad.reshape(h, (images.shape[0], 256))

    def _bias4(self, x: Tensor, name: str) -> Tensor:
        b, h, w, c = x.shape
        flat = ad.reshape(x, (b * h * w, c))
        return ad.reshape(ad.linear(flat, Tensor(np.eye(c)), self.base[name]), (b, h, w, c))

    def logits(self, prompts: Sequence[AttributeTuple], images: Tensor) -> Tensor:
        """(B, L) logits for a batch of prompt/image pairs."""
        b = images.shape[0]
        if len(prompts) not in (1, b):
            raise PreferenceError(f"{len(prompts)} prompts for a batch of {b}")
        get = self.adapters.get if self.adapters_enabled else (lambda s: None)
        img_feat = ad.tanh(adapted_matmul(self._encode_images(images),
                                          self.base["w_img"], get("img_proj")))
        rows = [self.embed_prompt(p) for p in prompts]
        psi = rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)
        if len(prompts) == 1 and b > 1:
            psi = ad.tile_rows(psi, b)
        p_feat = ad.tanh(adapted_matmul(psi, self.base["w_prompt"], get("prompt_proj")))
        # additive plus elementwise-product paths: the product carries the
        # agreement signal that pure addition cannot express
        mixed = ad.concat([ad.add(img_feat, p_feat), ad.mul(img_feat, p_feat)], axis=1)
        fused = adapted_matmul(mixed, self.base["w_fusion"], get("fusion"))
        h = ad.tanh(ad.add(fused, ad.tile_rows(self.base["b_fusion"], b)))
        return ad.linear(h, self.head["w_head"], self.head["b_head"])

    def score_batch(self, prompts: Sequence[AttributeTuple], images: Tensor) -> Tensor:
        """(B,) scores: the mean of each row of logits."""
        return ad.mean(self.logits(prompts, images), axis=1)


def score(model: PreferenceModel, prompt: AttributeTuple, image) -> float:
    """Deterministic scalar preference score (raw logit mean, no range)."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    with no_grad():
        s = model.score_batch([prompt], Tensor(arr[None]))
    return float(s.data[0])


def pair_loss_value(delta: float) -> float:
    """-log sigmoid(delta), the per-pair objective at a given score gap."""
    return float(np.log1p(np.exp(-delta)))


def train(model: PreferenceModel, pairs: Sequence[PreferencePair], epochs: int,
          lr: float, batch_size: int = 32, seed: int = 0,
          augment_sigma: float = 0.0) -> list[float]:
    """Minimize the pairwise logistic loss; returns per-epoch mean losses.

    With adapters enabled only adapters and the head receive updates.
    """
    if not pairs:
        raise PreferenceError("empty preference dataset")
    rng = np.random.default_rng(seed)
    opt = Adam(model.trainable_parameters(), lr=lr)
    tape = ad.active_tape()
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            chunk = [pairs[i] for i in order[start : start + batch_size]]
            pos = np.stack([p.image_pos for p in chunk])
            neg = np.stack([p.image_neg for p in chunk])
            if augment_sigma > 0.0:
                pos = np.clip(pos + rng.normal(scale=augment_sigma, size=pos.shape), 0, 1)
                neg = np.clip(neg + rng.normal(scale=augment_sigma, size=neg.shape), 0, 1)
            prompts = [p.prompt for p in chunk]
            s_pos = model.score_batch(prompts, Tensor(pos))
            s_neg = model.score_batch(prompts, Tensor(neg))
            # -log sigmoid(s_pos - s_neg), averaged over the batch
            delta = ad.sub(s_pos, s_neg)
            loss = ad.mean(ad.mul(ad.log(ad.sigmoid(delta)), -1.0))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            tape.clear()
            epoch_losses.append(loss.item())
        curve.append(float(np.mean(epoch_losses)))
    return curve


def evaluate(model: PreferenceModel, pairs: Sequence[PreferencePair]) -> float:
    """Fraction of pairs scored strictly higher for the preferred image."""
    if not pairs:
        raise PreferenceError("empty preference dataset")
    hits = 0
    with no_grad():
        for start in range(0, len(pairs), 64):
            chunk = pairs[start : start + 64]
            prompts = [p.prompt for p in chunk]
            s_pos = model.score_batch(prompts, Tensor(np.stack([p.image_pos for p in chunk])))
            s_neg = model.score_batch(prompts, Tensor(np.stack([p.image_neg for p in chunk])))
            hits += int(np.sum(s_pos.data > s_neg.data))
    return hits / len(pairs)
