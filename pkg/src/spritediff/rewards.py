"""Reward terms and their round-scheduled combination.

Three terms drive fine-tuning: batch diversity (mean pairwise cosine
dissimilarity over ordered pairs), cross-round consistency (sum of
consecutive cosine similarities, unnormalized by default), and a learned
preference score. Their weights follow closed-form exponentials in the
dialogue round t:

    w_div(t)  = exp(-0.15 t)        starts at 1, decays
    w_cons(t) = 1 - exp(-0.1 t)     starts at 0, grows toward 1
    w_pref(t) = 0.5 exp(-0.075 t)   starts at 0.5, decays

Note the preference weight decays even though the general intent is a
growing emphasis on alignment; the closed form above is what this
implementation follows, and the breakdown records keep every term
separately so ablations can force any weight to zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ALPHA_DIV = 0.15
BETA_CONS = 0.1
GAMMA_PREF = 0.075


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    round_index: int
    div: float
    cons: float
    mi: float

    def as_dict(self) -> dict:
        return {"t": self.round_index, "div": self.div, "cons": self.cons, "mi": self.mi}


def schedule(t: int) -> RewardWeights:
    """Closed-form weights at dialogue round t >= 0."""
    if t < 0 or int(t) != t:
        raise RewardError(f"round index must be a non-negative integer, got {t}")
    return RewardWeights(
        round_index=int(t),
        div=math.exp(-ALPHA_DIV * t),
        cons=1.0 - math.exp(-BETA_CONS * t),
        mi=0.5 * math.exp(-GAMMA_PREF * t),
    )


def _as_matrix(features: Sequence) -> Tensor:
    rows = []
    for f in features:
        t = f if isinstance(f, Tensor) else Tensor(np.asarray(f, dtype=np.float64))
        if len(t.shape) == 1:
            t = ad.reshape(t, (1, t.shape[0]))
        rows.append(t)
    return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)


def diversity(features: Sequence) -> Tensor:
    """Mean (1 - cosine) over ordered pairs of N >= 2 feature vectors."""
    if len(features) < 2:
        raise RewardError("diversity needs at least two feature vectors")
    mat = _as_matrix(features)
    n = mat.shape[0]
    if np.any(np.sum(mat.data * mat.data, axis=1) <= 0.0):
        raise RewardError("diversity received a zero-norm feature")
    unit = ad.l2_normalize_rows(mat)
    sims = ad.matmul(unit, ad.transpose(unit))
    off_diag = Tensor(1.0 - np.eye(n))
    dissim = ad.mul(ad.sub(Tensor(np.ones((n, n))), sims), off_diag)
    return ad.mul(ad.sum_(dissim), 1.0 / (n * (n - 1)))


def consistency(sequence: Sequence, normalized: bool = False) -> Tensor:
    """Sum of cosines of consecutive pairs; ``normalized`` averages instead."""
    if len(sequence) < 2:
        raise RewardError("consistency needs at least two feature vectors")
    mat = _as_matrix(sequence)
    n = mat.shape[0]
    if np.any(np.sum(mat.data * mat.data, axis=1) <= 0.0):
        raise RewardError("consistency received a zero-norm feature")
    unit = ad.l2_normalize_rows(mat)
    head = ad.slice_rows(unit, 0, n - 1)
    tail = ad.slice_rows(unit, 1, n)
    total = ad.sum_(ad.mul(head, tail))
    if normalized:
        return ad.mul(total, 1.0 / (n - 1))
    return total


@dataclass(frozen=True)
class RewardBreakdown:
    weights: RewardWeights
    div: float
    cons: float
    mi: float

    @property
    def total(self) -> float:
        return (self.weights.div * self.div
                + self.weights.cons * self.cons
                + self.weights.mi * self.mi)

    def as_dict(self) -> dict:
        return {
            "t": self.weights.round_index,
            "weights": {"div": self.weights.div, "cons": self.weights.cons,
                        "mi": self.weights.mi},
            "div": self.div, "cons": self.cons, "mi": self.mi, "total": self.total,
        }

    @staticmethod
    def from_dict(d: dict) -> "RewardBreakdown":
        w = RewardWeights(round_index=d["t"], div=d["weights"]["div"],
                          cons=d["weights"]["cons"], mi=d["weights"]["mi"])
        return RewardBreakdown(weights=w, div=d["div"], cons=d["cons"], mi=d["mi"])


@dataclass
class WeightOverride:
    """Ablation hook: force individual weights to zero."""

    zero_div: bool = False
    zero_cons: bool = False
    zero_mi: bool = False

    def apply(self, w: RewardWeights) -> RewardWeights:
        return RewardWeights(
            round_index=w.round_index,
            div=0.0 if self.zero_div else w.div,
            cons=0.0 if self.zero_cons else w.cons,
            mi=0.0 if self.zero_mi else w.mi,
        )

    @staticmethod
    def for_ablation(name: str) -> "WeightOverride":
        if name == "div":
            return WeightOverride(zero_div=True)
        if name == "cons":
            return WeightOverride(zero_cons=True)
        if name == "mi":
            return WeightOverride(zero_mi=True)
        if name == "none":
            return WeightOverride()
        raise RewardError(f"unknown ablation {name!r} (expected div|cons|mi|none)")


def total(t: int, r_div: float, r_cons: float, r_mi: float,
          override: Optional[WeightOverride] = None) -> RewardBreakdown:
    """Weighted combination at round t, with the full breakdown retained."""
    vals = (r_div, r_cons, r_mi)
    if not all(math.isfinite(v) for v in vals):
        raise RewardError(f"non-finite reward inputs {vals}")
    w = schedule(t)
    if override is not None:
        w = override.apply(w)
    return RewardBreakdown(weights=w, div=r_div, cons=r_cons, mi=r_mi)


def total_tensor(t: int, r_div: Tensor, r_cons: Tensor, r_mi: Tensor,
                 override: Optional[WeightOverride] = None) -> Tensor:
    """Differentiable weighted sum used inside the reward training phase."""
    w = schedule(t)
    if override is not None:
        w = override.apply(w)
    return ad.add(ad.add(ad.mul(r_div, w.div), ad.mul(r_cons, w.cons)),
                  ad.mul(r_mi, w.mi))


def append_reward_log(path, step: int, breakdown: RewardBreakdown) -> None:
    """One line-delimited record per training step for the CLI plotter."""
    rec = {"step": step, **breakdown.as_dict()}
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(rec) + "\n")


def read_reward_log(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
