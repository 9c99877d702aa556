"""Low-rank adapters over frozen projection matrices.

An adapter holds factors B (d_in x r, zero-initialized) and A (r x d_out,
small uniform), applied as x @ (W + (alpha/r) * B @ A). The factored form
is used on the hot path so the dense delta is never materialized; merge()
produces the dense sum for checkpoint export. With B = 0 the adapted model
computes exactly the base model.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, matmul, mul, add


class LoraError(ValueError):
    pass


class LoraAdapter:
    def __init__(self, d_in: int, d_out: int, rank: int = 4, scale: float = 4.0,
                 lr: float = 3e-4, seed: int = 0):
        if rank > min(d_in, d_out):
            raise LoraError(f"rank {rank} exceeds layer width {min(d_in, d_out)}")
        if rank < 1:
            raise LoraError("rank must be positive")
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d_in)
        self.rank = rank
        self.scale = scale
        self.lr = lr
        self.B = Tensor(np.zeros((d_in, rank)), requires_grad=True)
        self.A = Tensor(rng.uniform(-bound, bound, size=(rank, d_out)), requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.scale / self.rank

    def params(self) -> list[Tensor]:
        return [self.B, self.A]

    def apply(self, w_base: Tensor, x: Tensor) -> Tensor:
        """Adapted projection x @ (W + (alpha/r) B A), factored."""
        base = matmul(x, w_base)
        delta = matmul(matmul(x, self.B), self.A)
        return add(base, mul(delta, self.scaling))

    def merge(self, w_base: Tensor) -> Tensor:
        """Dense W + (alpha/r) B A, for checkpoint export."""
        return add(w_base, mul(matmul(self.B, self.A), self.scaling))

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)

    def reward_step(self, lr: float | None = None) -> None:
        """Gradient-ascent step on the factors only; base weights untouched."""
        eta = self.lr if lr is None else lr
        if self.A._grad is None and self.B._grad is None:
            raise LoraError("reward_step called without populated gradients")
        if self.A._grad is not None:
            self.A.update_(self.A.data + eta * self.A._grad)
        if self.B._grad is not None:
            self.B.update_(self.B.data + eta * self.B._grad)

    def zero_grad(self):
        self.A.zero_grad()
        self.B.zero_grad()

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.B": self.B.data.copy(),
            f"{prefix}.A": self.A.data.copy(),
            f"{prefix}.meta": np.array([self.rank, self.scale, self.lr]),
        }

    def load_state(self, prefix: str, table: dict[str, np.ndarray]) -> None:
        rank, scale, lr = table[f"{prefix}.meta"]
        if int(rank) != self.rank:
            raise LoraError(f"checkpoint rank {int(rank)} != adapter rank {self.rank}")
        self.scale, self.lr = float(scale), float(lr)
        self.B.update_(table[f"{prefix}.B"])
        self.A.update_(table[f"{prefix}.A"])


def init_adapter(d: int, rank: int, seed: int, scale: float = 4.0,
                 d_out: int | None = None, lr: float = 3e-4) -> LoraAdapter:
    """Fresh adapter for a d_in x d_out projection (square by default)."""
    return LoraAdapter(d, d_out if d_out is not None else d, rank=rank,
                       scale=scale, lr=lr, seed=seed)


class AdapterSet:
    """Adapters keyed by projection site, e.g. ``q0``/``k0``/``v0``/``o0``."""

    def __init__(self):
        self._adapters: dict[str, LoraAdapter] = {}

    def add(self, site: str, adapter: LoraAdapter) -> None:
        if site in self._adapters:
            raise LoraError(f"site {site!r} adapted twice")
        self._adapters[site] = adapter

    def get(self, site: str) -> LoraAdapter | None:
        return self._adapters.get(site)

    def sites(self) -> list[str]:
        return sorted(self._adapters)

    def __iter__(self) -> Iterator[tuple[str, LoraAdapter]]:
        return iter(sorted(self._adapters.items()))

    def __len__(self):
        return len(self._adapters)

    def params(self) -> list[Tensor]:
        out = []
        for _, a in self:
            out.extend(a.params())
        return out

    def zero_grads(self):
        for _, a in self:
            a.zero_grad()

    def state(self, namespace: str = "adapter") -> dict[str, np.ndarray]:
        table: dict[str, np.ndarray] = {}
        for site, a in self:
            table.update(a.state(f"{namespace}/{site}"))
        return table

    def load_state(self, table: dict[str, np.ndarray], namespace: str = "adapter") -> None:
        for site, a in self:
            a.load_state(f"{namespace}/{site}", table)


def apply(adapter: LoraAdapter, w_base: Tensor, x: Tensor) -> Tensor:
    return adapter.apply(w_base, x)


def merge(adapter: LoraAdapter, w_base: Tensor) -> Tensor:
    return adapter.merge(w_base)


def adapted_matmul(x: Tensor, w_base: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """x @ W, optionally with the adapter's low-rank delta."""
    if adapter is None:
        return matmul(x, w_base)
    return adapter.apply(w_base, x)
