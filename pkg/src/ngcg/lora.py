"""Low-rank adaptation of frozen trunk matrices.

Matrices act on row vectors: a base weight ``W0`` of shape (d_in, d_out)
maps ``x @ W0``. An adapter holds ``B`` (d_in x r) and ``A`` (r x d_out) and
adds ``(alpha / r) * (x @ B) @ A``, so the dense update is
``(alpha / r) * B @ A`` with the same shape as ``W0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractError, DimensionError, RankError


@dataclass
class LoRAAdapter:
    A: np.ndarray
    B: np.ndarray
    alpha: float
    rank: int
    target: str

    def __post_init__(self):
        if self.rank < 1:
            raise RankError("rank must be >= 1")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ContractError(f"alpha must be positive and finite, got {self.alpha}")
        if self.A.shape[0] != self.rank or self.B.shape[1] != self.rank:
            raise DimensionError(
                f"adapter {self.target}: A {self.A.shape}, B {self.B.shape}, rank {self.rank}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoRASet:
    adapters: dict[str, LoRAAdapter] = field(default_factory=dict)
    full_coverage: bool = True

    @property
    def coverage(self) -> list[str]:
        return sorted(self.adapters)

    def __contains__(self, target: str) -> bool:
        return target in self.adapters

    def __getitem__(self, target: str) -> LoRAAdapter:
        return self.adapters[target]

    def __len__(self):
        return len(self.adapters)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for t, ad in self.adapters.items():
            out[f"lora.{t}.A"] = ad.A
            out[f"lora.{t}.B"] = ad.B
        return out

    def check_coverage(self, targets):
        missing = sorted(set(targets) - set(self.adapters))
        if self.full_coverage and missing:
            raise ContractError(f"full coverage requested but {missing} lack adapters")


def attach(params, rank: int, alpha: float, seed: int) -> LoRASet:
    """Create one adapter per trunk matrix of ``params``.

    ``A`` is drawn from N(0, 1/r); ``B`` starts at zero, so the adapted model
    initially computes exactly what the base model computes.
    """
    if rank < 1:
        raise RankError("rank must be >= 1")
    if not alpha > 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    adapters = {}
    for target in params.trunk_targets():
        d_in, d_out = params.tensors[target].shape
        if rank > min(d_in, d_out):
            raise RankError(f"rank {rank} exceeds min{(d_in, d_out)} for {target}")
        A = rng.normal(0.0, 1.0 / math.sqrt(rank), size=(rank, d_out))
        B = np.zeros((d_in, rank))
        adapters[target] = LoRAAdapter(A, B, float(alpha), int(rank), target)
    return LoRASet(adapters)


def adapted_forward(W0: np.ndarray, adapter: LoRAAdapter, x: np.ndarray) -> np.ndarray:
    """``x @ W0 + (alpha/r) (x @ B) @ A`` without forming ``B @ A``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    _check_shapes(W0, adapter, x.shape[1])
    return x @ W0 + adapter.scaling * ((x @ adapter.B) @ adapter.A)


def merge(W0: np.ndarray, adapter: LoRAAdapter) -> np.ndarray:
    """Dense weight ``W0 + (alpha/r) B @ A``."""
    _check_shapes(W0, adapter, W0.shape[0])
    if not adapter.alpha > 0:
        raise ContractError("alpha must be positive")
    return W0 + adapter.scaling * (adapter.B @ adapter.A)


def _check_shapes(W0, adapter, d_in):
    if W0.shape[0] != d_in:
        raise DimensionError(f"input width {d_in} does not match W0 {W0.shape}")
    if adapter.B.shape[0] != W0.shape[0] or adapter.A.shape[1] != W0.shape[1]:
        raise DimensionError(
            f"adapter B {adapter.B.shape} / A {adapter.A.shape} incompatible with W0 {W0.shape}")


def adapted_linear(x: nc.Node, w: nc.Node, a: nc.Node, b: nc.Node, scaling: float) -> nc.Node:
    """Graph form of :func:`adapted_forward`."""
    base = nc.matmul(x, w)
    return nc.add(base, nc.scale(nc.matmul(nc.matmul(x, b), a), scaling))


def trainable_parameters(lora_set: LoRASet | None, pooling) -> list[str]:
    """Names of the adapter matrices, plus the pooling query when it is learnable."""
    names = sorted(lora_set.tensors()) if lora_set is not None else []
    if pooling.strategy == "query":
        names.append("pool.query")
    return names
