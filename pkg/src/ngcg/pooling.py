"""Aggregate last-layer hidden states into unit-norm embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoder import MASK_BIAS, HiddenStates
from .errors import ConfigError, DegenerateEmbeddingError, EmptySequenceError

STRATEGIES = ("eos", "query", "average")


@dataclass
class PoolingConfig:
    strategy: str = "eos"
    query_vector: np.ndarray | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown pooling strategy {self.strategy!r}")
        if self.strategy == "query":
            if self.query_vector is None:
                raise ConfigError("query pooling needs a query vector")
            self.query_vector = nc.as_matrix(self.query_vector)
            if self.query_vector.shape[0] != 1:
                raise ConfigError("query vector must be 1 x d")
            nc._check_finite(self.query_vector, "pooling query")
        elif self.query_vector is not None:
            raise ConfigError(f"{self.strategy} pooling takes no query vector")

    @classmethod
    def create(cls, strategy: str, d_model: int, seed: int = 0) -> "PoolingConfig":
        if strategy == "query":
            rng = np.random.default_rng(seed)
            return cls(strategy, rng.normal(0.0, 0.02, (1, d_model)))
        return cls(strategy)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"pool.query": self.query_vector} if self.strategy == "query" else {}


def pool(h: HiddenStates, cfg: PoolingConfig, query: nc.Node | None = None) -> nc.Node:
    """One L2-normalized row per item in ``h``.

    ``query`` overrides ``cfg.query_vector`` with a graph node (so it can be
    trained).
    """
    counts = np.bincount(np.repeat(np.arange(h.n_items), h.lengths), weights=h.valid,
                         minlength=h.n_items)
    if np.any(counts == 0):
        raise EmptySequenceError("an item has no valid positions")
    if cfg.strategy == "eos":
        if not np.all(h.valid[h.eos_rows]):
            raise EmptySequenceError("EOS position is masked")
        pooled = nc.slice_rows(h.states, h.eos_rows)
    else:
        # drop masked rows first so padding never enters the arithmetic
        keep = np.flatnonzero(h.valid)
        states = nc.slice_rows(h.states, keep)
        seg = np.repeat(np.arange(h.n_items), h.lengths)[keep]
        member = np.zeros((h.n_items, len(keep)))
        member[seg, np.arange(len(keep))] = 1.0
        if cfg.strategy == "average":
            pooled = nc.masked_mean_rows(states, member)
        else:
            q = query if query is not None else nc.const(cfg.query_vector)
            d = states.shape[1]
            # one row of scores, replicated per item and masked outside the item
            logits = nc.scale(nc.transpose(nc.matmul(states, nc.transpose(q))), 1.0 / math.sqrt(d))
            tiled = nc.matmul(nc.const(np.ones((h.n_items, 1))), logits)
            bias = np.where(member > 0, 0.0, MASK_BIAS)
            weights = nc.softmax_rows(nc.add(tiled, nc.const(bias)))
            pooled = nc.matmul(weights, states)
    norms = np.sqrt((pooled.value ** 2).sum(axis=1))
    if np.any(norms == 0):
        raise DegenerateEmbeddingError("pooled vector has zero norm")
    return nc.l2_normalize_rows(pooled)


def pool_array(h: HiddenStates, cfg: PoolingConfig) -> np.ndarray:
    return pool(h, cfg).value
