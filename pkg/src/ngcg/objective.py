"""In-batch InfoNCE over paired query/satellite embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, EmptyBatchError, NormalizationError

UNIT_TOL = 1e-9
DIRECTIONS = ("t2i", "symmetric")


@dataclass
class TemperatureConfig:
    """Fixed or learnable softmax temperature.

    In learnable mode the trainable quantity is ``log_tau`` (1x1), so the
    temperature stays positive whatever the optimizer does.
    """

    mode: str = "fixed"
    value: float = 0.03
    log_tau: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("fixed", "learnable"):
            raise ConfigError(f"unknown temperature mode {self.mode!r}")
        if not (self.value > 0 and math.isfinite(self.value)):
            raise ConfigError(f"temperature must be positive, got {self.value}")
        if self.mode == "learnable" and self.log_tau is None:
            self.log_tau = np.array([[math.log(self.value)]])

    @property
    def learnable(self) -> bool:
        return self.mode == "learnable"

    def tensors(self) -> dict[str, np.ndarray]:
        return {"temp.log_tau": self.log_tau} if self.learnable else {}


def temperature_value(temp: TemperatureConfig) -> float:
    if temp.learnable:
        return float(np.exp(temp.log_tau[0, 0]))
    return temp.value


def _check_batch(q: nc.Node, s: nc.Node):
    if q.shape[0] == 0 or s.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    if q.shape != s.shape:
        raise NormalizationError(f"query batch {q.shape} and satellite batch {s.shape} differ")
    for name, node in (("query", q), ("satellite", s)):
        norms = np.sqrt((node.value ** 2).sum(axis=1))
        if np.max(np.abs(norms - 1.0)) > UNIT_TOL:
            raise NormalizationError(f"{name} embeddings are not unit-norm")


def info_nce(q, s, temp: TemperatureConfig | float = 0.03, direction: str = "symmetric",
             log_tau: nc.Node | None = None) -> nc.Node:
    """Mean cross-entropy of each query against all ``B`` in-batch satellites.

    Row ``i`` of ``q`` is paired with row ``i`` of ``s``. ``symmetric`` also
    adds the satellite-to-text term and averages the two. For a learnable
    temperature pass the log-temperature node as ``log_tau`` to train it.
    """
    q, s = nc._lift(q), nc._lift(s)
    _check_batch(q, s)
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown loss direction {direction!r}")
    if isinstance(temp, (int, float)):
        temp = TemperatureConfig("fixed", float(temp))
    sims = nc.matmul(q, nc.transpose(s))
    if temp.learnable:
        lt = log_tau if log_tau is not None else nc.const(temp.log_tau)
        logits = nc.mul(sims, nc.exp(nc.scale(lt, -1.0)))
    else:
        logits = nc.scale(sims, 1.0 / temp.value)
    n = q.shape[0]
    eye = np.eye(n)
    t2i = nc.scale(nc.total(nc.mul(nc.log_softmax_rows(logits), eye)), -1.0 / n)
    if direction == "t2i":
        return t2i
    i2t = nc.scale(nc.total(nc.mul(nc.log_softmax_rows(nc.transpose(logits)), eye)), -1.0 / n)
    return nc.scale(nc.add(t2i, i2t), 0.5)
