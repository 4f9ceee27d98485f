"""Encoder + adapters + pooling + temperature, with checkpoint round-tripping."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .config import ExperimentConfig
from .encoder import (EncoderConfig, EncoderParams, SceneGrid, TokenSequence, encode_images,
                      encode_texts, read_checkpoint, write_checkpoint)
from .errors import FormatError
from .lora import LoRAAdapter, LoRASet, attach
from .objective import TemperatureConfig
from .pooling import PoolingConfig, pool

META_KEY = "meta.config"


def encoder_config(cfg: ExperimentConfig) -> EncoderConfig:
    m = cfg.model
    return EncoderConfig(m.d_model, m.n_layers, m.n_heads, m.vocab_size, m.max_len,
                         m.n_patches, m.n_features)


@dataclass
class Model:
    params: EncoderParams
    adapters: LoRASet | None
    pooling: PoolingConfig
    temperature: TemperatureConfig
    config: ExperimentConfig

    @classmethod
    def init(cls, cfg: ExperimentConfig) -> "Model":
        params = EncoderParams.init(encoder_config(cfg), cfg.model.seed)
        adapters = None
        if cfg.train.mode == "lora":
            adapters = attach(params, cfg.lora.rank, cfg.lora.alpha, cfg.lora.seed)
        pooling = PoolingConfig.create(cfg.pooling.strategy, cfg.model.d_model, cfg.pooling.seed)
        temp = TemperatureConfig("learnable" if cfg.loss.learnable_temperature else "fixed",
                                 cfg.loss.temperature)
        return cls(params, adapters, pooling, temp, cfg)

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params.tensors)
        if self.adapters is not None:
            out.update(self.adapters.tensors())
        out.update(self.pooling.tensors())
        out.update(self.temperature.tensors())
        return out

    def bindings(self, trainable=()) -> nc.Bindings:
        return nc.Bindings(self.tensors(), trainable)

    # -- graph-level forward ------------------------------------------------

    def text_embeddings(self, seqs: Sequence[TokenSequence], bind: nc.Bindings) -> nc.Node:
        h = encode_texts(self.params, self.adapters, seqs, bind)
        return pool(h, self.pooling, self._query(bind))

    def image_embeddings(self, grids: Sequence[SceneGrid], bind: nc.Bindings) -> nc.Node:
        h = encode_images(self.params, self.adapters, grids, bind)
        return pool(h, self.pooling, self._query(bind))

    def _query(self, bind):
        return bind["pool.query"] if self.pooling.strategy == "query" else None

    # -- inference ------------------------------------------------------------

    def embed_texts(self, seqs: Sequence[TokenSequence], chunk: int = 64) -> np.ndarray:
        bind = self.bindings()
        return np.concatenate([self.text_embeddings(seqs[i:i + chunk], bind).value
                               for i in range(0, len(seqs), chunk)])

    def embed_images(self, grids: Sequence[SceneGrid], chunk: int = 64) -> np.ndarray:
        bind = self.bindings()
        return np.concatenate([self.image_embeddings(grids[i:i + chunk], bind).value
                               for i in range(0, len(grids), chunk)])

    # -- persistence ------------------------------------------------------------

    def base_digest(self) -> str:
        """SHA-256 over every encoder (non-adapter) tensor."""
        return tensor_digest(self.params.tensors)

    def save(self, path):
        tensors = self.tensors()
        if self.adapters is not None:
            tensors["lora.alpha"] = np.array([[self.config.lora.alpha]])
            tensors["lora.rank"] = np.array([[float(self.config.lora.rank)]])
        blob = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        tensors[META_KEY] = np.frombuffer(blob, dtype=np.uint8).astype(np.float64)[None, :]
        write_checkpoint(path, tensors)

    @classmethod
    def load(cls, path) -> "Model":
        tensors = read_checkpoint(path)
        if META_KEY not in tensors:
            raise FormatError(f"{path}: checkpoint lacks {META_KEY}")
        blob = tensors.pop(META_KEY).astype(np.uint8).tobytes()
        cfg = ExperimentConfig.from_dict(json.loads(blob.decode("utf-8")))
        enc = encoder_config(cfg)
        base = {k: v for k, v in tensors.items()
                if not k.startswith(("lora.", "pool.", "temp."))}
        params = EncoderParams(enc, base)
        adapters = None
        if "lora.alpha" in tensors:
            alpha = float(tensors["lora.alpha"][0, 0])
            rank = int(tensors["lora.rank"][0, 0])
            adapters = LoRASet({
                t: LoRAAdapter(tensors[f"lora.{t}.A"], tensors[f"lora.{t}.B"], alpha, rank, t)
                for t in params.trunk_targets()
            })
        query = tensors.get("pool.query")
        pooling = PoolingConfig(cfg.pooling.strategy, query)
        temp = TemperatureConfig("learnable" if cfg.loss.learnable_temperature else "fixed",
                                 cfg.loss.temperature, tensors.get("temp.log_tau"))
        return cls(params, adapters, pooling, temp, cfg)


def tensor_digest(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()
