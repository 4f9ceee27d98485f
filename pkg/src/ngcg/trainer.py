"""Contrastive training loop for LoRA and full fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .config import ExperimentConfig
from .datagen import Corpus, generate, read_corpus
from .errors import DataError, DivergenceError, NumericError
from .geoeval import EvalReport, evaluate
from .lora import trainable_parameters
from .model import Model
from .objective import info_nce
from .retrieval import build_index

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainLog:
    config_hash: str
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    base_digest_before: str = ""
    base_digest_after: str = ""

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    @property
    def heldout_r1(self) -> list[float]:
        return [e["heldout_r1"] for e in self.epochs]

    @property
    def frozen_base_ok(self) -> bool:
        return self.base_digest_before == self.base_digest_after


def param_partition(cfg: ExperimentConfig, model: Model) -> tuple[list[str], list[str]]:
    """(trainable, frozen) tensor names for the configured fine-tuning mode."""
    names = sorted(model.tensors())
    if cfg.train.mode == "full":
        return names, []
    trainable = trainable_parameters(model.adapters, model.pooling)
    if model.temperature.learnable:
        trainable.append("temp.log_tau")
    trainable = sorted(trainable)
    frozen = [n for n in names if n not in set(trainable)]
    return trainable, frozen


class Adam:
    """Adam with decoupled weight decay; decay skips names in ``no_decay``."""

    def __init__(self, tensors: dict[str, np.ndarray], names, lr, weight_decay, no_decay=()):
        self.tensors = tensors
        self.names = list(names)
        self.lr = lr
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.m = {n: np.zeros_like(tensors[n]) for n in self.names}
        self.v = {n: np.zeros_like(tensors[n]) for n in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = ADAM_BETAS
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n in self.names:
            p, g = self.tensors[n], grads[n]
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and n not in self.no_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    d = cfg.data
    if d.corpus:
        return read_corpus(d.corpus)
    m = cfg.model
    return generate(d.scenes, d.seed, d.noise, d.latent_dim, test_fraction=d.test_fraction,
                    spacing_m=d.spacing_m, vocab_size=m.vocab_size, n_patches=m.n_patches,
                    n_features=m.n_features)


def evaluate_model(model: Model, corpus: Corpus, split: str = "test",
                   config_hash: str = "") -> EvalReport:
    """Text-to-image retrieval over one split: each text against all that split's grids."""
    part = corpus.split(split)
    ev = model.config.eval
    q = model.embed_texts(part.texts)
    s = model.embed_images(part.grids)
    index = build_index(list(zip(part.ids, s, part.geos)))
    order, _ = index.rank(q, max(ev.ks))
    ids = index.ids
    ranked = [[ids[j] for j in row] for row in order]
    return evaluate(ranked, part.ids, part.geos, index.geo, ks=ev.ks, distances=ev.distances,
                    conjunctive=ev.conjunctive_localization, split=split,
                    config_hash=config_hash)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle without replacement; a trailing batch of one item is dropped."""
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out.pop()
    return out


def train(corpus: Corpus, cfg: ExperimentConfig, *, out_ckpt=None, log_path=None,
          eval_every_epoch: bool = True) -> tuple[Model, TrainLog]:
    tc = cfg.train
    train_part = corpus.split("train")
    if len(train_part) < tc.batch_size:
        raise DataError(f"{len(train_part)} training pairs is fewer than batch size {tc.batch_size}")
    if tc.batch_size < 2:
        warnings.warn("batch size 1 gives InfoNCE no negatives", stacklevel=2)

    chash = cfg.config_hash()
    model = Model.init(cfg)
    trainable, _ = param_partition(cfg, model)
    tensors = model.tensors()
    opt = Adam(tensors, trainable, tc.lr, tc.weight_decay, no_decay={"temp.log_tau"})
    rng = np.random.default_rng(tc.seed)
    record = TrainLog(chash, base_digest_before=model.base_digest())
    sink = open(log_path, "w") if log_path else None

    def emit(rec):
        if sink:
            sink.write(json.dumps({**rec, "config_hash": chash}) + "\n")

    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(tc.epochs):
            for idx in batches(len(train_part), tc.batch_size, rng):
                bind = nc.Bindings(tensors, trainable)
                try:
                    q = model.text_embeddings([train_part.texts[i] for i in idx], bind)
                    s = model.image_embeddings([train_part.grids[i] for i in idx], bind)
                    lt = bind["temp.log_tau"] if model.temperature.learnable else None
                    loss = info_nce(q, s, model.temperature, cfg.loss.direction, log_tau=lt)
                except NumericError as exc:
                    raise DivergenceError(f"non-finite values at step {step} (epoch {epoch}): "
                                          f"{exc}") from exc
                value = float(loss.value[0, 0])
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch})")
                params = bind.params()
                grads = nc.backward(loss, params.values())
                opt.step({n: grads[node] for n, node in params.items()})
                rec = {"kind": "step", "step": step, "loss": value, "epoch": epoch}
                record.steps.append(rec)
                emit(rec)
                step += 1
            if eval_every_epoch and corpus.indices("test"):
                r1 = evaluate_model(model, corpus, "test", chash).recall[1]
                rec = {"kind": "epoch", "epoch": epoch, "heldout_r1": r1,
                       "mean_loss": float(np.mean([s["loss"] for s in record.steps
                                                   if s["epoch"] == epoch]))}
                record.epochs.append(rec)
                emit(rec)
                log.info("epoch %d  loss %.4f  held-out R@1 %.3f", epoch, rec["mean_loss"], r1)
        record.wall_clock = time.perf_counter() - start
        record.base_digest_after = model.base_digest()
        if out_ckpt:
            model.save(out_ckpt)
            record.checkpoint = str(out_ckpt)
        emit({"kind": "final", "steps": step, "wall_clock_s": record.wall_clock,
              "mode": tc.mode, "base_digest_before": record.base_digest_before,
              "base_digest_after": record.base_digest_after,
              "frozen_base_ok": record.frozen_base_ok if tc.mode == "lora" else None,
              "checkpoint": record.checkpoint})
    except DivergenceError as exc:
        emit({"kind": "abort", "step": step, "error": str(exc)})
        raise
    finally:
        if sink:
            sink.close()
    return model, record
