"""Finite-difference verification of every operator and of the full training loss.

The composite check runs InfoNCE through a small encoder (same code path as
training, reduced sizes) so that every backward rule is exercised in context.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .encoder import EncoderConfig, EncoderParams, SceneGrid, TokenSequence, encode_images, encode_texts
from .geoeval import GeoPoint
from .lora import attach
from .objective import TemperatureConfig, info_nce
from .pooling import PoolingConfig, pool

STEP = 1e-5
TOL = 1e-4
TINY = EncoderConfig(d_model=8, n_layers=2, n_heads=2, vocab_size=16, max_len=8,
                     n_patches=3, n_features=2)


def operator_cases(rng: np.random.Generator) -> dict:
    """name -> (builder, input arrays); inputs drawn uniformly from [-1, 1]."""

    def u(*shape):
        return rng.uniform(-1.0, 1.0, shape)

    a34, b34, b43 = u(3, 4), u(3, 4), u(4, 3)
    pos = rng.uniform(0.2, 2.0, (3, 4))
    ids = np.array([0, 2, 2, 4, 1])
    member = np.array([[1, 1, 0], [0, 1, 1]], dtype=float)
    return {
        "matmul": (lambda p: nc.matmul(p[0], p[1]), [a34, b43]),
        "add": (lambda p: nc.add(p[0], p[1]), [a34, b34]),
        "add-row-broadcast": (lambda p: nc.add(p[0], p[1]), [a34, u(1, 4)]),
        "scale": (lambda p: nc.scale(p[0], -1.7), [a34]),
        "elementwise-mul": (lambda p: nc.mul(p[0], p[1]), [a34, b34]),
        "elementwise-mul-scalar": (lambda p: nc.mul(p[0], p[1]), [a34, u(1, 1)]),
        "softmax-rows": (lambda p: nc.softmax_rows(p[0]), [a34]),
        "log-softmax-rows": (lambda p: nc.log_softmax_rows(p[0]), [a34]),
        "layernorm": (lambda p: nc.layernorm(p[0], p[1], p[2]), [a34, u(1, 4), u(1, 4)]),
        "gelu": (lambda p: nc.gelu(p[0]), [a34]),
        "embedding-lookup": (lambda p: nc.embedding_lookup(p[0], ids), [u(5, 4)]),
        "masked-mean-rows": (lambda p: nc.masked_mean_rows(p[0], member), [a34]),
        "concat-rows": (lambda p: nc.concat_rows([p[0], p[1]]), [a34, u(1, 4)]),
        "slice-row": (lambda p: nc.slice_rows(p[0], [2, 0, 2]), [a34]),
        "dot": (lambda p: nc.dot(p[0], p[1]), [a34, b34]),
        "log": (lambda p: nc.log(p[0]), [pos]),
        "exp": (lambda p: nc.exp(p[0]), [a34]),
        "l2-normalize-rows": (lambda p: nc.l2_normalize_rows(p[0]), [a34]),
        "transpose": (lambda p: nc.transpose(p[0]), [a34]),
        "sum": (lambda p: nc.total(p[0]), [a34]),
    }


def check_operator(name: str, seed: int) -> nc.GradcheckReport:
    rng = np.random.default_rng(seed)
    build, arrays = operator_cases(rng)[name]
    # a fixed random weighting makes every output entry matter to the scalar
    weight = rng.uniform(-1.0, 1.0, build([nc.const(a) for a in arrays]).shape)
    return nc.gradcheck(lambda p: nc.dot(build(p), nc.const(weight)), arrays,
                        step=STEP, tol=TOL, seed=seed)


def tiny_batch(rng: np.random.Generator, n: int = 4, cfg: EncoderConfig = TINY):
    texts = []
    for _ in range(n):
        length = int(rng.integers(1, cfg.max_len - 1))
        texts.append(TokenSequence.from_body(rng.integers(2, cfg.vocab_size, length).tolist(),
                                             pad_to=cfg.max_len))
    geo = GeoPoint(0.0, 0.0)
    grids = [SceneGrid(rng.uniform(-1, 1, (cfg.n_patches, cfg.n_features)), geo) for _ in range(n)]
    return texts, grids


@dataclass
class CompositeResult:
    report: nc.GradcheckReport
    frozen_zero: dict[str, bool] = field(default_factory=dict)


def composite_check(seed: int, mode: str = "lora", strategy: str = "eos",
                    learnable: bool = False, max_entries: int | None = None) -> CompositeResult:
    """InfoNCE through the encoder; lora mode also reports frozen-base gradients."""
    rng = np.random.default_rng(seed)
    params = EncoderParams.init(TINY, seed)
    lora = None
    tensors = dict(params.tensors)
    if mode == "lora":
        lora = attach(params, 2, 4.0, seed + 1)
        for ad in lora.adapters.values():
            # non-zero B so that gradients reach A as well
            ad.B[:] = rng.normal(0.0, 0.3, ad.B.shape)
        tensors.update(lora.tensors())
    pooling = PoolingConfig.create(strategy, TINY.d_model, seed)
    tensors.update(pooling.tensors())
    temp = TemperatureConfig("learnable" if learnable else "fixed", 0.07)
    tensors.update(temp.tensors())
    texts, grids = tiny_batch(rng)

    if mode == "lora":
        names = sorted(lora.tensors())
    else:
        names = sorted(n for n in params.tensors)
    if strategy == "query":
        names.append("pool.query")
    if learnable:
        names.append("temp.log_tau")
    frozen = [n for n in params.tensors if n not in names]
    seen = {}

    def loss_of(nodes):
        bind = nc.Bindings(tensors)
        for n, node in zip(names, nodes):
            bind.bind(n, node)
        query = bind["pool.query"] if strategy == "query" else None
        q = pool(encode_texts(params, lora, texts, bind), pooling, query)
        s = pool(encode_images(params, lora, grids, bind), pooling, query)
        lt = bind["temp.log_tau"] if learnable else None
        seen["bind"] = bind
        return info_nce(q, s, temp, "symmetric", log_tau=lt)

    report = nc.gradcheck(loss_of, [tensors[n] for n in names], step=STEP, tol=TOL,
                          names=names, max_entries=max_entries, seed=seed)
    result = CompositeResult(report)
    if mode == "lora":
        # rebuild once and ask for gradients on the very nodes the base matrices used
        loss = loss_of([nc.param(tensors[n], n) for n in names])
        bind = seen["bind"]
        used = [bind[n] for n in frozen]
        grads = nc.backward(loss, used)
        result.frozen_zero = {n: bool(np.all(grads[node] == 0)) for n, node in zip(frozen, used)}
    return result


@dataclass
class SuiteResult:
    lines: list[str]
    passed: bool
    seconds: float


def run_suite(seeds=(0,), inject_bug: str | None = None, composite: bool = True) -> SuiteResult:
    """Every operator at every seed, then the InfoNCE-through-encoder composites."""
    start = time.perf_counter()
    lines, ok = [], True
    with contextlib.ExitStack() as stack:
        if inject_bug:
            stack.enter_context(nc.faulty_backward(inject_bug))
        for seed in seeds:
            for name in operator_cases(np.random.default_rng(0)):
                rep = check_operator(name, seed)
                ok &= rep.passed
                worst = max(c.max_rel_error for c in rep.checks)
                lines.append(f"op {name} seed={seed}: {'PASS' if rep.passed else 'FAIL'} "
                             f"max_rel_err={worst:.3e}")
            if not composite:
                continue
            for label, kw in (("lora/eos", {"max_entries": 8}),
                              ("full/query/learnable-tau", {"mode": "full", "strategy": "query",
                                                            "learnable": True, "max_entries": 4})):
                res = composite_check(seed, **kw)
                ok &= res.report.passed
                lines.extend(res.report.lines(prefix=f"infonce[{label}] seed={seed} "))
                for n, zero in sorted(res.frozen_zero.items()):
                    ok &= zero
                    lines.append(f"frozen {n} seed={seed}: grad {'zero' if zero else 'NONZERO'}")
    return SuiteResult(lines, ok, time.perf_counter() - start)
