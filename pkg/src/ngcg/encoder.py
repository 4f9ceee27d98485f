"""Shared-trunk transformer encoder for token sequences and patch grids.

Text and image inputs differ only in their embedders (token table vs. patch
projection); both then run through the same pre-layernorm transformer trunk
with bidirectional, padding-masked attention.

Several inputs are packed row-wise into one matrix per forward pass; an
additive block mask keeps items from attending to each other.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import DimensionError, FormatError, LengthError, VocabularyError
from .geoeval import GeoPoint
from .lora import LoRASet, adapted_linear

PAD_ID = 0
EOS_ID = 1
MASK_BIAS = -1e30
GROUP_ROWS = 96

TRUNK_MATRICES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2")


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 256
    max_len: int = 64
    n_patches: int = 16
    n_features: int = 8

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise DimensionError("d_model must be divisible by n_heads")
        if self.n_patches + 1 > self.max_len:
            raise LengthError("image sequence (patches + EOS) exceeds max_len")


@dataclass
class TokenSequence:
    """Token ids with an EOS at ``eos_index``; positions after it are padding."""

    tokens: np.ndarray
    eos_index: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if len(self.tokens) < 1:
            raise LengthError("empty token sequence")
        if not 0 <= self.eos_index < len(self.tokens):
            raise LengthError(f"eos_index {self.eos_index} outside sequence of {len(self.tokens)}")
        if self.tokens[self.eos_index] != EOS_ID:
            raise VocabularyError("token at eos_index is not EOS")

    @classmethod
    def from_body(cls, body: Sequence[int], pad_to: int = 0) -> "TokenSequence":
        toks = list(body) + [EOS_ID]
        eos = len(toks) - 1
        toks += [PAD_ID] * max(0, pad_to - len(toks))
        return cls(np.array(toks), eos)

    @property
    def mask(self) -> np.ndarray:
        return (np.arange(len(self.tokens)) <= self.eos_index).astype(np.int8)

    def __len__(self):
        return len(self.tokens)


@dataclass
class SceneGrid:
    patches: np.ndarray
    geo: GeoPoint | None = None

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2:
            raise DimensionError("patch grid must be P x F")
        nc._check_finite(self.patches, "scene grid")


@dataclass
class HiddenStates:
    """Last-layer states of one or more packed inputs.

    ``lengths[i]`` rows belong to item ``i``; ``valid`` marks unmasked rows and
    ``eos_rows`` gives each item's EOS row within the packed matrix.
    """

    states: nc.Node
    lengths: np.ndarray
    valid: np.ndarray
    eos_rows: np.ndarray

    @property
    def value(self) -> np.ndarray:
        return self.states.value

    @property
    def n_items(self) -> int:
        return len(self.lengths)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)

    def membership(self) -> np.ndarray:
        """(items x rows) 0/1 matrix of valid rows per item."""
        seg = np.repeat(np.arange(self.n_items), self.lengths)
        m = np.zeros((self.n_items, len(seg)))
        m[seg, np.arange(len(seg))] = self.valid
        return m

    def item(self, i: int) -> np.ndarray:
        start = self.offsets[i]
        return self.value[start:start + self.lengths[i]]


class EncoderParams:
    """Named float64 tensors of the encoder, plus its configuration."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: EncoderConfig, seed: int) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        d = config.d_model
        trunk = 1.0 / math.sqrt(d)
        t: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0.0, 0.02, (config.vocab_size, d)),
            "pos_emb": rng.normal(0.0, 0.02, (config.max_len, d)),
            "patch_proj": rng.normal(0.0, 0.02, (config.n_features, d)),
        }
        for i in range(config.n_layers):
            p = f"layers.{i}."
            t[p + "ln1.gain"] = np.ones((1, d))
            t[p + "ln1.bias"] = np.zeros((1, d))
            for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
                t[p + name] = rng.normal(0.0, trunk, (d, d))
            t[p + "ln2.gain"] = np.ones((1, d))
            t[p + "ln2.bias"] = np.zeros((1, d))
            t[p + "mlp.w1"] = rng.normal(0.0, trunk, (d, 4 * d))
            t[p + "mlp.w2"] = rng.normal(0.0, trunk, (4 * d, d))
        t["ln_f.gain"] = np.ones((1, d))
        t["ln_f.bias"] = np.zeros((1, d))
        return cls(config, t)

    def trunk_targets(self) -> list[str]:
        return [f"layers.{i}.{m}" for i in range(self.config.n_layers) for m in TRUNK_MATRICES]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def default_bindings(params: EncoderParams, adapters: LoRASet | None,
                     extra: dict | None = None, trainable=()) -> nc.Bindings:
    tensors = dict(params.tensors)
    if adapters is not None:
        tensors.update(adapters.tensors())
    if extra:
        tensors.update(extra)
    return nc.Bindings(tensors, trainable)


def _linear(x, name, bind, adapters):
    if adapters is not None and name in adapters:
        ad = adapters[name]
        return adapted_linear(x, bind[name], bind[f"lora.{name}.A"], bind[f"lora.{name}.B"],
                              ad.scaling)
    return nc.matmul(x, bind[name])


def _head_selectors(d: int, n_heads: int) -> list[np.ndarray]:
    dh = d // n_heads
    eye = np.eye(d)
    return [eye[:, h * dh:(h + 1) * dh] for h in range(n_heads)]


def _attention_bias(lengths, valid) -> np.ndarray:
    seg = np.repeat(np.arange(len(lengths)), lengths)
    allowed = (seg[:, None] == seg[None, :]) & valid[None, :].astype(bool)
    return np.where(allowed, 0.0, MASK_BIAS)


def _attention_groups(lengths, valid, max_rows=GROUP_ROWS):
    """Split packed items into runs of whole items of at most ``max_rows`` rows.

    Attention is block diagonal across items, so each run can be attended
    separately; this keeps the score matrices small.
    """
    groups, start, items = [], 0, []
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    for i, n in enumerate(lengths):
        if items and offsets[i] + n - start > max_rows:
            end = offsets[i]
            groups.append((np.arange(start, end),
                           _attention_bias(lengths[items[0]:i], valid[start:end])))
            start, items = end, []
        items.append(i)
    end = offsets[-1]
    groups.append((np.arange(start, end), _attention_bias(lengths[items[0]:], valid[start:end])))
    return groups


def _attend(q, k, v, bias, selectors, inv_sqrt):
    mixed = None
    bias_node = nc.const(bias)
    for sel in selectors:
        qh, kh, vh = nc.matmul(q, sel), nc.matmul(k, sel), nc.matmul(v, sel)
        scores = nc.add(nc.scale(nc.matmul(qh, nc.transpose(kh)), inv_sqrt), bias_node)
        head = nc.matmul(nc.matmul(nc.softmax_rows(scores), vh), sel.T)
        mixed = head if mixed is None else nc.add(mixed, head)
    return mixed


def _trunk(x: nc.Node, cfg: EncoderConfig, bind, adapters, lengths, valid) -> nc.Node:
    selectors = _head_selectors(cfg.d_model, cfg.n_heads)
    inv_sqrt = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    groups = _attention_groups(lengths, valid)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = nc.layernorm(x, bind[p + "ln1.gain"], bind[p + "ln1.bias"])
        q = _linear(h, p + "attn.wq", bind, adapters)
        k = _linear(h, p + "attn.wk", bind, adapters)
        v = _linear(h, p + "attn.wv", bind, adapters)
        if len(groups) == 1:
            mixed = _attend(q, k, v, groups[0][1], selectors, inv_sqrt)
        else:
            mixed = nc.concat_rows([
                _attend(nc.slice_rows(q, rows), nc.slice_rows(k, rows), nc.slice_rows(v, rows),
                        bias, selectors, inv_sqrt)
                for rows, bias in groups])
        x = nc.add(x, _linear(mixed, p + "attn.wo", bind, adapters))
        h = nc.layernorm(x, bind[p + "ln2.gain"], bind[p + "ln2.bias"])
        h = nc.gelu(_linear(h, p + "mlp.w1", bind, adapters))
        x = nc.add(x, _linear(h, p + "mlp.w2", bind, adapters))
    return nc.layernorm(x, bind["ln_f.gain"], bind["ln_f.bias"])


def encode_texts(params: EncoderParams, adapters: LoRASet | None,
                 seqs: Sequence[TokenSequence], bind: nc.Bindings | None = None) -> HiddenStates:
    cfg = params.config
    if not seqs:
        raise LengthError("no sequences to encode")
    for s in seqs:
        if len(s) > cfg.max_len:
            raise LengthError(f"sequence length {len(s)} exceeds {cfg.max_len}")
        if s.tokens.min() < 0 or s.tokens.max() >= cfg.vocab_size:
            raise VocabularyError(f"token id outside [0, {cfg.vocab_size})")
    bind = bind or default_bindings(params, adapters)
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    valid = np.concatenate([s.mask for s in seqs]).astype(bool)
    ids = np.concatenate([s.tokens for s in seqs])
    positions = np.concatenate([np.arange(len(s)) for s in seqs])
    x = nc.add(nc.embedding_lookup(bind["tok_emb"], ids), nc.slice_rows(bind["pos_emb"], positions))
    out = _trunk(x, cfg, bind, adapters, lengths, valid)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    eos_rows = offsets + np.array([s.eos_index for s in seqs])
    return HiddenStates(out, lengths, valid, eos_rows.astype(np.int64))


def encode_text(params, adapters, seq: TokenSequence, bind=None) -> HiddenStates:
    return encode_texts(params, adapters, [seq], bind)


def encode_images(params: EncoderParams, adapters: LoRASet | None,
                  grids: Sequence[SceneGrid], bind: nc.Bindings | None = None) -> HiddenStates:
    """Project patches to the model width, append an EOS row, run the shared trunk."""
    cfg = params.config
    if not grids:
        raise DimensionError("no grids to encode")
    P, F = cfg.n_patches, cfg.n_features
    for g in grids:
        if g.patches.shape != (P, F):
            raise DimensionError(f"grid shape {g.patches.shape} != ({P}, {F})")
    bind = bind or default_bindings(params, adapters)
    n = len(grids)
    raw = np.concatenate([g.patches for g in grids], axis=0)
    patch_rows = nc.matmul(nc.const(raw), bind["patch_proj"])
    eos_rows = nc.embedding_lookup(bind["tok_emb"], np.full(n, EOS_ID))
    stacked = nc.concat_rows([patch_rows, eos_rows])
    # interleave: item i = its P patch rows followed by its EOS row
    order = np.concatenate([np.r_[np.arange(i * P, (i + 1) * P), n * P + i] for i in range(n)])
    seq = nc.slice_rows(stacked, order)
    positions = np.tile(np.arange(P + 1), n)
    x = nc.add(seq, nc.slice_rows(bind["pos_emb"], positions))
    lengths = np.full(n, P + 1, dtype=np.int64)
    valid = np.ones(n * (P + 1), dtype=bool)
    out = _trunk(x, cfg, bind, adapters, lengths, valid)
    return HiddenStates(out, lengths, valid, np.arange(n, dtype=np.int64) * (P + 1) + P)


def encode_image(params, adapters, grid: SceneGrid, bind=None) -> HiddenStates:
    return encode_images(params, adapters, [grid], bind)


# ---------------------------------------------------------------------------
# checkpoint file: b"NGCGCKPT", u32 version, then named float64 tensors to EOF

CKPT_MAGIC = b"NGCGCKPT"
CKPT_VERSION = 1


def write_checkpoint(path, tensors: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8")
            if arr.ndim != 2:
                raise DimensionError(f"tensor {name} is not a matrix")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            size = rows * cols * 8
            if pos + size > len(data):
                raise FormatError(f"{path}: truncated tensor {name}")
            out[name] = np.frombuffer(data, "<f8", rows * cols, pos).reshape(rows, cols).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    return out
