"""Exact nearest-neighbour retrieval over unit-norm embeddings."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError, IdentityError
from .geoeval import GeoPoint

UNIT_TOL = 1e-9
EMB_MAGIC = b"NGCGEMB1"
META_MAGIC = b"NGCGMETA"


@dataclass(frozen=True)
class RetrievalResult:
    ids: list[str]
    scores: np.ndarray


class EmbeddingIndex:
    """Immutable candidate set: ids, unit-norm rows, and one location per id."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, geo: Sequence[GeoPoint | None]):
        self._ids = list(ids)
        vectors = np.array(vectors, dtype=np.float64)
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        self._vectors = vectors / norms
        self._vectors.setflags(write=False)
        self._geo = list(geo)
        # rank of each id in ascending id order, used to break score ties
        self._id_rank = np.empty(len(self._ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(self._ids, dtype=object), kind="stable")] = \
            np.arange(len(self._ids))

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def geo(self) -> dict[str, GeoPoint | None]:
        return dict(zip(self._ids, self._geo))

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    def __len__(self):
        return len(self._ids)

    def rank(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Top-``k`` candidate positions and scores for each row of ``queries``."""
        if k < 1:
            raise ContractError("K must be >= 1")
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if queries.shape[1] != self.dim:
            raise DimensionError(f"query dim {queries.shape[1]} != index dim {self.dim}")
        k = min(k, len(self))
        scores = queries @ self._vectors.T
        # primary key: descending score; secondary: ascending id
        tie = np.broadcast_to(self._id_rank, scores.shape)
        order = np.lexsort((tie, -scores), axis=-1)[:, :k]
        return order, np.take_along_axis(scores, order, axis=1)


def build_index(entries: Sequence[tuple[str, np.ndarray, GeoPoint | None]]) -> EmbeddingIndex:
    if not entries:
        raise ContractError("cannot index zero entries")
    ids = [e[0] for e in entries]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise IdentityError(f"duplicate id {dup!r}")
    dims = {np.asarray(e[1]).reshape(-1).shape[0] for e in entries}
    if len(dims) != 1:
        raise DimensionError(f"inconsistent embedding dims {sorted(dims)}")
    vectors = np.stack([np.asarray(e[1], dtype=np.float64).reshape(-1) for e in entries])
    if np.any(np.linalg.norm(vectors, axis=1) == 0):
        raise ContractError("zero vector cannot be indexed")
    return EmbeddingIndex(ids, vectors, [e[2] for e in entries])


def query_topk(index: EmbeddingIndex, q: np.ndarray, k: int) -> RetrievalResult:
    """The ``k`` candidates closest to ``q`` in L2, i.e. with the largest dot product."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise ContractError("query embedding is not unit-norm")
    order, scores = index.rank(q[None, :], k)
    ids = index.ids
    return RetrievalResult([ids[j] for j in order[0]], scores[0])


def query_many(index: EmbeddingIndex, queries: np.ndarray, k: int) -> list[RetrievalResult]:
    order, scores = index.rank(queries, k)
    ids = index.ids
    return [RetrievalResult([ids[j] for j in o], s) for o, s in zip(order, scores)]


# ---------------------------------------------------------------------------
# embedding file: b"NGCGEMB1", u32 N, u32 d, N*d float32 rows, then per row
# (u16 id length, UTF-8 id, f64 lat, f64 lon). An optional trailer
# (b"NGCGMETA", u32 length, UTF-8 JSON) carries provenance.


@dataclass
class EmbeddingFile:
    ids: list[str]
    vectors: np.ndarray
    geo: list[GeoPoint]
    meta: dict

    def to_index(self) -> EmbeddingIndex:
        return build_index(list(zip(self.ids, self.vectors, self.geo)))


def write_embeddings(path, ids: Sequence[str], vectors: np.ndarray, geo: Sequence[GeoPoint],
                     meta: dict | None = None):
    vectors = np.asarray(vectors)
    n, d = vectors.shape
    if len(ids) != n or len(geo) != n:
        raise DimensionError("ids, vectors and geo must have the same length")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
        for sid, g in zip(ids, geo):
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<dd", g.lat, g.lon))
        if meta:
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            fh.write(META_MAGIC + struct.pack("<I", len(blob)) + blob)


def read_embeddings(path) -> EmbeddingFile:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != EMB_MAGIC:
        raise FormatError(f"{path}: not an embedding file")
    try:
        n, d = struct.unpack_from("<II", data, 8)
        pos = 16
        vectors = np.frombuffer(data, "<f4", n * d, pos).reshape(n, d).astype(np.float32)
        pos += 4 * n * d
        ids, geo = [], []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, pos)
            ids.append(data[pos + 2:pos + 2 + ln].decode("utf-8"))
            pos += 2 + ln
            lat, lon = struct.unpack_from("<dd", data, pos)
            pos += 16
            geo.append(GeoPoint(lat, lon))
        meta = {}
        if data[pos:pos + 8] == META_MAGIC:
            (ln,) = struct.unpack_from("<I", data, pos + 8)
            meta = json.loads(data[pos + 12:pos + 12 + ln].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt embedding file") from exc
    return EmbeddingFile(ids, vectors, geo, meta)
