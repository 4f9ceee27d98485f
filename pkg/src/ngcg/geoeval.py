"""Retrieval metrics: Top-K recall (R@K) and localization recall (L@D)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError, GroundTruthError

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_KS = (1, 5, 10)
DEFAULT_DISTANCES = (50.0, 100.0, 150.0)


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ContractError("non-finite coordinate")
        if not -90.0 <= self.lat <= 90.0:
            raise ContractError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 < self.lon <= 180.0:
            raise ContractError(f"longitude {self.lon} outside (-180, 180]")


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on a sphere of radius 6,371 km."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def recall_at_k(ranked_ids: Sequence[Sequence[str]], truth_ids: Sequence[str], k: int,
                universe=None) -> float:
    """Fraction of queries whose ground-truth id is among the first ``k`` ranked ids.

    ``universe`` (any container of ids) is the set of ids the index could
    return; a truth id outside it is an error.
    """
    if k < 1:
        raise ContractError("K must be >= 1")
    if len(ranked_ids) != len(truth_ids):
        raise ContractError("one truth id per query is required")
    if not truth_ids:
        raise ContractError("no queries")
    if universe is not None:
        missing = [t for t in truth_ids if t not in universe]
        if missing:
            raise GroundTruthError(f"truth id {missing[0]!r} not in the index")
    hits = sum(1 for ranked, truth in zip(ranked_ids, truth_ids) if truth in ranked[:k])
    return hits / len(truth_ids)


def loc_at_d(ranked_ids: Sequence[Sequence[str]], truth_geo: Sequence[GeoPoint],
             candidate_geo: dict, d: float, truth_ids: Sequence[str] | None = None) -> float:
    """Fraction of queries whose top-1 candidate lies strictly within ``d`` meters.

    If ``truth_ids`` is given, a query also needs its top-1 to be the correct
    candidate (the stricter, conjunctive reading of the metric).
    """
    if len(ranked_ids) != len(truth_geo):
        raise ContractError("one truth location per query is required")
    if not truth_geo:
        raise ContractError("no queries")
    hits = 0
    for i, (ranked, where) in enumerate(zip(ranked_ids, truth_geo)):
        top = ranked[0]
        if top not in candidate_geo or candidate_geo[top] is None:
            raise DataError(f"candidate {top!r} has no location")
        if truth_ids is not None and top != truth_ids[i]:
            continue
        if haversine(where, candidate_geo[top]) < d:
            hits += 1
    return hits / len(truth_geo)


@dataclass
class EvalReport:
    recall: dict[int, float]
    localization: dict[float, float]
    n_queries: int
    split: str = "test"
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def is_monotone(self) -> bool:
        r = [self.recall[k] for k in sorted(self.recall)]
        l = [self.localization[d] for d in sorted(self.localization)]
        ok_range = all(0.0 <= v <= 1.0 for v in r + l)
        return ok_range and all(a <= b for a, b in zip(r, r[1:])) and \
            all(a <= b for a, b in zip(l, l[1:]))

    def row(self) -> dict[str, float]:
        out = {f"R@{k}": v for k, v in sorted(self.recall.items())}
        out.update({f"L@{d:g}": v for d, v in sorted(self.localization.items())})
        return out

    def to_json(self) -> dict:
        return {
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "localization": {f"{d:g}": v for d, v in sorted(self.localization.items())},
            "n_queries": self.n_queries,
            "split": self.split,
            "config_hash": self.config_hash,
            **self.extra,
        }

    def write(self, json_path, csv_path):
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value", "K-or-D", "split", "config-hash"])
            for k, v in sorted(self.recall.items()):
                w.writerow(["R@K", repr(v), k, self.split, self.config_hash])
            for d, v in sorted(self.localization.items()):
                w.writerow(["L@D", repr(v), f"{d:g}", self.split, self.config_hash])


def evaluate(ranked_ids: Sequence[Sequence[str]], truth_ids: Sequence[str],
             truth_geo: Sequence[GeoPoint], candidate_geo: dict, *,
             ks=DEFAULT_KS, distances=DEFAULT_DISTANCES, conjunctive: bool = False,
             split: str = "test", config_hash: str = "") -> EvalReport:
    """Compute every R@K and L@D for one query set."""
    recall = {k: recall_at_k(ranked_ids, truth_ids, k, universe=candidate_geo) for k in ks}
    strict = truth_ids if conjunctive else None
    loc = {float(d): loc_at_d(ranked_ids, truth_geo, candidate_geo, d, strict)
           for d in distances}
    return EvalReport(recall, loc, len(truth_ids), split, config_hash)


def chance_interval(n_queries: int, n_candidates: int, level: float = 0.95) -> tuple[float, float]:
    """Two-sided binomial interval for R@1 of a uniformly random ranker."""
    from scipy.stats import binom

    lo, hi = binom.interval(level, n_queries, 1.0 / n_candidates)
    return float(lo) / n_queries, float(hi) / n_queries


def top1_exact_fraction(ranked_ids, truth_ids) -> float:
    return float(np.mean([r[0] == t for r, t in zip(ranked_ids, truth_ids)]))
