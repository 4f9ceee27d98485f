"""Deterministic synthetic cross-view corpus.

Each scene has a latent vector ``z`` in [-1, 1]^m drawn from the lattice of
bucket centres, with no two scenes sharing a code. Its "ground text" names
the bucket of every latent factor (one token per factor, in factor order),
repeats that sequence cyclically up to a random length, and ends with filler. Its "satellite image" is
a fixed smooth nonlinear map of ``z`` onto a P x F patch grid, plus Gaussian
noise. Scenes sit on a jittered lat/lon lattice.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .encoder import SceneGrid, TokenSequence
from .errors import ConfigError, DataError
from .geoeval import EARTH_RADIUS_M, GeoPoint

N_BUCKETS = 8
FACTOR_BASE = 2  # token ids below this are PAD and EOS
N_FILLER_SLOTS = 4
MAX_BODY = 24
ORIGIN = (40.70, -74.00)
# the latent-to-grid map is a property of the synthetic "world", not of a corpus seed
WORLD_SEED = 1652


@dataclass
class Scene:
    id: str
    z: np.ndarray
    geo: GeoPoint
    split: str


@dataclass
class Corpus:
    scenes: list[Scene]
    texts: list[TokenSequence]
    grids: list[SceneGrid]

    def __len__(self):
        return len(self.scenes)

    def indices(self, split: str | None) -> list[int]:
        if split in (None, "all"):
            return list(range(len(self.scenes)))
        if split not in ("train", "test"):
            raise DataError(f"unknown split {split!r}")
        return [i for i, s in enumerate(self.scenes) if s.split == split]

    def subset(self, idx) -> "Corpus":
        return Corpus([self.scenes[i] for i in idx], [self.texts[i] for i in idx],
                      [self.grids[i] for i in idx])

    def split(self, name: str) -> "Corpus":
        return self.subset(self.indices(name))

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.scenes]

    @property
    def geos(self) -> list[GeoPoint]:
        return [s.geo for s in self.scenes]


def filler_range(vocab_size: int, m: int) -> tuple[int, int]:
    lo = FACTOR_BASE + m * N_BUCKETS
    if lo >= vocab_size:
        raise ConfigError(f"vocabulary of {vocab_size} cannot hold {m} factors")
    return lo, vocab_size


def quantize(z: np.ndarray) -> np.ndarray:
    return np.minimum(((z + 1.0) / 2.0 * N_BUCKETS).astype(np.int64), N_BUCKETS - 1)


def bucket_centres(codes: np.ndarray) -> np.ndarray:
    return -1.0 + (2.0 * codes + 1.0) / N_BUCKETS


def sample_codes(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct bucket codes in {0..7}^m, so scene -> (text, grid) is injective."""
    if n > N_BUCKETS ** m:
        raise ConfigError(f"{n} scenes exceed the {N_BUCKETS ** m} distinct latent codes")
    codes = rng.integers(0, N_BUCKETS, (n, m))
    seen = set()
    for i in range(n):
        while tuple(codes[i]) in seen:
            codes[i] = rng.integers(0, N_BUCKETS, m)
        seen.add(tuple(codes[i]))
    return codes


def world_map(m: int, n_patches: int, n_features: int):
    """Smooth injective map from a latent vector to a patch grid.

    Patch ``p`` depicts factor ``p mod m`` as a population code: feature ``k``
    is a Gaussian bump over that factor, centred near a bucket centre with
    patch-specific jitter, width and gain.
    """
    rng = np.random.default_rng(WORLD_SEED + 1000 * m)
    base = -1.0 + (2.0 * np.arange(n_features) + 1.0) / n_features
    centre = base[None, :] + rng.normal(0.0, 0.03, (n_patches, n_features))
    width = rng.uniform(0.12, 0.2, (n_patches, n_features))
    gain = rng.uniform(0.8, 1.2, (n_patches, n_features))
    factor = np.arange(n_patches) % m

    def apply(z: np.ndarray) -> np.ndarray:
        dz = z[factor][:, None] - centre
        return gain * np.exp(-0.5 * (dz / width) ** 2)

    return apply


def lattice(n: int, spacing_m: float, rng: np.random.Generator) -> list[GeoPoint]:
    """Jittered square lattice whose points are at least ``spacing_m`` apart."""
    cols = math.ceil(math.sqrt(n))
    step = 1.5 * spacing_m
    jitter = 0.2 * spacing_m
    m_per_deg_lat = EARTH_RADIUS_M * math.pi / 180.0
    m_per_deg_lon = m_per_deg_lat * math.cos(math.radians(ORIGIN[0] + (n // cols + 1) * step / m_per_deg_lat))
    out = []
    for i in range(n):
        r, c = divmod(i, cols)
        dy, dx = rng.uniform(-jitter, jitter, 2)
        out.append(GeoPoint(ORIGIN[0] + (r * step + dy) / m_per_deg_lat,
                            ORIGIN[1] + (c * step + dx) / m_per_deg_lon))
    return out


def generate(n_scenes: int, seed: int, noise: float = 0.05, m: int = 8, *,
             test_fraction: float = 0.2, spacing_m: float = 200.0, vocab_size: int = 256,
             n_patches: int = 16, n_features: int = 8) -> Corpus:
    if n_scenes < 2:
        raise ConfigError("need at least 2 scenes")
    if not noise >= 0:
        raise ConfigError("noise must be >= 0")
    if m < 1 or m + N_FILLER_SLOTS > MAX_BODY:
        raise ConfigError(f"latent dimension {m} out of range")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must be in (0, 1)")
    if not spacing_m > 0:
        raise ConfigError("spacing must be positive")
    lo, hi = filler_range(vocab_size, m)
    rng = np.random.default_rng(seed)
    grid_of = world_map(m, n_patches, n_features)

    z_all = bucket_centres(sample_codes(n_scenes, m, rng))
    geos = lattice(n_scenes, spacing_m, rng)
    n_test = max(1, int(round(test_fraction * n_scenes)))
    test_idx = set(rng.permutation(n_scenes)[:n_test].tolist())

    scenes, texts, grids = [], [], []
    min_body = m + N_FILLER_SLOTS
    for i in range(n_scenes):
        z = z_all[i]
        factor_tokens = FACTOR_BASE + np.arange(m) * N_BUCKETS + quantize(z)
        body_len = int(rng.integers(min_body, MAX_BODY + 1))
        filler = rng.integers(lo, hi, size=N_FILLER_SLOTS)
        # every factor in order, then the sequence again from the start, then filler;
        # a factor's token always sits at the same offsets mod m
        repeats = np.resize(factor_tokens, body_len - min_body)
        body = np.concatenate([factor_tokens, repeats, filler])
        texts.append(TokenSequence.from_body(body.tolist()))
        patches = grid_of(z)
        if noise > 0:
            patches = patches + rng.normal(0.0, noise, patches.shape)
        grids.append(SceneGrid(patches, geos[i]))
        scenes.append(Scene(f"scene-{i:05d}", z, geos[i], "test" if i in test_idx else "train"))
    return Corpus(scenes, texts, grids)


# ---------------------------------------------------------------------------
# JSON Lines corpus file


def write_corpus(corpus: Corpus, path, config_hash: str | None = None):
    with open(path, "w") as fh:
        for scene, text, grid in zip(corpus.scenes, corpus.texts, corpus.grids):
            rec = {
                "id": scene.id,
                "split": scene.split,
                "lat": scene.geo.lat,
                "lon": scene.geo.lon,
                "tokens": text.tokens.tolist(),
                "eos_index": int(text.eos_index),
                "grid": grid.patches.tolist(),
            }
            if config_hash:
                rec["config_hash"] = config_hash
            fh.write(json.dumps(rec) + "\n")


def read_corpus(path) -> Corpus:
    scenes, texts, grids = [], [], []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                geo = GeoPoint(float(rec["lat"]), float(rec["lon"]))
                text = TokenSequence(np.array(rec["tokens"]), int(rec["eos_index"]))
                grid = SceneGrid(np.array(rec["grid"], dtype=np.float64), geo)
                split = rec["split"]
                sid = rec["id"]
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
            if split not in ("train", "test"):
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            if sid in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {sid!r}")
            seen.add(sid)
            # latent factors are not stored; keep an empty placeholder
            scenes.append(Scene(sid, np.zeros(0), geo, split))
            texts.append(text)
            grids.append(grid)
    if not scenes:
        raise DataError(f"{path}: empty corpus")
    return Corpus(scenes, texts, grids)
