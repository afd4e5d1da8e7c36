"""Pseudo-label targets: mini-batch k-means over reference-encoder features."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import DEFAULT_FPS, IntegrityError, Utterance
from .encoder import Encoder, FrameBatch
from .mixture import ConfigError
from .tensor import ShapeError, no_grad

logger = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"MLCB"
CODEBOOK_VERSION = 1
RAW_LAYER = -1


@dataclass
class KMeansConfig:
    n_clusters: int = 100
    batch_size: int = 10_000
    seeds: list[int] = field(default_factory=lambda: list(range(20)))
    max_iter: int = 20
    validation_fraction: float = 0.1
    budget_hours: float = 50.0
    fps: float = DEFAULT_FPS

    def validate(self) -> None:
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if self.batch_size < self.n_clusters:
            raise ConfigError(f"minibatch size {self.batch_size} is smaller than K={self.n_clusters}")
        if not self.seeds:
            raise ConfigError("at least one k-means seed is required")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")

    @property
    def budget_frames(self) -> int:
        return int(round(self.budget_hours * 3600.0 * self.fps))


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, d)
    layer: int = RAW_LAYER
    seed: int = 0
    inertia: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ConfigError(f"codebook needs (K>=1, d) centroids, got {self.centroids.shape}")
        if not np.isfinite(self.centroids).all():
            raise ConfigError("codebook centroids must be finite")

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


# -- distances ------------------------------------------------------------------


def squared_distances(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact ``||x_i - c_k||^2`` by explicit differences (no expansion trick)."""
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s : s + chunk, None, :] - c[None, :, :]
        out[s : s + chunk] = np.einsum("ikd,ikd->ik", diff, diff)
    return out


def assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per point; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != centroids.shape[1]:
        raise ShapeError(f"points {points.shape} do not match centroid dim {centroids.shape[1]}")
    return squared_distances(points, centroids).argmin(axis=1)


def inertia(points: np.ndarray, centroids: np.ndarray) -> float:
    return float(squared_distances(points, centroids).min(axis=1).sum())


# -- fitting ------------------------------------------------------------------------


def kmeanspp_init(points: np.ndarray, k: int, seed: int | np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first centre uniform, later ones with prob. ∝ D(x)^2."""
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if m < k:
        raise ConfigError(f"k-means++ needs at least K={k} points, got {m}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = [int(rng.integers(m))]
    d2 = squared_distances(points, points[chosen]).ravel()
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            # all remaining mass is on duplicates; pick an unused index
            free = np.setdiff1d(np.arange(m), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        d2 = np.minimum(d2, squared_distances(points, points[idx : idx + 1]).ravel())
    return points[chosen].copy()


def _minibatch_run(train: np.ndarray, cfg: KMeansConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m = train.shape[0]
    init_size = min(m, max(3 * cfg.batch_size, cfg.n_clusters))
    init_idx = rng.choice(m, size=init_size, replace=False) if init_size < m else np.arange(m)
    centroids = kmeanspp_init(train[init_idx], cfg.n_clusters, rng)
    counts = np.zeros(cfg.n_clusters)
    bs = min(cfg.batch_size, m)
    steps = cfg.max_iter * max(1, int(np.ceil(m / bs)))
    for _ in range(steps):
        batch = train[rng.choice(m, size=bs, replace=False)] if bs < m else train
        centroids, counts = minibatch_step(centroids, counts, batch)
    return centroids


def minibatch_step(centroids: np.ndarray, counts: np.ndarray, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Assign a minibatch, then move each centre by c += (x - c) / n_c per point.

    Applying that per-point update for every point of a cluster is the same as
    a running mean, which is what is computed here.
    """
    labels = assign(batch, centroids)
    k = centroids.shape[0]
    hits = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, batch)
    new_counts = counts + hits
    moved = hits > 0
    out = centroids.copy()
    out[moved] = (centroids[moved] * counts[moved, None] + sums[moved]) / new_counts[moved, None]
    return out, new_counts


def _reseed_empty(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    centroids = centroids.copy()
    while True:
        d = squared_distances(points, centroids)
        labels = d.argmin(axis=1)
        empty = np.setdiff1d(np.arange(centroids.shape[0]), labels)
        if empty.size == 0:
            return centroids
        far = int(d.min(axis=1).argmax())
        if d[far].min() == 0.0:
            return centroids
        logger.warning("k-means: centroid %d is empty; re-seeding from the farthest point", empty[0])
        centroids[empty[0]] = points[far]


def minibatch_kmeans_fit(
    frames: np.ndarray | Iterable[np.ndarray],
    config: KMeansConfig,
    layer: int = RAW_LAYER,
    split_seed: int = 0,
) -> Codebook:
    """Fit one codebook per seed and keep the one with the lowest held-out inertia."""
    config.validate()
    if not isinstance(frames, np.ndarray):
        frames = np.concatenate([np.asarray(f, dtype=np.float64) for f in frames], axis=0)
    frames = np.asarray(frames, dtype=np.float64)
    m = frames.shape[0]
    n_val = int(round(config.validation_fraction * m))
    if m - n_val < config.n_clusters:
        n_val = max(0, m - config.n_clusters)
    if m < config.n_clusters or len(np.unique(frames, axis=0)) < config.n_clusters:
        raise ConfigError(f"need at least K={config.n_clusters} distinct frames, got {m} frames")
    perm = np.random.default_rng(split_seed).permutation(m)
    val = frames[perm[:n_val]]
    train = frames[perm[n_val:]]
    scored = val if n_val > 0 else train
    runs = []
    for seed in config.seeds:
        c = _reseed_empty(train, _minibatch_run(train, config, seed))
        runs.append((inertia(scored, c), seed, c))
        logger.debug("k-means seed %d: held-out inertia %.6g", seed, runs[-1][0])
    best = min(runs, key=lambda r: (r[0], config.seeds.index(r[1])))
    meta = {
        "seed_inertias": {str(s): float(i) for i, s, _ in runs},
        "train_inertia": inertia(train, best[2]),
        "n_train": int(train.shape[0]),
        "n_validation": int(n_val),
        "batch_size": config.batch_size,
        "max_iter": config.max_iter,
    }
    return Codebook(best[2], layer=layer, seed=best[1], inertia=best[0], meta=meta)


def assign_labels(codebook: Codebook, features: Mapping[str, np.ndarray] | np.ndarray):
    """Cluster index per frame (``argmin_k ||x - c_k||^2``, lowest index on ties).

    ``features`` is either a (T, d) array or a mapping utterance-id -> array.
    """
    if isinstance(features, np.ndarray):
        return assign(features, codebook.centroids)
    return {k: assign(v, codebook.centroids) for k, v in features.items()}


# -- reference features -------------------------------------------------------------


def encode_frames(encoder: Encoder | None, frames: np.ndarray, layer: int) -> np.ndarray:
    """Layer ``layer`` features of one utterance, encoded in max_frames chunks."""
    if encoder is None or layer == RAW_LAYER:
        return np.asarray(frames, dtype=np.float64)
    L = encoder.config.n_layers
    if not 0 <= layer <= L:
        raise ConfigError(f"layer {layer} out of range [0, {L}]")
    return encode_many(encoder, [frames], layer)[0]


def encode_many(encoder: Encoder, arrays: Sequence[np.ndarray], layer: int | Sequence[int], batch_size: int = 16):
    """Encode whole utterances (chunked to max_frames) and return per-utterance features.

    With a sequence of layers, returns a dict layer -> list of arrays.
    """
    layers = [layer] if isinstance(layer, int) else list(layer)
    L = encoder.config.n_layers
    for lyr in layers:
        if not 0 <= lyr <= L:
            raise ConfigError(f"layer {lyr} out of range [0, {L}]")
    W = encoder.config.max_frames
    chunks = []  # (utt index, start, array)
    for i, a in enumerate(arrays):
        for s in range(0, a.shape[0], W):
            chunks.append((i, s, a[s : s + W]))
    outs = {lyr: [np.zeros((a.shape[0], encoder.config.d_model)) for a in arrays] for lyr in layers}
    with no_grad():
        for b in range(0, len(chunks), batch_size):
            group = chunks[b : b + batch_size]
            batch = FrameBatch.from_arrays([c[2] for c in group], ["?"] * len(group))
            hidden = encoder.encode(batch)
            for lyr in layers:
                h = hidden[lyr].data
                for j, (i, s, a) in enumerate(group):
                    outs[lyr][i][s : s + a.shape[0]] = h[j, : a.shape[0]]
    return outs[layers[0]] if isinstance(layer, int) else outs


def extract_reference_features(
    encoder: Encoder | None,
    layer: int,
    utterances: Sequence[Utterance],
    budget_frames: int,
    seed: int,
) -> dict[str, np.ndarray]:
    """Per-language random sample of reference features, capped at ``budget_frames`` each.

    Utterances are visited in a seeded random order; the last one is truncated
    so each language contributes exactly ``min(budget, available)`` frames.
    """
    if encoder is not None and layer != RAW_LAYER and not 0 <= layer <= encoder.config.n_layers:
        raise ConfigError(f"layer {layer} out of range [0, {encoder.config.n_layers}]")
    if encoder is None and layer != RAW_LAYER:
        raise ConfigError("an encoder is required for layer features")
    rng = np.random.default_rng(seed)
    by_lang: dict[str, list[Utterance]] = {}
    for u in utterances:
        by_lang.setdefault(u.language, []).append(u)
    out = {}
    for lang in sorted(by_lang):
        utts = by_lang[lang]
        available = sum(u.n_frames for u in utts)
        if budget_frames >= available:
            if budget_frames > available:
                logger.warning("budget %d frames exceeds %s corpus (%d frames); using all", budget_frames, lang, available)
            picked = [u.frames for u in utts]
        else:
            picked, acc = [], 0
            for i in rng.permutation(len(utts)):
                f = utts[i].frames
                take = min(f.shape[0], budget_frames - acc)
                picked.append(f[:take])
                acc += take
                if acc >= budget_frames:
                    break
        if encoder is None or layer == RAW_LAYER:
            feats = picked
        else:
            feats = encode_many(encoder, picked, layer)
        out[lang] = np.concatenate(feats, axis=0)
    return out


def label_utterances(
    codebook: Codebook,
    encoder: Encoder | None,
    utterances: Sequence[Utterance],
) -> dict[str, np.ndarray]:
    """Targets for every frame of every utterance from the codebook's source layer."""
    arrays = [u.frames for u in utterances]
    if codebook.layer == RAW_LAYER or encoder is None:
        feats = arrays
    else:
        feats = encode_many(encoder, arrays, codebook.layer)
    return {u.id: assign(f, codebook.centroids) for u, f in zip(utterances, feats)}


# -- file format ------------------------------------------------------------------


def save_codebook(path: str | Path, codebook: Codebook) -> None:
    """Binary centroids plus a ``.json`` sidecar with fit metadata."""
    path = Path(path)
    K, d = codebook.centroids.shape
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC + struct.pack("<IIIiq", CODEBOOK_VERSION, K, d, codebook.layer, codebook.seed))
        f.write(np.ascontiguousarray(codebook.centroids, dtype="<f8").tobytes())
    meta = {"K": K, "d": d, "layer": codebook.layer, "seed": codebook.seed, "inertia": codebook.inertia}
    meta.update(codebook.meta)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CODEBOOK_MAGIC:
        raise IntegrityError(f"{path}: not a codebook file")
    version, K, d, layer, seed = struct.unpack("<IIIiq", raw[4:28])
    if version != CODEBOOK_VERSION:
        raise IntegrityError(f"{path}: unsupported codebook version {version}")
    body = raw[28:]
    if len(body) != K * d * 8:
        raise IntegrityError(f"{path}: centroid block does not match header ({K}x{d})")
    centroids = np.frombuffer(body, dtype="<f8").reshape(K, d).astype(np.float64)
    meta, inert = {}, float("nan")
    side = path.with_suffix(path.suffix + ".json")
    if side.exists():
        meta = json.loads(side.read_text())
        inert = float(meta.pop("inertia", inert))
        for key in ("K", "d", "layer", "seed"):
            meta.pop(key, None)
    return Codebook(centroids, layer=layer, seed=seed, inertia=inert, meta=meta)


def config_dict(cfg: KMeansConfig) -> dict:
    return asdict(cfg)
