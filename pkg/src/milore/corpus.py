"""Synthetic multi-language frame corpora, manifests and replay mixing.

Each language is a hidden-Markov frame process: a sticky Markov chain over
``S`` latent units, each emitting Gaussian frames around a unit mean. The
latent unit sequence is kept next to the frames so probes can score how well
a representation recovers it.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .mixture import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_FPS = 50.0

UTT_MAGIC = b"MLUT"
UNITS_MAGIC = b"MLUN"
PAYLOAD_VERSION = 1
MANIFEST_HEADER = ("id", "path", "lang", "frames", "duration_s")


class IntegrityError(ValueError):
    """Stored totals or hashes disagree with the recomputed ones."""


# -- languages ------------------------------------------------------------------


@dataclass
class LanguageSpec:
    """Generator parameters for one synthetic language.

    means: (S, d) unit means; covs: (S, d, d) emission covariances;
    transition: (S, S) row-stochastic matrix; initial: (S,) start distribution.
    """

    name: str
    means: np.ndarray
    covs: np.ndarray
    transition: np.ndarray
    initial: np.ndarray | None = None
    hours: float = 0.1
    min_duration_s: float = 2.0
    max_duration_s: float = 12.0
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        S, d = self.means.shape
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if self.covs.ndim == 0:
            self.covs = np.broadcast_to(self.covs * np.eye(d), (S, d, d)).copy()
        self.transition = np.atleast_2d(np.asarray(self.transition, dtype=np.float64))
        if self.initial is None:
            self.initial = np.full(S, 1.0 / S)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.means.shape[0]

    @property
    def d_feat(self) -> int:
        return self.means.shape[1]

    def validate(self) -> None:
        S, d = self.means.shape
        if self.covs.shape != (S, d, d):
            raise ConfigError(f"{self.name}: covariances must be {(S, d, d)}, got {self.covs.shape}")
        if self.transition.shape != (S, S):
            raise ConfigError(f"{self.name}: transition must be {(S, S)}, got {self.transition.shape}")
        if (self.transition < 0).any() or not np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError(f"{self.name}: transition matrix is not row-stochastic")
        if self.initial.shape != (S,) or (self.initial < 0).any() or not math.isclose(self.initial.sum(), 1.0, abs_tol=1e-9):
            raise ConfigError(f"{self.name}: initial distribution is not a probability vector")
        for s in range(S):
            c = self.covs[s]
            if not np.allclose(c, c.T):
                raise ConfigError(f"{self.name}: covariance {s} is not symmetric")
            if np.linalg.eigvalsh(c).min() < -1e-12:
                raise ConfigError(f"{self.name}: covariance {s} is not positive semi-definite")
        if self.hours <= 0:
            raise ConfigError(f"{self.name}: target hours must be positive")
        if not 0 < self.min_duration_s <= self.max_duration_s:
            raise ConfigError(f"{self.name}: bad duration range [{self.min_duration_s}, {self.max_duration_s}]")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")


def sticky_transition(n_states: int, self_loop: float, dynamics: str = "uniform", rng=None) -> np.ndarray:
    """Transition matrix with self-loop ``self_loop`` and the rest spread by ``dynamics``.

    ``uniform`` spreads evenly over the other states, ``forward`` moves to
    s+1, ``backward`` to s-1 (both cyclic), ``random`` draws a Dirichlet row.
    """
    S = n_states
    if S == 1:
        return np.ones((1, 1))
    if not 0.0 <= self_loop < 1.0:
        raise ConfigError(f"self_loop must lie in [0, 1), got {self_loop}")
    P = np.zeros((S, S))
    move = 1.0 - self_loop
    for s in range(S):
        if dynamics == "uniform":
            P[s] = move / (S - 1)
        elif dynamics == "forward":
            P[s, (s + 1) % S] = move
        elif dynamics == "backward":
            P[s, (s - 1) % S] = move
        elif dynamics == "random":
            if rng is None:
                raise ConfigError("random dynamics need an rng")
            w = rng.dirichlet(np.ones(S - 1))
            P[s, [j for j in range(S) if j != s]] = move * w
        else:
            raise ConfigError(f"unknown dynamics {dynamics!r}")
        P[s, s] = self_loop
    return P


def make_language(
    name: str,
    n_states: int = 8,
    d_feat: int = 16,
    seed: int = 0,
    center: float = 0.0,
    spread: float = 1.0,
    noise_std: float = 0.5,
    self_loop: float = 0.8,
    dynamics: str = "uniform",
    hours: float = 0.1,
    fps: float = DEFAULT_FPS,
    min_duration_s: float = 2.0,
    max_duration_s: float = 12.0,
    means: np.ndarray | None = None,
) -> LanguageSpec:
    """Build a :class:`LanguageSpec` from a compact recipe.

    Unit means are drawn around a language centroid ``center * e`` where
    ``e`` is a random unit direction fixed by ``seed``; passing ``means``
    shares another language's emission cloud.
    """
    rng = np.random.default_rng(seed)
    if means is None:
        direction = rng.normal(size=d_feat)
        direction /= np.linalg.norm(direction)
        means = center * direction + spread * rng.normal(size=(n_states, d_feat))
    means = np.asarray(means, dtype=np.float64)
    n_states = means.shape[0]
    covs = np.broadcast_to(noise_std**2 * np.eye(d_feat), (n_states, d_feat, d_feat)).copy()
    P = sticky_transition(n_states, self_loop, dynamics, rng)
    return LanguageSpec(
        name, means, covs, P, hours=hours, fps=fps, min_duration_s=min_duration_s, max_duration_s=max_duration_s
    )


@dataclass
class Utterance:
    id: str
    language: str
    frames: np.ndarray  # (T, d)
    units: np.ndarray | None = None  # (T,) latent unit per frame
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"utterance {self.id}: frames must be (T>=1, d), got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError(f"utterance {self.id}: non-finite features")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.fps


# -- manifests ----------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    lang: str
    frames: int
    duration_s: float


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    @property
    def languages(self) -> list[str]:
        return sorted({r.lang for r in self.records})

    def totals(self) -> dict[str, float]:
        """Hours per language."""
        out: dict[str, float] = {}
        for r in self.records:
            out[r.lang] = out.get(r.lang, 0.0) + r.duration_s
        return {k: v / 3600.0 for k, v in sorted(out.items())}

    @property
    def total_hours(self) -> float:
        return sum(r.duration_s for r in self.records) / 3600.0

    @property
    def total_frames(self) -> int:
        return sum(r.frames for r in self.records)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_language(self, lang: str) -> "Manifest":
        return Manifest([r for r in self.records if r.lang == lang])

    def subset(self, ids: Iterable[str]) -> "Manifest":
        keep = set(ids)
        return Manifest([r for r in self.records if r.id in keep])

    def __add__(self, other: "Manifest") -> "Manifest":
        return Manifest(self.records + other.records)

    def describe(self) -> str:
        lines = [f"{'lang':<8}{'utts':>8}{'frames':>10}{'hours':>12}"]
        for lang, hours in self.totals().items():
            sub = self.by_language(lang)
            lines.append(f"{lang:<8}{len(sub):>8}{sub.total_frames:>10}{hours:>12.6f}")
        return "\n".join(lines)


def generate_language(
    spec: LanguageSpec, seed: int, path_prefix: str = "", tag: str = ""
) -> tuple[list[Utterance], Manifest]:
    """Roll utterances until the language reaches its target hours.

    Ids are ``<language>-<tag><index>``; give held-out draws a distinct
    ``tag`` so they never collide with training ids.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    S, d = spec.means.shape
    roots = []
    for c in spec.covs:
        w, v = np.linalg.eigh(c)
        roots.append(v * np.sqrt(np.clip(w, 0.0, None)))
    roots = np.stack(roots)
    target_frames = spec.hours * 3600.0 * spec.fps
    lo = max(1, int(round(spec.min_duration_s * spec.fps)))
    hi = max(lo, int(round(spec.max_duration_s * spec.fps)))
    cum = np.cumsum(spec.transition, axis=1)
    utts: list[Utterance] = []
    records: list[ManifestRecord] = []
    total = 0
    while total < target_frames:
        T = int(rng.integers(lo, hi + 1))
        units = np.empty(T, dtype=np.int64)
        units[0] = rng.choice(S, p=spec.initial)
        u = rng.random(T)
        for t in range(1, T):
            units[t] = min(int(np.searchsorted(cum[units[t - 1]], u[t], side="right")), S - 1)
        noise = rng.normal(size=(T, d))
        frames = spec.means[units] + np.einsum("tij,tj->ti", roots[units], noise)
        uid = f"{spec.name}-{tag}{len(utts):06d}"
        utt = Utterance(uid, spec.name, frames, units, spec.fps)
        utts.append(utt)
        records.append(ManifestRecord(uid, f"{path_prefix}{uid}.bin", spec.name, T, utt.duration_s))
        total += T
    return utts, Manifest(records)


def filter_by_duration(manifest: Manifest, min_s: float = 2.0, max_s: float = 30.0) -> Manifest:
    """Keep utterances with ``min_s <= duration <= max_s``."""
    return Manifest([r for r in manifest.records if min_s <= r.duration_s <= max_s])


def sample_replay(
    manifest: Manifest,
    seed: int,
    hours: float | None = None,
    fraction: float | None = None,
    new_hours: float | None = None,
) -> Manifest:
    """Random subset of a previously-learned language's manifest.

    Either ``hours`` directly, or ``fraction`` of the final mixed stream given
    the ``new_hours`` it will be mixed with.
    """
    if fraction is not None:
        if not 0.0 <= fraction < 1.0 or new_hours is None:
            raise ConfigError("replay fraction needs 0 <= fraction < 1 and new_hours")
        hours = fraction / (1.0 - fraction) * new_hours
    if hours is None:
        return Manifest(list(manifest.records))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(manifest))
    picked, acc = [], 0.0
    budget = hours * 3600.0
    for i in order:
        r = manifest.records[i]
        if acc >= budget:
            break
        # stop at whichever side of the budget is closer
        if acc + r.duration_s > budget and (acc + r.duration_s - budget) > (budget - acc):
            break
        picked.append(r)
        acc += r.duration_s
    if hours > 0 and not picked and len(manifest):
        picked.append(manifest.records[order[0]])
    return Manifest(picked)


def replay_mix(
    new_manifests: Sequence[Manifest],
    replay_manifest: Manifest | None,
    seed: int,
    epoch: int = 0,
    replay: bool = True,
) -> list[ManifestRecord]:
    """One epoch of the mixed stream: every admitted utterance exactly once, shuffled.

    Each manifest therefore contributes in proportion to its total hours; no
    manifest is up-sampled.
    """
    pool: list[ManifestRecord] = []
    for m in new_manifests:
        pool.extend(m.records)
    if replay:
        if replay_manifest is None or len(replay_manifest) == 0:
            raise ConfigError("replay is enabled but the replay manifest is empty")
        pool.extend(replay_manifest.records)
    rng = np.random.default_rng([seed, epoch])
    return [pool[i] for i in rng.permutation(len(pool))]


class MixedStream:
    """Batches of the mixed stream addressed by global step.

    Epoch ``e`` is ``replay_mix(..., epoch=e)`` cut into consecutive batches
    (the last one may be short), so batch ``step`` is a pure function of the
    step number and resuming from a checkpoint replays the same data.
    """

    def __init__(
        self,
        new_manifests: Sequence[Manifest],
        replay_manifest: Manifest | None,
        batch_size: int,
        seed: int,
        replay: bool = True,
    ):
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.new_manifests = list(new_manifests)
        self.replay_manifest = replay_manifest
        self.batch_size = batch_size
        self.seed = seed
        self.replay = replay
        n = sum(len(m) for m in self.new_manifests) + (len(replay_manifest) if replay and replay_manifest else 0)
        if replay and (replay_manifest is None or len(replay_manifest) == 0):
            raise ConfigError("replay is enabled but the replay manifest is empty")
        if n == 0:
            raise ConfigError("nothing to train on: all manifests are empty")
        self.epoch_size = n
        self.batches_per_epoch = -(-n // batch_size)
        self._cache: tuple[int, list[ManifestRecord]] | None = None

    def epoch_order(self, epoch: int) -> list[ManifestRecord]:
        if self._cache is None or self._cache[0] != epoch:
            self._cache = (epoch, replay_mix(self.new_manifests, self.replay_manifest, self.seed, epoch, self.replay))
        return self._cache[1]

    def batch(self, step: int) -> list[ManifestRecord]:
        epoch, i = divmod(step, self.batches_per_epoch)
        order = self.epoch_order(epoch)
        return order[i * self.batch_size : (i + 1) * self.batch_size]

    def __iter__(self) -> Iterator[list[ManifestRecord]]:
        step = 0
        while True:
            yield self.batch(step)
            step += 1


# -- file formats ---------------------------------------------------------------------


def _fmt_hours(h: float) -> str:
    return f"{h:.9f}"


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    path = Path(path)
    lines = ["\t".join(MANIFEST_HEADER)]
    for r in manifest.records:
        lines.append(f"{r.id}\t{r.path}\t{r.lang}\t{r.frames}\t{r.duration_s!r}")
    for lang, hours in manifest.totals().items():
        lines.append(f"#total {lang} {_fmt_hours(hours)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> Manifest:
    """Parse a manifest and check its ``#total`` block against the records."""
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or tuple(text[0].split("\t")) != MANIFEST_HEADER:
        raise IntegrityError(f"{path}: missing or malformed header line")
    records, stored = [], {}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#total"):
            parts = line.split()
            if len(parts) != 3:
                raise IntegrityError(f"{path}:{lineno}: malformed total line {line!r}")
            stored[parts[1]] = parts[2]
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise IntegrityError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        rid, rpath, lang, frames, dur = parts
        records.append(ManifestRecord(rid, rpath, lang, int(frames), float(dur)))
    manifest = Manifest(records)
    actual = {k: _fmt_hours(v) for k, v in manifest.totals().items()}
    if actual != stored:
        raise IntegrityError(f"{path}: stored totals {stored} do not match records {actual}")
    return manifest


def write_utterance(path: str | Path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f8")
    T, d = frames.shape
    with open(path, "wb") as f:
        f.write(UTT_MAGIC + struct.pack("<III", PAYLOAD_VERSION, T, d))
        f.write(frames.tobytes())


def read_utterance(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != UTT_MAGIC:
        raise IntegrityError(f"{path}: not an utterance payload")
    version, T, d = struct.unpack("<III", raw[4:16])
    if version != PAYLOAD_VERSION:
        raise IntegrityError(f"{path}: unsupported payload version {version}")
    body = raw[16:]
    if len(body) != T * d * 8:
        raise IntegrityError(f"{path}: payload size does not match header ({T}x{d})")
    return np.frombuffer(body, dtype="<f8").reshape(T, d).astype(np.float64)


def write_units(path: str | Path, units: np.ndarray) -> None:
    units = np.ascontiguousarray(units, dtype="<i4")
    with open(path, "wb") as f:
        f.write(UNITS_MAGIC + struct.pack("<II", PAYLOAD_VERSION, units.shape[0]))
        f.write(units.tobytes())


def read_units(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != UNITS_MAGIC:
        raise IntegrityError(f"{path}: not a units file")
    version, T = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if version != PAYLOAD_VERSION or len(body) != 4 * T:
        raise IntegrityError(f"{path}: corrupt units file")
    return np.frombuffer(body, dtype="<i4").astype(np.int64)


def save_corpus(root: str | Path, utterances: Sequence[Utterance], manifest: Manifest, name: str) -> Path:
    """Write payloads under ``root`` and the manifest as ``root/<name>.tsv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    by_id = {u.id: u for u in utterances}
    for r in manifest.records:
        u = by_id[r.id]
        dest = root / r.path
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_utterance(dest, u.frames)
        if u.units is not None:
            write_units(dest.with_suffix(".units"), u.units)
    mpath = root / f"{name}.tsv"
    write_manifest(mpath, manifest)
    return mpath


def load_utterances(manifest: Manifest, root: str | Path, fps: float = DEFAULT_FPS) -> dict[str, Utterance]:
    root = Path(root)
    out = {}
    for r in manifest.records:
        p = root / r.path
        frames = read_utterance(p)
        if frames.shape[0] != r.frames:
            raise IntegrityError(f"{p}: {frames.shape[0]} frames, manifest says {r.frames}")
        up = p.with_suffix(".units")
        units = read_units(up) if up.exists() else None
        rec_fps = r.frames / r.duration_s if r.duration_s > 0 else fps
        out[r.id] = Utterance(r.id, r.lang, frames, units, rec_fps)
    return out


def with_fps(spec: LanguageSpec, fps: float) -> LanguageSpec:
    return replace(spec, fps=fps)
