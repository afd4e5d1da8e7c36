"""Base pretraining and continual MiLorE training, checkpoints and probes."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import IntegrityError, Manifest, ManifestRecord, MixedStream, Utterance
from .encoder import Encoder, EncoderConfig, FrameBatch, MaskConfig, MiLoreConfig, apply_span_mask
from .mixture import ConfigError
from .objective import PredictionHead, masked_prediction_loss
from .seeding import stream_rng, stream_seed
from .targets import (
    RAW_LAYER,
    Codebook,
    KMeansConfig,
    encode_many,
    extract_reference_features,
    label_utterances,
    load_codebook,
    minibatch_kmeans_fit,
    save_codebook,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"MLTA"
ARCHIVE_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


# -- configuration ------------------------------------------------------------------


@dataclass
class ScheduleConfig:
    total_steps: int = 2000
    warmup_steps: int = 200
    peak_lr: float = 1.5e-3

    def validate(self) -> None:
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"need 0 <= warmup ({self.warmup_steps}) <= total ({self.total_steps})")
        if self.peak_lr <= 0:
            raise ConfigError("peak learning rate must be positive")


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    clip_norm: float = 1.0


@dataclass
class TrainConfig:
    batch_size: int = 8
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    log_every: int = 100


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Linear warmup 0 -> peak, then linear decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step > schedule.total_steps:
        logger.warning("step %d is past the schedule end (%d); lr clamped to 0", step, schedule.total_steps)
        return 0.0
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if schedule.total_steps == schedule.warmup_steps:
        return schedule.peak_lr
    return schedule.peak_lr * (schedule.total_steps - step) / (schedule.total_steps - schedule.warmup_steps)


# -- model and optimiser ------------------------------------------------------------


class Model:
    """Encoder plus prediction head."""

    def __init__(self, encoder: Encoder, head: PredictionHead):
        self.encoder = encoder
        self.head = head

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.encoder.named_parameters()) + [("head.weight", self.head.weight)]

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.named_parameters() if t.requires_grad]

    def frozen_names(self) -> list[str]:
        return [n for n, t in self.named_parameters() if not t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None


class Adam:
    """Adam with bias correction and global-norm clipping; moments only for trainable tensors."""

    def __init__(self, cfg: OptimConfig | None = None):
        self.cfg = cfg or OptimConfig()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, named: Iterable[tuple[str, Tensor]], lr: float) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        live = [(n, p) for n, p in named if p.requires_grad]
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in live}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        clip = self.cfg.clip_norm
        factor = clip / (norm + 1e-12) if clip and norm > clip else 1.0
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n, p in live:
            g = grads[n] * factor
            m = self.m.get(n)
            v = self.v.get(n)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[n], self.v[n] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)
        return norm


@dataclass
class TrainState:
    model: Model
    optimizer: Adam
    config: TrainConfig
    mode: str = "base"
    step: int = 0
    codebook: Codebook | None = None
    curve: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def encoder(self) -> Encoder:
        return self.model.encoder


# -- batching -------------------------------------------------------------------------


def manifest_of(utterances: Sequence[Utterance]) -> Manifest:
    return Manifest([ManifestRecord(u.id, f"{u.id}.bin", u.language, u.n_frames, u.duration_s) for u in utterances])


def make_batch(
    records: Sequence[ManifestRecord],
    utterances: dict[str, Utterance],
    targets: dict[str, np.ndarray],
    max_frames: int,
    rng: np.random.Generator,
) -> tuple[FrameBatch, np.ndarray]:
    """Random crop of at most ``max_frames`` per utterance, padded; padded targets are 0."""
    arrays, tg, langs, ids = [], [], [], []
    for r in records:
        u = utterances[r.id]
        T = u.n_frames
        start = int(rng.integers(0, T - max_frames + 1)) if T > max_frames else 0
        stop = start + min(T, max_frames)
        arrays.append(u.frames[start:stop])
        tg.append(targets[r.id][start:stop])
        langs.append(u.language)
        ids.append(u.id)
    batch = FrameBatch.from_arrays(arrays, langs, ids)
    out = np.zeros(batch.features.shape[:2], dtype=np.int64)
    for i, t in enumerate(tg):
        out[i, : t.shape[0]] = t
    return batch, out


def batch_loss(model: Model, batch: FrameBatch, targets: np.ndarray, mask: MaskConfig, rng) -> Tensor:
    _, masks = apply_span_mask(batch, mask.span, mask.prob, rng)
    hidden = model.encoder.encode(batch, masks)
    return masked_prediction_loss(hidden[-1], targets, masks, model.head, valid=batch.valid)


def train_steps(
    state: TrainState,
    stream: MixedStream,
    utterances: dict[str, Utterance],
    targets: dict[str, np.ndarray],
    n_steps: int,
) -> TrainState:
    """Advance ``state`` by ``n_steps`` updates; data and masks depend only on (seed, step)."""
    model, cfg = state.model, state.config
    enc_cfg = model.encoder.config
    named = model.named_parameters()
    for _ in range(n_steps):
        s = state.step
        records = stream.batch(s)
        batch, tg = make_batch(records, utterances, targets, enc_cfg.max_frames, stream_rng(cfg.seed, "data", s))
        loss = batch_loss(model, batch, tg, enc_cfg.mask, stream_rng(cfg.seed, "mask", s))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {s}", state)
        model.zero_grad()
        loss.backward()
        lr = lr_at(min(s + 1, cfg.schedule.total_steps), cfg.schedule)
        state.optimizer.step(named, lr)
        state.step += 1
        state.curve.append((s, value, lr))
        if cfg.log_every and s % cfg.log_every == 0:
            logger.info("[%s] step %d loss %.4f lr %.3g", state.mode, s, value, lr)
    model.zero_grad()
    return state


# -- stages -----------------------------------------------------------------------------


def _kmeans_for(enc_cfg: EncoderConfig, kmeans: KMeansConfig) -> KMeansConfig:
    km = copy.deepcopy(kmeans)
    km.n_clusters = enc_cfg.codebook_size
    km.batch_size = max(km.batch_size, km.n_clusters)
    return km


def fit_base_codebook(
    utterances: Sequence[Utterance], encoder_config: EncoderConfig, kmeans_config: KMeansConfig, seed: int
) -> Codebook:
    km = _kmeans_for(encoder_config, kmeans_config)
    feats = extract_reference_features(None, RAW_LAYER, utterances, km.budget_frames, stream_seed(seed, "kmeans"))
    return minibatch_kmeans_fit(np.concatenate(list(feats.values())), km, RAW_LAYER, stream_seed(seed, "kmeans"))


def fit_continual_codebook(
    base: TrainState | Model | Encoder,
    utterances: Sequence[Utterance],
    kmeans_config: KMeansConfig,
    reference_layer: int,
    seed: int,
) -> Codebook:
    """K-means over the frozen base encoder's ``reference_layer`` features of ``utterances``."""
    reference = base.encoder if isinstance(base, (TrainState, Model)) else base
    feats = extract_reference_features(
        reference, reference_layer, utterances, kmeans_config.budget_frames, stream_seed(seed, "kmeans")
    )
    km = copy.deepcopy(kmeans_config)
    km.batch_size = max(km.batch_size, km.n_clusters)
    return minibatch_kmeans_fit(np.concatenate(list(feats.values())), km, reference_layer, stream_seed(seed, "kmeans"))


def pretrain_base(
    utterances: Sequence[Utterance],
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    kmeans_config: KMeansConfig,
    codebook: Codebook | None = None,
) -> TrainState:
    """Train every parameter of a fresh encoder on raw-feature k-means targets.

    A precomputed raw-feature ``codebook`` skips the clustering step.
    """
    if not utterances:
        raise ConfigError("base pretraining needs a nonempty base-language corpus")
    train_config.schedule.validate()
    seed = train_config.seed
    enc_cfg = copy.deepcopy(encoder_config)
    enc_cfg.milore = None
    if codebook is None:
        codebook = fit_base_codebook(utterances, enc_cfg, kmeans_config, seed)
    elif codebook.n_clusters != enc_cfg.codebook_size or codebook.layer != RAW_LAYER:
        raise ConfigError(
            f"base codebook must be a raw-feature codebook with {enc_cfg.codebook_size} clusters, "
            f"got layer {codebook.layer} with {codebook.n_clusters}"
        )
    targets = label_utterances(codebook, None, utterances)
    init = stream_rng(seed, "init")
    encoder = Encoder(enc_cfg, init)
    head = PredictionHead.init(enc_cfg.d_model, enc_cfg.codebook_size, init)
    state = TrainState(Model(encoder, head), Adam(train_config.optim), train_config, "base", 0, codebook)
    by_id = {u.id: u for u in utterances}
    stream = MixedStream([manifest_of(utterances)], None, train_config.batch_size, stream_seed(seed, "data"), replay=False)
    return train_steps(state, stream, by_id, targets, train_config.schedule.total_steps)


def continual_train(
    base: TrainState | Model | Encoder,
    new_utterances: Sequence[Utterance],
    replay_utterances: Sequence[Utterance] | None,
    milore: MiLoreConfig | None,
    train_config: TrainConfig,
    kmeans_config: KMeansConfig,
    reference_layer: int,
    mode: str = "milore",
    steps: int | None = None,
    codebook: Codebook | None = None,
) -> TrainState:
    """Continual stage on new (+ replayed) data.

    ``mode="milore"`` installs zero-delta MiLorE modules and freezes the
    backbone; ``mode="full"`` fine-tunes every backbone tensor instead.
    Targets come from k-means over the frozen base encoder's
    ``reference_layer`` features (or ``codebook`` when given); the
    prediction head is fresh.
    """
    if mode not in ("milore", "full"):
        raise ConfigError(f"unknown continual mode {mode!r}")
    if mode == "milore" and milore is None:
        raise ConfigError("milore mode needs a MiLorE configuration")
    base_encoder = base.encoder if isinstance(base, (TrainState, Model)) else base
    if mode == "milore" and base_encoder.has_milore:
        _, m = base_encoder.milore_modules()[0]
        if (m.n_experts, m.rank) != (milore.n_experts, milore.rank):
            raise ConfigError(
                f"base checkpoint already has MiLorE modules with N={m.n_experts}, r={m.rank}; "
                f"requested N={milore.n_experts}, r={milore.rank}"
            )
    train_config.schedule.validate()
    seed = train_config.seed
    reference = copy.deepcopy(base_encoder)
    for _, t in reference.named_parameters():
        t.requires_grad = False
    replay_utterances = list(replay_utterances or [])
    pool = list(new_utterances) + replay_utterances
    if codebook is None:
        km = _kmeans_for(reference.config, kmeans_config)
        codebook = fit_continual_codebook(reference, pool, km, reference_layer, seed)
    elif codebook.layer != reference_layer:
        raise ConfigError(f"codebook was fit on layer {codebook.layer}, expected reference layer {reference_layer}")
    targets = label_utterances(codebook, reference, pool)

    encoder = copy.deepcopy(base_encoder)
    init = stream_rng(seed, "init")
    if mode == "milore":
        encoder.install_milore(copy.deepcopy(milore), init)
        encoder.freeze_backbone()
    else:
        if encoder.has_milore:
            raise ConfigError("full fine-tuning expects a plain (MiLorE-free) base encoder")
        encoder.unfreeze_all()
    head = PredictionHead.init(encoder.config.d_model, codebook.n_clusters, init)
    state = TrainState(Model(encoder, head), Adam(train_config.optim), train_config, mode, 0, codebook)

    new_by_lang: dict[str, list[Utterance]] = {}
    for u in new_utterances:
        new_by_lang.setdefault(u.language, []).append(u)
    manifests = [manifest_of(v) for _, v in sorted(new_by_lang.items())]
    replay_manifest = manifest_of(replay_utterances) if replay_utterances else None
    stream = MixedStream(
        manifests, replay_manifest, train_config.batch_size, stream_seed(seed, "data"), replay=bool(replay_utterances)
    )
    by_id = {u.id: u for u in pool}
    n = train_config.schedule.total_steps if steps is None else steps
    return train_steps(state, stream, by_id, targets, n)


# -- probes ---------------------------------------------------------------------------


def reference_labels(
    reference: TrainState | Model | Encoder,
    fit_utterances: Sequence[Utterance],
    label_utterances_: Sequence[Utterance],
    layer: int,
    kmeans_config: KMeansConfig,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Per-frame cluster ids from k-means over a fixed reference model's ``layer``.

    Fit on ``fit_utterances`` and label ``label_utterances_``. Probing later
    checkpoints against these labels measures how much of the reference
    model's structure they still carry.
    """
    encoder = reference.encoder if isinstance(reference, (TrainState, Model)) else reference
    feats = np.concatenate(encode_many(encoder, [u.frames for u in fit_utterances], layer))
    km = copy.deepcopy(kmeans_config)
    km.batch_size = max(km.batch_size, km.n_clusters)
    codebook = minibatch_kmeans_fit(feats, km, layer, stream_seed(seed, "probe-labels"))
    return label_utterances(codebook, encoder, label_utterances_)


@dataclass
class ProbeResult:
    task: str
    layer: int
    accuracy: float
    per_language: dict[str, float]
    n_frames: int

    def as_dict(self) -> dict:
        return asdict(self)


def _split(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    return np.sort(perm[: (n + 1) // 2]), np.sort(perm[(n + 1) // 2 :])


def _fit_probe(x_tr, y_tr, x_te, y_te) -> float:
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    if len(np.unique(y_tr)) < 2:
        return float((y_te == y_tr[0]).mean())
    scaler = StandardScaler().fit(x_tr)
    clf = LogisticRegression(max_iter=2000, C=1.0)
    clf.fit(scaler.transform(x_tr), y_tr)
    return float((clf.predict(scaler.transform(x_te)) == y_te).mean())


def probe_evaluate(
    model: TrainState | Model | Encoder,
    layer: int,
    heldout: dict[str, Sequence[Utterance]],
    task: str = "cluster",
    labels: dict[str, np.ndarray] | None = None,
    seed: int = 0,
    split: bool = True,
) -> ProbeResult:
    """Linear probe on frozen layer features.

    ``task="langid"`` classifies each frame's language; ``task="cluster"``
    fits one probe per language predicting per-frame cluster labels (``labels``
    keyed by utterance id, defaulting to the corpus' latent units). Utterances
    are split in half for fit/score unless ``split=False``.
    """
    encoder = model.encoder if isinstance(model, (TrainState, Model)) else model
    L = encoder.config.n_layers
    if not 0 <= layer <= L:
        raise ConfigError(f"probe layer {layer} out of range [0, {L}]")
    if task not in ("cluster", "langid"):
        raise ConfigError(f"unknown probe task {task!r}")
    rng = np.random.default_rng(seed)
    langs = sorted(heldout)
    feats: dict[str, list[np.ndarray]] = {}
    for lang in langs:
        feats[lang] = encode_many(encoder, [u.frames for u in heldout[lang]], layer)
    parts = {lang: _split(len(heldout[lang]), rng) if split else (np.arange(len(heldout[lang])),) * 2 for lang in langs}
    n_frames = sum(u.n_frames for lang in langs for u in heldout[lang])

    def label_of(u: Utterance) -> np.ndarray:
        if labels is not None:
            return labels[u.id]
        if u.units is None:
            raise ConfigError(f"utterance {u.id} has no latent units; pass labels")
        return u.units

    if task == "langid":
        xs_tr, ys_tr, xs_te, ys_te, lang_te = [], [], [], [], []
        for li, lang in enumerate(langs):
            tr, te = parts[lang]
            for i in tr:
                xs_tr.append(feats[lang][i])
                ys_tr.append(np.full(feats[lang][i].shape[0], li))
            for i in te:
                xs_te.append(feats[lang][i])
                ys_te.append(np.full(feats[lang][i].shape[0], li))
        x_tr, y_tr = np.concatenate(xs_tr), np.concatenate(ys_tr)
        x_te, y_te = np.concatenate(xs_te), np.concatenate(ys_te)
        from sklearn.linear_model import LogisticRegression
        from sklearn.preprocessing import StandardScaler

        if len(langs) < 2:
            pred = np.zeros_like(y_te)
        else:
            scaler = StandardScaler().fit(x_tr)
            clf = LogisticRegression(max_iter=2000).fit(scaler.transform(x_tr), y_tr)
            pred = clf.predict(scaler.transform(x_te))
        per = {lang: float((pred[y_te == li] == li).mean()) for li, lang in enumerate(langs)}
        return ProbeResult("langid", layer, float((pred == y_te).mean()), per, n_frames)

    per, weights = {}, {}
    for lang in langs:
        tr, te = parts[lang]
        utts = heldout[lang]
        x_tr = np.concatenate([feats[lang][i] for i in tr])
        y_tr = np.concatenate([label_of(utts[i]) for i in tr])
        x_te = np.concatenate([feats[lang][i] for i in te])
        y_te = np.concatenate([label_of(utts[i]) for i in te])
        per[lang] = _fit_probe(x_tr, y_tr, x_te, y_te)
        weights[lang] = y_te.shape[0]
    total = sum(weights.values())
    acc = sum(per[k] * weights[k] for k in per) / total
    return ProbeResult("cluster", layer, float(acc), per, n_frames)


# -- checkpoints ------------------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def tensor_digest(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return _sha256(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes())


def tensor_hashes(model: Model | Encoder) -> dict[str, str]:
    return {n: tensor_digest(t.data) for n, t in model.named_parameters()}


def backbone_hashes(model: Model | Encoder) -> dict[str, str]:
    """Content hash of every frozen tensor, keyed by name."""
    named = model.named_parameters()
    return {n: tensor_digest(t.data) for n, t in named if not t.requires_grad}


def encode_archive(arrays: Sequence[tuple[str, np.ndarray]]) -> bytes:
    out = [ARCHIVE_MAGIC, struct.pack("<II", ARCHIVE_VERSION, len(arrays))]
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def decode_archive(raw: bytes) -> list[tuple[str, np.ndarray]]:
    if raw[:4] != ARCHIVE_MAGIC:
        raise IntegrityError("not a tensor archive")
    version, count = struct.unpack("<II", raw[4:12])
    if version != ARCHIVE_VERSION:
        raise IntegrityError(f"unsupported archive version {version}")
    pos, out = 12, []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack("<H", raw[pos : pos + 2])
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack("<B", raw[pos : pos + 1])
            pos += 1
            shape = struct.unpack(f"<{ndim}Q", raw[pos : pos + 8 * ndim])
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            body = raw[pos : pos + 8 * n]
            if len(body) != 8 * n:
                raise IntegrityError(f"truncated tensor {name!r}")
            pos += 8 * n
            out.append((name, np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)))
    except struct.error as exc:
        raise IntegrityError(f"corrupt tensor archive: {exc}") from exc
    if pos != len(raw):
        raise IntegrityError("trailing bytes after tensor archive")
    return out


def _config_snapshot(state: TrainState) -> dict:
    return {
        "format": "milore-checkpoint",
        "version": 1,
        "mode": state.mode,
        "step": state.step,
        "optimizer_t": state.optimizer.t,
        "encoder": asdict(state.model.encoder.config),
        "head_classes": state.model.head.n_classes,
        "train": asdict(state.config),
        "trainable": state.model.trainable_names(),
    }


def save_checkpoint(path: str | Path, state: TrainState) -> Path:
    """Directory with config.json, params.bin, optim.bin, codebook.bin, curve.csv, hashes.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    named = state.model.named_parameters()
    files: dict[str, bytes] = {}
    files["config.json"] = (json.dumps(_config_snapshot(state), indent=2, sort_keys=True) + "\n").encode()
    files["params.bin"] = encode_archive([(n, t.data) for n, t in named])
    opt = state.optimizer
    files["optim.bin"] = encode_archive(
        [(f"m/{n}", opt.m[n]) for n in sorted(opt.m)] + [(f"v/{n}", opt.v[n]) for n in sorted(opt.v)]
    )
    files["curve.csv"] = ("step,loss,lr\n" + "".join(f"{s},{l!r},{r!r}\n" for s, l, r in state.curve)).encode()
    for name, data in files.items():
        (path / name).write_bytes(data)
    if state.codebook is not None:
        save_codebook(path / "codebook.bin", state.codebook)
        for name in ("codebook.bin", "codebook.bin.json"):
            files[name] = (path / name).read_bytes()
    hashes = {
        "files": {name: _sha256(data) for name, data in sorted(files.items())},
        "tensors": {n: tensor_digest(t.data) for n, t in named},
    }
    (path / "hashes.json").write_text(json.dumps(hashes, indent=2, sort_keys=True) + "\n")
    return path


def _dict_to_encoder_config(d: dict) -> EncoderConfig:
    d = dict(d)
    mil = d.pop("milore", None)
    mask = d.pop("mask", None) or {}
    return EncoderConfig(**d, milore=MiLoreConfig(**mil) if mil else None, mask=MaskConfig(**mask))


def _dict_to_train_config(d: dict) -> TrainConfig:
    d = dict(d)
    sched = ScheduleConfig(**d.pop("schedule"))
    optim = OptimConfig(**d.pop("optim"))
    return TrainConfig(**d, schedule=sched, optim=optim)


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    hashes_file = path / "hashes.json"
    if not hashes_file.exists():
        raise IntegrityError(f"{path}: missing hashes.json")
    hashes = json.loads(hashes_file.read_text())
    for name, digest in hashes["files"].items():
        f = path / name
        if not f.exists() or _sha256(f.read_bytes()) != digest:
            raise IntegrityError(f"{path}: {name} is missing or does not match its recorded hash")
    cfg = json.loads((path / "config.json").read_text())
    enc_cfg = _dict_to_encoder_config(cfg["encoder"])
    train_cfg = _dict_to_train_config(cfg["train"])
    encoder = Encoder(enc_cfg, 0)
    head = PredictionHead(Tensor(np.zeros((cfg["head_classes"], enc_cfg.d_model)), requires_grad=True))
    model = Model(encoder, head)
    params = model.parameters()
    stored = dict(decode_archive((path / "params.bin").read_bytes()))
    if set(stored) != set(params):
        raise IntegrityError(f"{path}: parameter names differ from the configured model")
    trainable = set(cfg["trainable"])
    for name, t in params.items():
        if stored[name].shape != t.shape:
            raise IntegrityError(f"{path}: tensor {name} has shape {stored[name].shape}, expected {t.shape}")
        t.data = stored[name]
        t.requires_grad = name in trainable
        if tensor_digest(t.data) != hashes["tensors"].get(name):
            raise IntegrityError(f"{path}: tensor {name} does not match its recorded hash")
    opt = Adam(train_cfg.optim)
    opt.t = cfg["optimizer_t"]
    for name, arr in decode_archive((path / "optim.bin").read_bytes()):
        kind, pname = name.split("/", 1)
        (opt.m if kind == "m" else opt.v)[pname] = arr
    codebook = load_codebook(path / "codebook.bin") if (path / "codebook.bin").exists() else None
    curve = []
    lines = (path / "curve.csv").read_text().splitlines()[1:]
    for line in lines:
        s, l, r = line.split(",")
        curve.append((int(s), float(l), float(r)))
    return TrainState(model, opt, train_cfg, cfg["mode"], cfg["step"], codebook, curve)
