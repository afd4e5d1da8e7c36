"""Toy HuBERT-shaped transformer encoder.

An affine frontend maps input frames to ``d_model``; masked frames are
replaced by a learned mask embedding; learned absolute positions are added;
then ``n_layers`` pre-LayerNorm blocks of multi-head self-attention and a
two-projection FFN. Either FFN projection can be swapped for a
:class:`~milore.mixture.MiLoreLinear` via :meth:`Encoder.install_milore`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .mixture import ConfigError, Linear, MiLoreLinear
from .tensor import ShapeError, Tensor, gelu, layer_norm, matmul, softmax

logger = logging.getLogger(__name__)

NEG_INF = -1e9


@dataclass
class MiLoreConfig:
    n_experts: int = 2
    rank: int = 12
    scale: float = 1.0


@dataclass
class MaskConfig:
    span: int = 10
    prob: float = 0.08


@dataclass
class EncoderConfig:
    d_feat: int = 16
    d_model: int = 32
    n_heads: int = 4
    d_ffn: int = 64
    n_layers: int = 4
    codebook_size: int = 100
    max_frames: int = 64
    milore: MiLoreConfig | None = None
    mask: MaskConfig = field(default_factory=MaskConfig)

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name in ("d_feat", "d_model", "n_heads", "d_ffn", "codebook_size", "max_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.mask.span < 1 or not 0.0 < self.mask.prob < 1.0:
            raise ConfigError(f"mask span must be >= 1 and 0 < prob < 1, got {self.mask}")


@dataclass
class FrameBatch:
    """Padded frames: features (B, T, d_feat), per-utterance lengths and languages."""

    features: np.ndarray
    lengths: np.ndarray
    language_ids: list[str]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.features.ndim != 3:
            raise ShapeError(f"features must be (B, T, d_feat), got {self.features.shape}")
        if self.lengths.shape != (self.features.shape[0],):
            raise ShapeError("one length per utterance required")
        if (self.lengths > self.features.shape[1]).any() or (self.lengths < 1).any():
            raise ShapeError("lengths must lie in [1, T]")

    @property
    def valid(self) -> np.ndarray:
        """Boolean (B, T): True on real frames, False on padding."""
        t = np.arange(self.features.shape[1])
        return t[None, :] < self.lengths[:, None]

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray], languages: list[str], ids: list[str] | None = None) -> "FrameBatch":
        T = max(a.shape[0] for a in arrays)
        d = arrays[0].shape[1]
        feats = np.zeros((len(arrays), T, d))
        for i, a in enumerate(arrays):
            feats[i, : a.shape[0]] = a
        return cls(feats, np.array([a.shape[0] for a in arrays]), list(languages), list(ids or []))


@dataclass
class MaskSet:
    """Boolean (B, T) mask; True marks frames in the masked set."""

    mask: np.ndarray

    def indices(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.mask[b])

    @property
    def total(self) -> int:
        return int(self.mask.sum())


def apply_span_mask(
    batch: FrameBatch,
    span: int,
    prob: float,
    rng: np.random.Generator | int,
) -> tuple[FrameBatch, MaskSet]:
    """Sample span masks.

    Each frame index starts a span with probability ``prob``; a span covers
    ``span`` frames clipped at the utterance end. Utterances of at least two
    frames always receive one span; shorter ones are left unmasked.
    """
    if span < 1 or not 0.0 < prob < 1.0:
        raise ConfigError(f"need span >= 1 and 0 < prob < 1, got span={span}, prob={prob}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    B, T = batch.features.shape[:2]
    mask = np.zeros((B, T), dtype=bool)
    for b in range(B):
        n = int(batch.lengths[b])
        if n < 2:
            logger.warning("utterance %s has %d frame(s); skipped by masking", b, n)
            continue
        starts = np.flatnonzero(rng.random(n) < prob)
        if starts.size == 0:
            starts = np.array([rng.integers(n)])
        for s in starts:
            mask[b, s : min(s + span, n)] = True
    return batch, MaskSet(mask)


class Block:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1_w = Tensor(np.ones(d), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d), requires_grad=True)
        self.q = Linear.init(d, d, rng)
        self.k = Linear.init(d, d, rng)
        self.v = Linear.init(d, d, rng)
        self.o = Linear.init(d, d, rng)
        self.ln2_w = Tensor(np.ones(d), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d), requires_grad=True)
        self.fc1: Linear | MiLoreLinear = Linear.init(d, cfg.d_ffn, rng)
        self.fc2: Linear | MiLoreLinear = Linear.init(cfg.d_ffn, d, rng)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "ln1.weight", self.ln1_w
        yield prefix + "ln1.bias", self.ln1_b
        for name in ("q", "k", "v", "o"):
            yield from getattr(self, name).named_parameters(f"{prefix}attn.{name}.")
        yield prefix + "ln2.weight", self.ln2_w
        yield prefix + "ln2.bias", self.ln2_b
        yield from self.fc1.named_parameters(prefix + "fc1.")
        yield from self.fc2.named_parameters(prefix + "fc2.")

    def attention(self, x: Tensor, key_bias: np.ndarray) -> Tensor:
        B, T, d = x.shape
        H = self.n_heads
        dh = d // H

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        att = softmax(scores + Tensor(key_bias), axis=-1)
        ctx = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, d)
        return self.o(ctx)

    def __call__(self, x: Tensor, key_bias: np.ndarray) -> Tensor:
        x = x + self.attention(layer_norm(x, self.ln1_w, self.ln1_b), key_bias)
        h = layer_norm(x, self.ln2_w, self.ln2_b)
        return x + self.fc2(gelu(self.fc1(h)))


def sinusoid_table(n: int, d: int) -> np.ndarray:
    """Sine/cosine table used to initialise the learned position embeddings.

    Starting from a smooth table (instead of small noise) lets attention pick
    up relative offsets early, which a tiny model otherwise learns slowly.
    """
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq[: d // 2])
    return out


class Encoder:
    """Frontend + positions + L blocks; ``encode`` returns all L+1 layer outputs.

    Layer 0 is the embedding output (frontend, mask substitution, positions);
    layer l is the residual stream after block l, and the last layer also
    passes through the final LayerNorm.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator | int = 0):
        config.validate()
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        d = config.d_model
        self.frontend = Linear.init(config.d_feat, d, rng)
        self.pos_emb = Tensor(sinusoid_table(config.max_frames, d), requires_grad=True)
        self.mask_emb = Tensor(rng.uniform(0.0, 1.0, size=d), requires_grad=True)
        self.blocks = [Block(config, rng) for _ in range(config.n_layers)]
        self.lnf_w = Tensor(np.ones(d), requires_grad=True)
        self.lnf_b = Tensor(np.zeros(d), requires_grad=True)
        if config.milore is not None:
            self.install_milore(config.milore, rng)

    # -- parameters -----------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.frontend.named_parameters("frontend.")
        yield "pos_emb", self.pos_emb
        yield "mask_emb", self.mask_emb
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"blocks.{i}.")
        yield "ln_f.weight", self.lnf_w
        yield "ln_f.bias", self.lnf_b

    def milore_modules(self) -> list[tuple[str, MiLoreLinear]]:
        out = []
        for i, blk in enumerate(self.blocks):
            for name in ("fc1", "fc2"):
                mod = getattr(blk, name)
                if isinstance(mod, MiLoreLinear):
                    out.append((f"blocks.{i}.{name}.", mod))
        return out

    @property
    def has_milore(self) -> bool:
        return bool(self.milore_modules())

    def install_milore(self, cfg: MiLoreConfig, rng: np.random.Generator) -> None:
        """Replace both FFN projections of every block with zero-delta MiLorE modules."""
        existing = self.milore_modules()
        if existing:
            _, m = existing[0]
            if m.n_experts != cfg.n_experts or m.rank != cfg.rank:
                raise ConfigError(
                    f"encoder already carries MiLorE modules with N={m.n_experts}, r={m.rank}; "
                    f"requested N={cfg.n_experts}, r={cfg.rank}"
                )
            return
        for blk in self.blocks:
            for name in ("fc1", "fc2"):
                base = getattr(blk, name)
                setattr(blk, name, MiLoreLinear.from_linear(base, cfg.n_experts, cfg.rank, rng, cfg.scale))
        self.config.milore = cfg

    def freeze_backbone(self) -> None:
        """Freeze every tensor except expert and router weights."""
        for name, t in self.named_parameters():
            t.requires_grad = _is_adapter_name(name)

    def unfreeze_all(self) -> None:
        for name, t in self.named_parameters():
            t.requires_grad = True
        for _, m in self.milore_modules():
            m.weight.requires_grad = False
            if m.bias is not None:
                m.bias.requires_grad = False

    # -- forward ------------------------------------------------------------------

    def frontend_forward(self, raw: Tensor) -> Tensor:
        return self.frontend(raw)

    def encode(self, batch: FrameBatch, masks: MaskSet | None = None, record_routing: bool = False) -> list[Tensor]:
        B, T, d_feat = batch.features.shape
        if d_feat != self.config.d_feat:
            raise ShapeError(f"batch has d_feat={d_feat}, encoder expects {self.config.d_feat}")
        if T > self.config.max_frames:
            raise ShapeError(f"batch has {T} frames, encoder supports at most {self.config.max_frames}")
        x = self.frontend(Tensor(batch.features))
        if masks is not None:
            if masks.mask.shape != (B, T):
                raise ShapeError(f"mask shape {masks.mask.shape} != batch shape {(B, T)}")
            m = masks.mask[..., None].astype(np.float64)
            x = x * Tensor(1.0 - m) + Tensor(m) * self.mask_emb
        x = x + self.pos_emb[:T]
        key_bias = np.where(batch.valid, 0.0, NEG_INF)[:, None, None, :]
        mods = self.milore_modules()
        for _, mod in mods:
            mod.record_routing = record_routing
            mod.last_routing = None
        hidden = [x]
        for blk in self.blocks:
            x = blk(x, key_bias)
            hidden.append(x)
        if self.blocks:
            hidden[-1] = layer_norm(hidden[-1], self.lnf_w, self.lnf_b)
        for _, mod in mods:
            mod.record_routing = False
        return hidden


def _is_adapter_name(name: str) -> bool:
    return ".experts." in name or ".router." in name


def encode(batch: FrameBatch, encoder: Encoder, masks: MaskSet | None = None) -> list[Tensor]:
    return encoder.encode(batch, masks)


def frontend(raw: Tensor, encoder: Encoder) -> Tensor:
    return encoder.frontend_forward(raw)
