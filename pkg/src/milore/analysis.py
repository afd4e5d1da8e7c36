"""Parameter accounting, expert-activation profiles and report files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Utterance
from .encoder import Encoder, EncoderConfig, FrameBatch
from .mixture import ConfigError
from .tensor import no_grad
from .trainer import Model, ProbeResult, TrainState, decode_archive, load_checkpoint

logger = logging.getLogger(__name__)


# -- parameter accounting -------------------------------------------------------------


@dataclass
class ParamRow:
    name: str
    shape: tuple
    count: int
    trainable: bool


@dataclass
class ParamReport:
    rows: list[ParamRow]

    @property
    def total(self) -> int:
        return sum(r.count for r in self.rows)

    @property
    def trainable(self) -> int:
        return sum(r.count for r in self.rows if r.trainable)

    @property
    def frozen(self) -> int:
        return self.total - self.trainable

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def summary(self) -> dict:
        return {"total": self.total, "trainable": self.trainable, "frozen": self.frozen, "fraction": self.fraction}


def parameter_shapes(cfg: EncoderConfig, n_classes: int | None = None, mode: str | None = None) -> list[ParamRow]:
    """Every tensor of an encoder + head built from ``cfg``, without allocating it.

    ``mode`` picks the trainable partition: ``"milore"`` (experts, routers,
    head), ``"base"``/``"full"`` (everything); by default ``"milore"`` when
    ``cfg.milore`` is set.
    """
    if mode is None:
        mode = "milore" if cfg.milore is not None else "base"
    d, f = cfg.d_model, cfg.d_ffn
    K = cfg.codebook_size if n_classes is None else n_classes
    rows: list[tuple[str, tuple]] = [
        ("frontend.weight", (d, cfg.d_feat)),
        ("frontend.bias", (d,)),
        ("pos_emb", (cfg.max_frames, d)),
        ("mask_emb", (d,)),
    ]
    mil = cfg.milore
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        rows += [(p + "ln1.weight", (d,)), (p + "ln1.bias", (d,))]
        for proj in "qkvo":
            rows += [(f"{p}attn.{proj}.weight", (d, d)), (f"{p}attn.{proj}.bias", (d,))]
        rows += [(p + "ln2.weight", (d,)), (p + "ln2.bias", (d,))]
        for name, d_in, d_out in (("fc1", d, f), ("fc2", f, d)):
            rows += [(f"{p}{name}.weight", (d_out, d_in)), (f"{p}{name}.bias", (d_out,))]
            if mil is not None:
                for e in range(mil.n_experts):
                    rows += [(f"{p}{name}.experts.{e}.A", (mil.rank, d_in)), (f"{p}{name}.experts.{e}.B", (d_out, mil.rank))]
                rows.append((f"{p}{name}.router.weight", (mil.n_experts, d_in)))
    rows += [("ln_f.weight", (d,)), ("ln_f.bias", (d,)), ("head.weight", (K, d))]

    def trainable(name: str) -> bool:
        if mode == "milore":
            return ".experts." in name or ".router." in name or name.startswith("head.")
        return not (mil is not None and (name.endswith("fc1.weight") or name.endswith("fc2.weight")
                                         or name.endswith("fc1.bias") or name.endswith("fc2.bias")))

    return [ParamRow(n, s, int(np.prod(s)), trainable(n)) for n, s in rows]


def count_parameters(source: TrainState | Model | str | Path | EncoderConfig, mode: str | None = None) -> ParamReport:
    """Enumerate every tensor with its element count and trainable flag.

    ``source`` may be a live model/state, a checkpoint directory, or an
    encoder config (counted analytically).
    """
    if isinstance(source, EncoderConfig):
        return ParamReport(parameter_shapes(source, mode=mode))
    if isinstance(source, (str, Path)):
        path = Path(source)
        cfg = json.loads((path / "config.json").read_text())
        trainable = set(cfg["trainable"])
        arrays = decode_archive((path / "params.bin").read_bytes())
        return ParamReport([ParamRow(n, tuple(a.shape), int(a.size), n in trainable) for n, a in arrays])
    model = source.model if isinstance(source, TrainState) else source
    return ParamReport([ParamRow(n, tuple(t.shape), int(t.size), t.requires_grad) for n, t in model.named_parameters()])


# -- expert activation ------------------------------------------------------------------


@dataclass
class ActivationCell:
    layer: int
    language: str
    expert: int
    mean_weight: float
    frames: int


@dataclass
class ActivationProfile:
    """Frame-weighted mean routing weight per (layer, language, expert)."""

    cells: list[ActivationCell]
    projection: str = "fc1"

    @property
    def layers(self) -> list[int]:
        return sorted({c.layer for c in self.cells})

    @property
    def languages(self) -> list[str]:
        return sorted({c.language for c in self.cells})

    def weight(self, layer: int, language: str, expert: int = 0) -> float:
        for c in self.cells:
            if c.layer == layer and c.language == language and c.expert == expert:
                return c.mean_weight
        raise KeyError((layer, language, expert))

    def first_expert_curve(self, language: str) -> np.ndarray:
        return np.array([self.weight(l, language, 0) for l in self.layers])


def expert_activation_profile(
    model: TrainState | Model | Encoder,
    heldout: dict[str, Sequence[Utterance]],
    projection: str = "fc1",
    batch_size: int = 16,
) -> ActivationProfile:
    """Average per-frame routing weights of each block's ``projection`` router, per language.

    Padding frames are excluded; utterances longer than ``max_frames`` are
    encoded in chunks.
    """
    encoder = model.encoder if isinstance(model, (TrainState, Model)) else model
    if not encoder.has_milore:
        raise ConfigError("model has no MiLorE modules to profile")
    if projection not in ("fc1", "fc2"):
        raise ConfigError(f"projection must be fc1 or fc2, got {projection!r}")
    mods = {int(name.split(".")[1]): m for name, m in encoder.milore_modules() if name.endswith(f"{projection}.")}
    W = encoder.config.max_frames
    cells = []
    for lang in sorted(heldout):
        chunks = [u.frames[s : s + W] for u in heldout[lang] for s in range(0, u.n_frames, W)]
        sums = {l: np.zeros(mods[l].n_experts) for l in mods}
        frames = 0
        with no_grad():
            for b in range(0, len(chunks), batch_size):
                batch = FrameBatch.from_arrays(chunks[b : b + batch_size], [lang] * len(chunks[b : b + batch_size]))
                encoder.encode(batch, record_routing=True)
                valid = batch.valid
                frames += int(valid.sum())
                for l, m in mods.items():
                    sums[l] += m.last_routing[valid].sum(axis=0)
        for l in sorted(mods):
            means = sums[l] / max(frames, 1)
            for e, w in enumerate(means):
                cells.append(ActivationCell(l + 1, lang, e, float(w), frames))
    return ActivationProfile(cells, projection)


# -- reports ------------------------------------------------------------------------------


@dataclass
class AblationRow:
    rank: int
    n_experts: int
    trainable: int
    scores: dict[str, float] = field(default_factory=dict)

    @property
    def avg(self) -> float:
        return float(np.mean(list(self.scores.values()))) if self.scores else float("nan")


PARAM_FIELDS = ["name", "shape", "count", "trainable"]
ACTIVATION_FIELDS = ["layer", "language", "expert", "mean_weight", "frames"]
PROBE_FIELDS = ["task", "layer", "language", "accuracy", "n_frames"]


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_report(
    out_dir: str | Path,
    params: ParamReport | None = None,
    activation: ActivationProfile | None = None,
    probes: Sequence[ProbeResult] = (),
    ablation: Sequence[AblationRow] = (),
    languages: Sequence[str] | None = None,
) -> dict[str, Path]:
    """Write CSV and JSON summaries of whatever is given; returns the written paths by kind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    if params is not None:
        rows = [[r.name, "x".join(map(str, r.shape)), r.count, int(r.trainable)] for r in params.rows]
        _write_csv(out / "params.csv", PARAM_FIELDS, rows)
        summary = {"rows": [asdict(r) for r in params.rows], "summary": params.summary()}
        (out / "params.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        written["params"] = out / "params.csv"

    if activation is not None:
        cells = activation.cells
        rows = [[c.layer, c.language, c.expert, repr(c.mean_weight), c.frames] for c in cells]
        _write_csv(out / "activation.csv", ACTIVATION_FIELDS, rows)
        (out / "activation.json").write_text(
            json.dumps({"projection": activation.projection, "cells": [asdict(c) for c in cells]}, indent=2)
        )
        written["activation"] = out / "activation.csv"

    if probes:
        rows = []
        for p in probes:
            rows.append([p.task, p.layer, "all", repr(p.accuracy), p.n_frames])
            for lang, acc in sorted(p.per_language.items()):
                rows.append([p.task, p.layer, lang, repr(acc), p.n_frames])
        _write_csv(out / "probes.csv", PROBE_FIELDS, rows)
        (out / "probes.json").write_text(json.dumps([p.as_dict() for p in probes], indent=2))
        written["probes"] = out / "probes.csv"

    if ablation:
        langs = list(languages) if languages is not None else sorted({k for r in ablation for k in r.scores})
        header = ["lora_rank", "n_experts", "trainable"] + langs + ["avg"]
        rows = [
            [r.rank, r.n_experts, r.trainable] + [repr(r.scores.get(l, float("nan"))) for l in langs] + [repr(r.avg)]
            for r in ablation
        ]
        _write_csv(out / "ablation.csv", header, rows)
        (out / "ablation.json").write_text(json.dumps([dict(asdict(r), avg=r.avg) for r in ablation], indent=2))
        written["ablation"] = out / "ablation.csv"
    return written


def read_report_json(path: str | Path):
    return json.loads(Path(path).read_text())


def load_for_analysis(path: str | Path) -> TrainState:
    return load_checkpoint(path)
