"""Typed, sectioned run configuration.

One setting per line, ``key: type = value``, grouped under ``[section]``
headers. ``#`` starts a comment. Corpus sections are named
``[corpus.<language>]``. Example::

    [run]
    seed: int = 0
    output: str = runs/toy

    [corpus.A]
    role: str = base
    hours: float = 0.3

Every error carries the file name and line number it came from.
"""

from __future__ import annotations

import copy
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .corpus import LanguageSpec, make_language
from .encoder import EncoderConfig, MaskConfig, MiLoreConfig
from .mixture import ConfigError
from .targets import KMeansConfig
from .trainer import OptimConfig, ScheduleConfig, TrainConfig

OUTPUT_ENV = "MILORE_OUTPUT_ROOT"

TYPES = ("int", "float", "str", "bool", "path", "list[int]", "list[float]", "list[str]")


class ConfigParseError(ConfigError):
    """Invalid configuration; ``str()`` is ``file:line: message``."""

    def __init__(self, source: str, line: int | None, message: str):
        self.source, self.line, self.message = source, line, message
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


# section name -> {key: (type, default)}; a default of REQUIRED must be given
REQUIRED = object()

SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "run": {
        "seed": ("int", 0),
        "output": ("str", "runs/default"),
        "fps": ("float", 50.0),
        "min_duration_s": ("float", 2.0),
        "max_duration_s": ("float", 30.0),
    },
    "corpus": {
        "role": ("str", REQUIRED),
        "n_states": ("int", 8),
        "d_feat": ("int", 16),
        "seed": ("int", 0),
        "center": ("float", 0.0),
        "spread": ("float", 1.0),
        "noise_std": ("float", 0.5),
        "self_loop": ("float", 0.8),
        "dynamics": ("str", "uniform"),
        "share_means": ("str", ""),
        "hours": ("float", 0.1),
        "heldout_hours": ("float", 0.02),
        "min_duration_s": ("float", 2.0),
        "max_duration_s": ("float", 12.0),
    },
    "encoder": {
        "d_feat": ("int", 0),
        "d_model": ("int", 32),
        "n_heads": ("int", 4),
        "d_ffn": ("int", 64),
        "n_layers": ("int", 4),
        "codebook_size": ("int", 32),
        "max_frames": ("int", 64),
        "mask_span": ("int", 10),
        "mask_prob": ("float", 0.08),
    },
    "kmeans": {
        "batch_size": ("int", 10000),
        "seeds": ("list[int]", [0, 1, 2]),
        "max_iter": ("int", 20),
        "validation_fraction": ("float", 0.1),
        "budget_hours": ("float", 50.0),
        "reference_layer": ("int", 3),
    },
    "pretrain": {
        "steps": ("int", 2000),
        "warmup": ("int", 200),
        "peak_lr": ("float", 1.5e-3),
        "batch_size": ("int", 8),
    },
    "continual": {
        "steps": ("int", 2000),
        "warmup": ("int", 200),
        "peak_lr": ("float", 1.5e-3),
        "batch_size": ("int", 8),
        "mode": ("str", "milore"),
        "replay_fraction": ("float", 0.1),
    },
    "milore": {
        "n_experts": ("int", 2),
        "rank": ("int", 12),
        "scale": ("float", 1.0),
    },
    "probe": {
        "layer": ("int", -1),
        "task": ("str", "cluster"),
        "labels": ("str", "units"),
        "label_layer": ("int", -1),
    },
    "sweep": {
        "grid": ("list[str]", ["12x2", "8x3", "6x4", "4x6", "3x8", "2x12"]),
        "steps": ("int", 0),
    },
}

_HEADER = re.compile(r"^\[([A-Za-z_][\w.\-]*)\]$")
_ENTRY = re.compile(r"^([A-Za-z_]\w*)\s*:\s*([\w\[\]]+)\s*=\s*(.*)$")


@dataclass
class Entry:
    value: Any
    line: int


@dataclass
class RawConfig:
    source: str
    sections: dict[str, dict[str, Entry]] = field(default_factory=dict)
    section_lines: dict[str, int] = field(default_factory=dict)


def _convert(kind: str, text: str, source: str, line: int, base_dir: Path) -> Any:
    text = text.strip()
    try:
        if kind.startswith("list["):
            inner = kind[5:-1]
            items = [t.strip() for t in text.split(",")] if text else []
            return [_convert(inner, t, source, line, base_dir) for t in items]
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if kind in ("str", "path"):
            if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
                text = text[1:-1]
            if kind == "path":
                p = Path(text)
                p = p if p.is_absolute() else base_dir / p
                if not p.exists():
                    raise ConfigParseError(source, line, f"path {text!r} does not exist")
                return p
            return text
    except ConfigParseError:
        raise
    except ValueError:
        raise ConfigParseError(source, line, f"cannot read {text!r} as {kind}") from None
    raise ConfigParseError(source, line, f"unknown type {kind!r}")


def parse_text(text: str, source: str = "<config>", base_dir: str | Path = ".") -> RawConfig:
    """Parse and type-check config text against :data:`SCHEMA`."""
    base_dir = Path(base_dir)
    raw = RawConfig(source)
    current: str | None = None
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        m = _HEADER.match(body)
        if m:
            current = m.group(1)
            family = current.split(".", 1)[0]
            if family not in SCHEMA:
                raise ConfigParseError(source, n, f"unknown section [{current}]")
            if family == "corpus" and "." not in current:
                raise ConfigParseError(source, n, "corpus sections are named [corpus.<language>]")
            if family != "corpus" and "." in current:
                raise ConfigParseError(source, n, f"unknown section [{current}]")
            if current in raw.sections:
                raise ConfigParseError(source, n, f"section [{current}] appears twice")
            raw.sections[current] = {}
            raw.section_lines[current] = n
            continue
        m = _ENTRY.match(body)
        if not m:
            raise ConfigParseError(source, n, "expected '[section]' or 'key: type = value'")
        if current is None:
            raise ConfigParseError(source, n, "setting outside of any section")
        key, kind, value = m.groups()
        schema = SCHEMA[current.split(".", 1)[0]]
        if kind not in TYPES:
            raise ConfigParseError(source, n, f"unknown type {kind!r} (expected one of {', '.join(TYPES)})")
        if key not in schema:
            raise ConfigParseError(source, n, f"unknown key {key!r} in [{current}]")
        expected = schema[key][0]
        if kind != expected and not (expected == "str" and kind == "path"):
            raise ConfigParseError(source, n, f"{key} is declared {kind}, expected {expected}")
        if key in raw.sections[current]:
            raise ConfigParseError(source, n, f"{key} set twice in [{current}]")
        raw.sections[current][key] = Entry(_convert(kind, value, source, n, base_dir), n)
    return raw


def _values(raw: RawConfig, section: str) -> dict[str, Any]:
    schema = SCHEMA[section.split(".", 1)[0]]
    given = raw.sections.get(section, {})
    out = {}
    for key, (_, default) in schema.items():
        if key in given:
            v = given[key].value
            out[key] = str(v) if isinstance(v, Path) else v
        elif default is REQUIRED:
            raise ConfigParseError(raw.source, raw.section_lines.get(section), f"[{section}] needs {key}")
        else:
            out[key] = copy.deepcopy(default)
    return out


def _line(raw: RawConfig, section: str, key: str | None = None) -> int | None:
    entry = raw.sections.get(section, {}).get(key) if key else None
    return entry.line if entry else raw.section_lines.get(section)


@dataclass
class CorpusConfig:
    name: str
    role: str
    spec: LanguageSpec
    heldout_hours: float


@dataclass
class RunConfig:
    """Validated view of a config file, with module-level config objects."""

    source: str
    seed: int
    output: Path
    fps: float
    min_duration_s: float
    max_duration_s: float
    corpora: list[CorpusConfig]
    encoder: EncoderConfig
    kmeans: KMeansConfig
    reference_layer: int
    pretrain: TrainConfig
    continual: TrainConfig
    continual_mode: str
    replay_fraction: float
    milore: MiLoreConfig
    probe_layer: int
    probe_task: str
    probe_labels: str
    probe_label_layer: int
    sweep_grid: list[tuple[int, int]]
    sweep_steps: int
    present: set[str]

    @property
    def base_languages(self) -> list[str]:
        return [c.name for c in self.corpora if c.role == "base"]

    @property
    def new_languages(self) -> list[str]:
        return [c.name for c in self.corpora if c.role == "new"]

    def require(self, *sections: str) -> None:
        for s in sections:
            if s == "corpus":
                if not self.corpora:
                    raise ConfigParseError(self.source, None, "no [corpus.<language>] sections")
            elif s not in self.present:
                raise ConfigParseError(self.source, None, f"missing section [{s}]")


def _train_config(v: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        batch_size=v["batch_size"],
        seed=seed,
        schedule=ScheduleConfig(total_steps=v["steps"], warmup_steps=v["warmup"], peak_lr=v["peak_lr"]),
        optim=OptimConfig(),
    )


def build(raw: RawConfig, output_override: str | None = None, seed: int | None = None) -> RunConfig:
    """Turn a parsed file into a :class:`RunConfig`, checking cross-field constraints.

    ``seed`` replaces the run seed and shifts every corpus seed by the same
    amount, so repeated runs also draw fresh languages.
    """
    src = raw.source
    run = _values(raw, "run")
    shift = 0
    if seed is not None:
        shift = seed - run["seed"]
        run["seed"] = seed
    output = output_override if output_override is not None else os.environ.get(OUTPUT_ENV)
    out_path = Path(output) if output else Path(run["output"])

    enc = _values(raw, "encoder")
    mil = _values(raw, "milore")
    mask = MaskConfig(span=enc["mask_span"], prob=enc["mask_prob"])

    corpora: list[CorpusConfig] = []
    specs: dict[str, LanguageSpec] = {}
    names = [s.split(".", 1)[1] for s in raw.sections if s.startswith("corpus.")]
    for name in names:
        sec = f"corpus.{name}"
        v = _values(raw, sec)
        if v["role"] not in ("base", "new"):
            raise ConfigParseError(src, _line(raw, sec, "role"), f"role must be base or new, got {v['role']!r}")
        means = None
        if v["share_means"]:
            if v["share_means"] not in specs:
                raise ConfigParseError(
                    src, _line(raw, sec, "share_means"), f"share_means refers to {v['share_means']!r}, not defined above"
                )
            means = specs[v["share_means"]].means
        try:
            spec = make_language(
                name,
                n_states=v["n_states"],
                d_feat=v["d_feat"],
                seed=v["seed"] + shift,
                center=v["center"],
                spread=v["spread"],
                noise_std=v["noise_std"],
                self_loop=v["self_loop"],
                dynamics=v["dynamics"],
                hours=v["hours"],
                fps=run["fps"],
                min_duration_s=v["min_duration_s"],
                max_duration_s=v["max_duration_s"],
                means=means,
            )
            spec.validate()
        except (ConfigError, ValueError) as e:
            raise ConfigParseError(src, _line(raw, sec), str(e)) from None
        if v["heldout_hours"] <= 0:
            raise ConfigParseError(src, _line(raw, sec, "heldout_hours"), "heldout_hours must be > 0")
        specs[name] = spec
        corpora.append(CorpusConfig(name, v["role"], spec, v["heldout_hours"]))

    d_feats = {c.spec.d_feat for c in corpora}
    if len(d_feats) > 1:
        raise ConfigParseError(src, None, f"corpora disagree on d_feat: {sorted(d_feats)}")
    d_feat = d_feats.pop() if d_feats else (enc["d_feat"] or 16)
    if enc["d_feat"] and enc["d_feat"] != d_feat:
        raise ConfigParseError(
            src, _line(raw, "encoder", "d_feat"), f"encoder d_feat={enc['d_feat']} but the corpora have d_feat={d_feat}"
        )
    encoder = EncoderConfig(
        d_feat=d_feat,
        d_model=enc["d_model"],
        n_heads=enc["n_heads"],
        d_ffn=enc["d_ffn"],
        n_layers=enc["n_layers"],
        codebook_size=enc["codebook_size"],
        max_frames=enc["max_frames"],
        milore=None,
        mask=mask,
    )
    try:
        encoder.validate()
    except (ConfigError, ValueError) as e:
        raise ConfigParseError(src, _line(raw, "encoder"), str(e)) from None

    km = _values(raw, "kmeans")
    kmeans = KMeansConfig(
        n_clusters=encoder.codebook_size,
        batch_size=km["batch_size"],
        seeds=list(km["seeds"]),
        max_iter=km["max_iter"],
        validation_fraction=km["validation_fraction"],
        budget_hours=km["budget_hours"],
        fps=run["fps"],
    )
    try:
        kmeans.validate()
    except (ConfigError, ValueError) as e:
        raise ConfigParseError(src, _line(raw, "kmeans"), str(e)) from None
    if not 0 <= km["reference_layer"] <= encoder.n_layers:
        raise ConfigParseError(
            src, _line(raw, "kmeans", "reference_layer"), f"reference_layer must lie in [0, {encoder.n_layers}]"
        )

    pre, cont = _values(raw, "pretrain"), _values(raw, "continual")
    trains = {}
    for sec, v in (("pretrain", pre), ("continual", cont)):
        tc = _train_config(v, run["seed"])
        try:
            tc.schedule.validate()
        except (ConfigError, ValueError) as e:
            raise ConfigParseError(src, _line(raw, sec), str(e)) from None
        trains[sec] = tc
    if cont["mode"] not in ("milore", "full"):
        raise ConfigParseError(src, _line(raw, "continual", "mode"), f"mode must be milore or full, got {cont['mode']!r}")
    if not 0.0 <= cont["replay_fraction"] < 1.0:
        raise ConfigParseError(src, _line(raw, "continual", "replay_fraction"), "replay_fraction must lie in [0, 1)")

    milore = MiLoreConfig(n_experts=mil["n_experts"], rank=mil["rank"], scale=mil["scale"])
    if milore.n_experts < 1 or milore.rank < 1:
        raise ConfigParseError(src, _line(raw, "milore"), "n_experts and rank must be >= 1")

    probe = _values(raw, "probe")
    layer = probe["layer"] if probe["layer"] >= 0 else encoder.n_layers
    if layer > encoder.n_layers:
        raise ConfigParseError(src, _line(raw, "probe", "layer"), f"probe layer must lie in [0, {encoder.n_layers}]")
    if probe["task"] not in ("cluster", "langid"):
        raise ConfigParseError(src, _line(raw, "probe", "task"), f"task must be cluster or langid, got {probe['task']!r}")
    if probe["labels"] not in ("units", "base"):
        raise ConfigParseError(src, _line(raw, "probe", "labels"), f"labels must be units or base, got {probe['labels']!r}")
    label_layer = probe["label_layer"] if probe["label_layer"] >= 0 else km["reference_layer"]
    if label_layer > encoder.n_layers:
        raise ConfigParseError(src, _line(raw, "probe", "label_layer"), f"label_layer must lie in [0, {encoder.n_layers}]")

    sweep = _values(raw, "sweep")
    grid = []
    for cell in sweep["grid"]:
        m = re.fullmatch(r"(\d+)x(\d+)", cell)
        if not m:
            raise ConfigParseError(src, _line(raw, "sweep", "grid"), f"grid cell {cell!r} is not <rank>x<experts>")
        grid.append((int(m.group(1)), int(m.group(2))))

    return RunConfig(
        source=src,
        seed=run["seed"],
        output=out_path,
        fps=run["fps"],
        min_duration_s=run["min_duration_s"],
        max_duration_s=run["max_duration_s"],
        corpora=corpora,
        encoder=encoder,
        kmeans=kmeans,
        reference_layer=km["reference_layer"],
        pretrain=trains["pretrain"],
        continual=trains["continual"],
        continual_mode=cont["mode"],
        replay_fraction=cont["replay_fraction"],
        milore=milore,
        probe_layer=layer,
        probe_task=probe["task"],
        probe_labels=probe["labels"],
        probe_label_layer=label_layer,
        sweep_grid=grid,
        sweep_steps=sweep["steps"],
        present={s.split(".", 1)[0] for s in raw.sections},
    )


def load_config(path: str | Path, output_override: str | None = None, seed: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigParseError(str(path), None, "config file does not exist")
    raw = parse_text(path.read_text(), str(path), path.parent)
    return build(raw, output_override, seed)
