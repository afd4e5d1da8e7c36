"""Command-line entry point: ``milore <subcommand> --config FILE``.

Exit status is 0 on success, 2 for configuration errors and 1 for runtime
failures. ``MILORE_OUTPUT_ROOT`` overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from . import analysis
from .config import ConfigParseError, RunConfig, load_config
from .corpus import (
    Manifest,
    Utterance,
    filter_by_duration,
    generate_language,
    load_utterances,
    read_manifest,
    sample_replay,
    save_corpus,
)
from .encoder import MiLoreConfig
from .mixture import ConfigError
from .seeding import stream_seed
from .targets import load_codebook, save_codebook
from .trainer import (
    continual_train,
    fit_base_codebook,
    fit_continual_codebook,
    load_checkpoint,
    manifest_of,
    pretrain_base,
    probe_evaluate,
    reference_labels,
    save_checkpoint,
)

logger = logging.getLogger("milore")

SUBCOMMANDS = ("gen-data", "kmeans", "pretrain", "continual", "probe", "activation", "count-params", "sweep")


class MissingArtifact(RuntimeError):
    pass


# -- artifact layout -----------------------------------------------------------------


def data_dir(cfg: RunConfig, lang: str) -> Path:
    return cfg.output / "data" / lang


def codebook_path(cfg: RunConfig, stage: str) -> Path:
    return cfg.output / "kmeans" / f"{stage}.bin"


def checkpoint_dir(cfg: RunConfig, name: str) -> Path:
    return cfg.output / "checkpoints" / name


def report_dir(cfg: RunConfig, name: str) -> Path:
    return cfg.output / "reports" / name


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `{hint}` first")
    return path


def load_split(cfg: RunConfig, lang: str, split: str) -> list[Utterance]:
    root = data_dir(cfg, lang)
    manifest = read_manifest(_need(root / f"{split}.tsv", "gen-data"))
    by_id = load_utterances(manifest, root, cfg.fps)
    return [by_id[r.id] for r in manifest.records]


def load_languages(cfg: RunConfig, langs: Sequence[str], split: str) -> dict[str, list[Utterance]]:
    return {lang: load_split(cfg, lang, split) for lang in langs}


def replay_pool(cfg: RunConfig, base: dict[str, list[Utterance]], new: list[Utterance]) -> list[Utterance]:
    """Replay subset of the base languages sized to ``replay_fraction`` of the continual mix."""
    if cfg.replay_fraction <= 0:
        return []
    new_hours = sum(u.duration_s for u in new) / 3600.0
    picked: list[Utterance] = []
    for lang in sorted(base):
        utts = base[lang]
        manifest = manifest_of(utts)
        sub = sample_replay(
            manifest, stream_seed(cfg.seed, "replay", len(picked)), fraction=cfg.replay_fraction, new_hours=new_hours
        )
        ids = set(sub.ids())
        picked += [u for u in utts if u.id in ids]
    return picked


# -- subcommands ---------------------------------------------------------------------------


def plan_gen_data(cfg: RunConfig, args) -> list[Path]:
    out = []
    for c in cfg.corpora:
        out += [data_dir(cfg, c.name) / "train.tsv", data_dir(cfg, c.name) / "heldout.tsv"]
    return out


def generate_corpora(cfg: RunConfig) -> dict[str, dict[str, tuple[list[Utterance], Manifest]]]:
    """Train and held-out draws for every configured language, duration-filtered."""
    out: dict[str, dict[str, tuple[list[Utterance], Manifest]]] = {}
    for c in cfg.corpora:
        out[c.name] = {}
        for split, tag in (("train", ""), ("heldout", "h")):
            spec = c.spec if split == "train" else _with_hours(c.spec, c.heldout_hours)
            utts, manifest = generate_language(spec, stream_seed(cfg.seed, f"corpus.{c.name}.{split}"), tag=tag)
            kept = filter_by_duration(manifest, cfg.min_duration_s, cfg.max_duration_s)
            if len(kept) < len(manifest):
                logger.info("%s/%s: duration filter dropped %d utterances", c.name, split, len(manifest) - len(kept))
                ids = set(kept.ids())
                utts = [u for u in utts if u.id in ids]
            out[c.name][split] = (utts, kept)
    return out


def cmd_gen_data(cfg: RunConfig, args) -> None:
    cfg.require("corpus")
    for lang, splits in generate_corpora(cfg).items():
        for split, (utts, manifest) in splits.items():
            save_corpus(data_dir(cfg, lang), utts, manifest, split)
            logger.info("%s/%s: %s", lang, split, manifest.describe())
            print(f"{lang}\t{split}\t{len(manifest)} utterances\t{manifest.total_hours:.4f} h")


def _with_hours(spec, hours):
    return replace(spec, hours=hours)


def plan_kmeans(cfg: RunConfig, args) -> list[Path]:
    p = codebook_path(cfg, args.stage)
    return [p, p.with_suffix(".bin.json")]


def cmd_kmeans(cfg: RunConfig, args) -> None:
    cfg.require("corpus")
    out = codebook_path(cfg, args.stage)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.stage == "base":
        utts = [u for v in load_languages(cfg, cfg.base_languages, "train").values() for u in v]
        codebook = fit_base_codebook(utts, cfg.encoder, cfg.kmeans, cfg.seed)
    else:
        base = load_checkpoint(_need(checkpoint_dir(cfg, "base"), "pretrain"))
        new = [u for v in load_languages(cfg, cfg.new_languages, "train").values() for u in v]
        pool = new + replay_pool(cfg, load_languages(cfg, cfg.base_languages, "train"), new)
        codebook = fit_continual_codebook(base, pool, cfg.kmeans, cfg.reference_layer, cfg.seed)
    save_codebook(out, codebook)
    print(f"codebook\t{out}\tK={codebook.n_clusters}\tlayer={codebook.layer}\tinertia={codebook.inertia:.6g}")


def plan_pretrain(cfg: RunConfig, args) -> list[Path]:
    return [checkpoint_dir(cfg, "base")]


def cmd_pretrain(cfg: RunConfig, args) -> None:
    cfg.require("corpus", "encoder", "pretrain")
    utts = [u for v in load_languages(cfg, cfg.base_languages, "train").values() for u in v]
    cb_path = codebook_path(cfg, "base")
    codebook = load_codebook(cb_path) if cb_path.exists() else None
    state = pretrain_base(utts, cfg.encoder, cfg.pretrain, cfg.kmeans, codebook=codebook)
    out = save_checkpoint(checkpoint_dir(cfg, "base"), state)
    print(f"checkpoint\t{out}\tsteps={state.step}\tfinal_loss={state.curve[-1][1] if state.curve else float('nan'):.6f}")


def _continual_inputs(cfg: RunConfig):
    base = load_checkpoint(_need(checkpoint_dir(cfg, "base"), "pretrain"))
    new = [u for v in load_languages(cfg, cfg.new_languages, "train").values() for u in v]
    replay = replay_pool(cfg, load_languages(cfg, cfg.base_languages, "train"), new)
    cb_path = codebook_path(cfg, "continual")
    codebook = load_codebook(cb_path) if cb_path.exists() else None
    return base, new, replay, codebook


def plan_continual(cfg: RunConfig, args) -> list[Path]:
    return [checkpoint_dir(cfg, args.name)]


def cmd_continual(cfg: RunConfig, args) -> None:
    cfg.require("corpus", "encoder", "continual")
    if cfg.continual_mode == "milore":
        cfg.require("milore")
    base, new, replay, codebook = _continual_inputs(cfg)
    state = continual_train(
        base, new, replay, cfg.milore, cfg.continual, cfg.kmeans, cfg.reference_layer,
        mode=cfg.continual_mode, codebook=codebook,
    )
    out = save_checkpoint(checkpoint_dir(cfg, args.name), state)
    print(f"checkpoint\t{out}\tmode={state.mode}\treplay_utts={len(replay)}\tsteps={state.step}")


def plan_probe(cfg: RunConfig, args) -> list[Path]:
    d = report_dir(cfg, f"probe-{Path(args.checkpoint).name}")
    return [d / "probes.csv", d / "probes.json"]


def _resolve_checkpoint(cfg: RunConfig, name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    return _need(checkpoint_dir(cfg, name), "pretrain` / `continual")


def probe_labels(cfg: RunConfig, heldout: dict[str, list[Utterance]]) -> dict | None:
    """Cluster-probe targets: latent units, or clusters of the base checkpoint's features."""
    if cfg.probe_labels == "units":
        return None
    base = load_checkpoint(_need(checkpoint_dir(cfg, "base"), "pretrain"))
    km = replace(cfg.kmeans, n_clusters=cfg.encoder.codebook_size)
    labels: dict = {}
    for lang, utts in heldout.items():
        fit = load_split(cfg, lang, "train")
        labels.update(reference_labels(base, fit, utts, cfg.probe_label_layer, km, stream_seed(cfg.seed, "probe", len(labels))))
    return labels


def cmd_probe(cfg: RunConfig, args) -> None:
    cfg.require("corpus")
    state = load_checkpoint(_resolve_checkpoint(cfg, args.checkpoint))
    heldout = load_languages(cfg, [c.name for c in cfg.corpora], "heldout")
    layers = args.layers if args.layers else [cfg.probe_layer]
    labels = probe_labels(cfg, heldout) if cfg.probe_task == "cluster" else None
    results = [probe_evaluate(state, layer, heldout, cfg.probe_task, labels=labels, seed=cfg.seed) for layer in layers]
    analysis.emit_report(report_dir(cfg, f"probe-{Path(args.checkpoint).name}"), probes=results)
    for r in results:
        langs = "\t".join(f"{k}={v:.4f}" for k, v in sorted(r.per_language.items()))
        print(f"probe\t{r.task}\tlayer={r.layer}\tacc={r.accuracy:.4f}\t{langs}")


def plan_activation(cfg: RunConfig, args) -> list[Path]:
    d = report_dir(cfg, "activation")
    return [d / "activation.csv", d / "activation.json"]


def cmd_activation(cfg: RunConfig, args) -> None:
    cfg.require("corpus")
    state = load_checkpoint(_resolve_checkpoint(cfg, args.checkpoint))
    heldout = load_languages(cfg, [c.name for c in cfg.corpora], "heldout")
    profile = analysis.expert_activation_profile(state, heldout, projection=args.projection)
    analysis.emit_report(report_dir(cfg, "activation"), activation=profile)
    for lang in profile.languages:
        curve = " ".join(f"{w:.3f}" for w in profile.first_expert_curve(lang))
        print(f"expert1\t{lang}\t{curve}")


def plan_count_params(cfg: RunConfig, args) -> list[Path]:
    d = report_dir(cfg, "params")
    return [d / "params.csv", d / "params.json"]


def cmd_count_params(cfg: RunConfig, args) -> None:
    if args.checkpoint:
        report = analysis.count_parameters(_resolve_checkpoint(cfg, args.checkpoint))
    else:
        cfg.require("encoder")
        enc = cfg.encoder
        if "milore" in cfg.present:
            enc = replace(enc, milore=cfg.milore)
        report = analysis.count_parameters(enc)
    analysis.emit_report(report_dir(cfg, "params"), params=report)
    s = report.summary()
    print(f"total\t{s['total']}\ntrainable\t{s['trainable']}\nfrozen\t{s['frozen']}\nfraction\t{100 * s['fraction']:.3f}%")


def plan_sweep(cfg: RunConfig, args) -> list[Path]:
    d = report_dir(cfg, "sweep")
    return [d / "ablation.csv", d / "ablation.json"]


def sweep_rows(cfg: RunConfig, base, new, replay, heldout, codebook=None, labels=None, log=print) -> list:
    """One continual run per (rank, experts) cell, scored per language by the cluster probe."""
    if codebook is None:
        codebook = fit_continual_codebook(base, new + replay, cfg.kmeans, cfg.reference_layer, cfg.seed)
    steps = cfg.sweep_steps or None
    rows = []
    for rank, n in cfg.sweep_grid:
        mil = MiLoreConfig(n_experts=n, rank=rank, scale=cfg.milore.scale)
        state = continual_train(
            base, new, replay, mil, cfg.continual, cfg.kmeans, cfg.reference_layer,
            mode="milore", steps=steps, codebook=codebook,
        )
        probe = probe_evaluate(state, cfg.probe_layer, heldout, "cluster", labels=labels, seed=cfg.seed)
        trainable = analysis.count_parameters(state).trainable
        rows.append(analysis.AblationRow(rank, n, trainable, dict(probe.per_language)))
        log(f"cell\tr={rank}\tN={n}\ttrainable={trainable}\tavg={rows[-1].avg:.4f}")
    return rows


def cmd_sweep(cfg: RunConfig, args) -> None:
    """Continual runs over (rank, experts) cells scored by per-language probe accuracy."""
    cfg.require("corpus", "encoder", "continual")
    base, new, replay, codebook = _continual_inputs(cfg)
    heldout = load_languages(cfg, [c.name for c in cfg.corpora], "heldout")
    rows = sweep_rows(cfg, base, new, replay, heldout, codebook, probe_labels(cfg, heldout),
                      log=lambda m: print(m, flush=True))
    langs = [c.name for c in cfg.corpora]
    analysis.emit_report(report_dir(cfg, "sweep"), ablation=rows, languages=langs)


COMMANDS: dict[str, tuple[Callable, Callable]] = {
    "gen-data": (cmd_gen_data, plan_gen_data),
    "kmeans": (cmd_kmeans, plan_kmeans),
    "pretrain": (cmd_pretrain, plan_pretrain),
    "continual": (cmd_continual, plan_continual),
    "probe": (cmd_probe, plan_probe),
    "activation": (cmd_activation, plan_activation),
    "count-params": (cmd_count_params, plan_count_params),
    "sweep": (cmd_sweep, plan_sweep),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="milore", description="Continual training with mixtures of LoRA experts.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", "-c", required=True, help="run config file")
        s.add_argument("--output", help="output directory (overrides config and $MILORE_OUTPUT_ROOT)")
        s.add_argument("--seed", type=int, help="replace the run seed; corpus seeds shift with it")
        s.add_argument("--dry-run", action="store_true", help="validate and print the planned artifacts")
        s.add_argument("--verbose", "-v", action="store_true")
        if name == "kmeans":
            s.add_argument("--stage", choices=("base", "continual"), default="base")
        if name == "continual":
            s.add_argument("--name", default="continual", help="checkpoint name under checkpoints/")
        if name in ("probe", "activation"):
            s.add_argument("--checkpoint", default="continual", help="checkpoint name or directory")
        if name == "probe":
            s.add_argument("--layers", type=int, nargs="*", help="layers to probe (default: config)")
        if name == "activation":
            s.add_argument("--projection", choices=("fc1", "fc2"), default="fc1")
        if name == "count-params":
            s.add_argument("--checkpoint", help="count a checkpoint instead of the config")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    run, plan = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, args.output, args.seed)
        if args.dry_run:
            print(f"config ok: {args.config}")
            print(f"output root: {cfg.output}")
            for path in plan(cfg, args):
                print(f"  {path}")
            return 0
        run(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI reports every runtime failure the same way
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
