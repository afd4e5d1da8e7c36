#!/usr/bin/env python3
"""Rank x expert-count grid on a fresh base model, scored per language.

The default grid holds trainable parameters fixed (r * N = 24); pass
--grid 12x2 12x3 12x4 16x2 8x2 4x2 for the varied-budget grid.

    python3 scripts/sweep.py configs/toy.cfg --out runs/sweep
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import replace

from milore import analysis
from milore.cli import generate_corpora, replay_pool, sweep_rows
from milore.config import load_config
from milore.trainer import pretrain_base, reference_labels


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--grid", nargs="+", help="cells as <rank>x<experts>")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.ERROR)

    cfg = load_config(args.config, seed=args.seed)
    if args.grid:
        cfg.sweep_grid = [tuple(map(int, re.fullmatch(r"(\d+)x(\d+)", g).groups())) for g in args.grid]
    data = generate_corpora(cfg)
    train = {lang: splits["train"][0] for lang, splits in data.items()}
    heldout = {lang: splits["heldout"][0] for lang, splits in data.items()}
    base_train = [u for lang in cfg.base_languages for u in train[lang]]
    new = [u for lang in cfg.new_languages for u in train[lang]]

    base = pretrain_base(base_train, cfg.encoder, cfg.pretrain, cfg.kmeans)
    replay = replay_pool(cfg, {lang: train[lang] for lang in cfg.base_languages}, new)
    labels = None
    if cfg.probe_labels == "base":
        km = replace(cfg.kmeans, n_clusters=cfg.encoder.codebook_size)
        labels = {}
        for i, lang in enumerate(sorted(heldout)):
            labels.update(reference_labels(base, train[lang], heldout[lang], cfg.probe_label_layer, km, cfg.seed + i))
    rows = sweep_rows(cfg, base, new, replay, heldout, labels=labels, log=lambda m: print(m, flush=True))
    langs = [c.name for c in cfg.corpora]
    written = analysis.emit_report(args.out, ablation=rows, languages=langs)
    print(open(written["ablation"]).read(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
