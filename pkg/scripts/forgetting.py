#!/usr/bin/env python3
"""Base-language forgetting after continual training, three arms per seed.

Arms: full fine-tuning without replay, MiLorE without replay, MiLorE with
replay. Each is scored by a probe on the base language's held-out data
whose targets are clusters of the base model's reference-layer features.

    python3 scripts/forgetting.py configs/toy.cfg --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from milore.cli import generate_corpora, replay_pool
from milore.config import load_config
from milore.trainer import continual_train, pretrain_base, probe_evaluate, reference_labels

ARMS = ("full", "milore", "milore+replay")


def run_seed(config: str | Path, seed: int, log=print) -> dict[str, float]:
    cfg = load_config(config, seed=seed)
    data = generate_corpora(cfg)
    (base_lang,) = cfg.base_languages
    base_train = data[base_lang]["train"][0]
    held = {base_lang: data[base_lang]["heldout"][0]}
    new = [u for lang in cfg.new_languages for u in data[lang]["train"][0]]

    t = time.time()
    base = pretrain_base(base_train, cfg.encoder, cfg.pretrain, cfg.kmeans)
    log(f"seed {seed}: pretrained in {time.time() - t:.0f}s")
    km = replace(cfg.kmeans, n_clusters=cfg.encoder.codebook_size)
    labels = reference_labels(base, base_train, held[base_lang], cfg.probe_label_layer, km, seed)

    def score(state):
        return probe_evaluate(state, cfg.probe_layer, held, "cluster", labels=labels, seed=seed).accuracy

    scores = {"base": score(base)}
    replay = replay_pool(cfg, {base_lang: base_train}, new)
    for arm in ARMS:
        t = time.time()
        state = continual_train(
            base, new, replay if arm.endswith("replay") else None, cfg.milore, cfg.continual, cfg.kmeans,
            cfg.reference_layer, mode="full" if arm == "full" else "milore",
        )
        scores[arm] = score(state)
        log(f"seed {seed}: {arm:<14} acc {scores[arm]:.4f} ({time.time() - t:.0f}s)")
    return scores


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--json", help="write per-seed scores here")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.ERROR)

    runs = {s: run_seed(args.config, s) for s in args.seeds}
    mean = {k: float(np.mean([r[k] for r in runs.values()])) for k in ("base",) + ARMS}
    print("\narm             " + " ".join(f"seed{s:<4}" for s in runs) + "  mean")
    for k in ("base",) + ARMS:
        print(f"{k:<16}" + " ".join(f"{runs[s][k]:.4f}  " for s in runs) + f"{mean[k]:.4f}")
    print(f"\nmilore - full           {100 * (mean['milore'] - mean['full']):+.2f} points")
    print(f"replay - milore         {100 * (mean['milore+replay'] - mean['milore']):+.2f} points")
    if args.json:
        Path(args.json).write_text(json.dumps({"runs": runs, "mean": mean}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
