#!/usr/bin/env python3
"""Layer-wise expert-1 routing weight per new language after continual training.

Reports the per-layer gap between the two new languages, averaged over
seeds. With configs/shared.cfg the two languages share emission means, so
any routing difference has to come from context the encoder has built up.

    python3 scripts/activation.py configs/shared.cfg --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from milore.analysis import expert_activation_profile
from milore.cli import generate_corpora, replay_pool
from milore.config import load_config
from milore.trainer import continual_train, pretrain_base


def run_seed(config: str | Path, seed: int, projection: str = "fc1") -> dict[str, np.ndarray]:
    """Expert-1 curve (layers 1..L) for each new language."""
    return curves(*train_seed(config, seed), projection)


def train_seed(config: str | Path, seed: int):
    """Continual MiLorE checkpoint and the new languages' held-out data."""
    cfg = load_config(config, seed=seed)
    data = generate_corpora(cfg)
    base_train = [u for lang in cfg.base_languages for u in data[lang]["train"][0]]
    new = [u for lang in cfg.new_languages for u in data[lang]["train"][0]]
    base = pretrain_base(base_train, cfg.encoder, cfg.pretrain, cfg.kmeans)
    replay = replay_pool(cfg, {lang: data[lang]["train"][0] for lang in cfg.base_languages}, new)
    state = continual_train(base, new, replay, cfg.milore, cfg.continual, cfg.kmeans, cfg.reference_layer)
    held = {lang: data[lang]["heldout"][0] for lang in cfg.new_languages}
    return state, held


def curves(state, held, projection: str = "fc1") -> dict[str, np.ndarray]:
    profile = expert_activation_profile(state, held, projection=projection)
    return {lang: profile.first_expert_curve(lang) for lang in sorted(held)}


def layer_gaps(curves: dict[str, np.ndarray]) -> np.ndarray:
    a, b = (curves[k] for k in sorted(curves)[:2])
    return np.abs(a - b)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--projection", choices=("fc1", "fc2", "both"), default="fc1")
    p.add_argument("--json")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.ERROR)

    projections = ("fc1", "fc2") if args.projection == "both" else (args.projection,)
    gaps = {p: [] for p in projections}
    out = {p: {} for p in projections}
    for s in args.seeds:
        state, held = train_seed(args.config, s)
        for proj in projections:
            c = curves(state, held, proj)
            out[proj][s] = {k: v.tolist() for k, v in c.items()}
            for lang, curve in c.items():
                print(f"seed {s} {proj} {lang}: " + " ".join(f"{w:.3f}" for w in curve), flush=True)
            gaps[proj].append(layer_gaps(c))
    summary = {}
    for proj in projections:
        mean = np.mean(gaps[proj], axis=0)
        summary[proj] = mean.tolist()
        print(f"{proj} mean |gap| per layer: " + " ".join(f"{g:.3f}" for g in mean))
        print(f"{proj} max over layers {mean.max():.3f}; min over layers 1-2 {mean[:2].min():.3f}")
    if args.json:
        Path(args.json).write_text(json.dumps({"curves": out, "mean_gap": summary}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
