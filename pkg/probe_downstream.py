"""Scratch probe for criteria 7/8 trend tuning. Not part of the package."""
import time
import numpy as np

from sardino.reference import (
    build_region_tiles, reference_vit_config, reference_dino_config, PRETRAIN_REGIONS,
)
from sardino.tiles import assign_splits
from sardino.dino import pretrain
from sardino.finetune import FinetuneConfig, finetune_fit, subsample_labels, evaluate
from sardino.vit import init_vit_params

t0 = time.time()
N = 1000
regions = ("regA", "regB", "regC", "regD")
tiles = {r: build_region_tiles(r, N, seed=100 + i) for i, r in enumerate(regions)}
splits = {}
for r in regions:
    bands = assign_splits([t.band_index for t in tiles[r]], seed=0)
    splits[r] = {
        name: [t for t in tiles[r] if bands[t.band_index] == name] for name in ("train", "val", "test")
    }
print(f"tiles built {time.time()-t0:.1f}s;",
      {r: {k: len(v) for k, v in splits[r].items()} for r in regions})

vit_cfg = reference_vit_config()
pool = [t for r in PRETRAIN_REGIONS for t in splits[r]["train"]]
rng = np.random.default_rng(0)
pick = sorted(rng.choice(len(pool), size=200, replace=False))
pre_tiles = [pool[i] for i in pick]
t0 = time.time()
res = pretrain(pre_tiles, vit_cfg, reference_dino_config())
print(f"pretrain {time.time()-t0:.1f}s loss {res.epoch_mean_loss(0):.2f}->{res.epoch_mean_loss(9):.2f}")

for mode in ("frozen_backbone", "full"):
    print(f"=== mode {mode}")
    wins = {}
    for region in PRETRAIN_REGIONS:
        outcomes = []
        for seed in (0, 1, 2):
            labeled = subsample_labels(splits[region]["train"], 0.01, seed=seed)
            cfg = FinetuneConfig(mode=mode, seed=seed, epochs=30, learning_rate=0.02,
                                 backbone_lr=1e-4, val_cap=96)
            t0 = time.time()
            fit_pre = finetune_fit(res.student, labeled, splits[region]["val"], vit_cfg, cfg)
            scratch_init = init_vit_params(vit_cfg, seed=1000 + seed)
            fit_scr = finetune_fit(scratch_init, labeled, splits[region]["val"], vit_cfg, cfg)
            test = splits[region]["test"][:200]
            r_pre = evaluate(fit_pre.backbone, fit_pre.decoder, test, vit_cfg)
            r_scr = evaluate(fit_scr.backbone, fit_scr.decoder, test, vit_cfg)
            outcomes.append((r_pre, r_scr))
            print(f"  {region} seed{seed}: pre={r_pre:.2f} scratch={r_scr:.2f} "
                  f"({time.time()-t0:.0f}s, n_labeled={len(labeled)})")
        med_pre = float(np.median([o[0] for o in outcomes]))
        med_scr = float(np.median([o[1] for o in outcomes]))
        wins[region] = med_pre <= med_scr
        print(f"  {region}: median pre={med_pre:.2f} scratch={med_scr:.2f} win={wins[region]}")
    print(f"mode {mode}: wins {sum(wins.values())}/3")
