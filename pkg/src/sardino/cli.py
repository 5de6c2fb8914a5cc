"""Command-line pipeline: synth-data, split, pretrain, finetune, embed,
tsne, swd, eval-matrix, report, gradcheck.

Each command reads and writes only the documented file formats under
`<out_root>/<run_id>/` and emits the resolved configuration alongside its
outputs, so any artifact can be reproduced from the resolved copy alone.
Expected failures print one machine-parsable line (`error: <code>: <msg>`)
on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis as ana
from . import dino, embeddings, finetune, report, swd, tiles, tsne, vit
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, SardinoError
from .gradcheck import check_gradients, generic_eval_point
from .params import ParamStore, load_checkpoint, save_checkpoint
from .reference import recipe_for

COMMANDS = (
    "synth-data",
    "split",
    "pretrain",
    "finetune",
    "embed",
    "tsne",
    "swd",
    "eval-matrix",
    "report",
    "gradcheck",
)


def _region_seed(seed: int, region: str) -> int:
    rng = np.random.default_rng([seed] + list(region.encode("utf-8")))
    return int(rng.integers(2**31))


def _prepare_run(cfg: RunConfig) -> None:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(cfg.run_dir / "config.resolved")


def _read_manifest(cfg: RunConfig):
    if not cfg.manifest_path.exists():
        raise DataError(f"manifest not found: {cfg.manifest_path} (run synth-data first)")
    return tiles.read_manifest(cfg.manifest_path)


def _load_tiles(cfg: RunConfig, regions, split: str) -> dict:
    """region -> list of tiles in the given split, in manifest order."""
    entries = _read_manifest(cfg)
    wanted = set(regions)
    out: dict = {r: [] for r in regions}
    for e in entries:
        if e.region in wanted and e.split == split:
            out[e.region].append(tiles.read_tile(cfg.run_dir / e.path))
    if split != "unassigned" and all(not v for v in out.values()):
        raise DataError(f"no tiles in split {split!r} for {sorted(wanted)} (run split first)")
    return out


def cmd_synth_data(cfg: RunConfig) -> int:
    _prepare_run(cfg)
    cfg.tiles_dir.mkdir(parents=True, exist_ok=True)
    side = cfg["data.tile_size"]
    entries = []
    for region in cfg["data.regions"]:
        recipe = recipe_for(region)
        region_tiles = tiles.synth_region(
            recipe,
            cfg["data.tiles_per_region"],
            side,
            side,
            len(recipe.channel_gain),
            seed=_region_seed(cfg.seed, region),
        )
        region_dir = cfg.tiles_dir / region
        region_dir.mkdir(parents=True, exist_ok=True)
        for t in region_tiles:
            rel = Path("tiles") / region / f"{t.id}.sart"
            tiles.write_tile(t, cfg.run_dir / rel)
            entries.append(tiles.ManifestEntry(t.id, t.region, t.band_index, "unassigned", str(rel)))
    tiles.write_manifest(entries, cfg.manifest_path)
    print(f"wrote {len(entries)} tiles for {len(cfg['data.regions'])} regions -> {cfg.tiles_dir}")
    return 0


def cmd_split(cfg: RunConfig) -> int:
    _prepare_run(cfg)
    entries = _read_manifest(cfg)
    by_region: dict = {}
    for e in entries:
        by_region.setdefault(e.region, []).append(e)
    for region, region_entries in by_region.items():
        bands = tiles.assign_splits([e.band_index for e in region_entries], seed=cfg.seed)
        for e in region_entries:
            e.split = bands[e.band_index]
    tiles.write_manifest(entries, cfg.manifest_path)
    counts = {s: sum(1 for e in entries if e.split == s) for s in tiles.SPLITS}
    print(f"assigned splits over {len(by_region)} regions: {counts}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    _prepare_run(cfg)
    vit_cfg = cfg.vit_config()
    dino_cfg = cfg.dino_config()
    per_region = _load_tiles(cfg, cfg["dino.pretrain_regions"], "train")
    pool = [t for r in cfg["dino.pretrain_regions"] for t in per_region[r]]
    cap = cfg["dino.max_tiles"]
    if cap and len(pool) > cap:
        rng = np.random.default_rng([cfg.seed, 0xD1])
        keep = sorted(rng.choice(len(pool), size=cap, replace=False))
        pool = [pool[i] for i in keep]
    result = dino.pretrain(pool, vit_cfg, dino_cfg)

    cfg.checkpoints_dir.mkdir(parents=True, exist_ok=True)
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.student, cfg.checkpoints_dir / "student.ckpt")
    save_checkpoint(result.teacher, cfg.checkpoints_dir / "teacher.ckpt")
    center_store = ParamStore()
    center_store.add("center", result.center.center)
    save_checkpoint(center_store, cfg.checkpoints_dir / "center.ckpt")
    dino.write_history_csv(result.history, cfg.reports_dir / "pretrain_history.csv")
    first = result.epoch_mean_loss(0)
    last = result.epoch_mean_loss(dino_cfg.epochs - 1)
    print(
        f"pretrained on {len(pool)} tiles x {dino_cfg.epochs} epochs: "
        f"loss {first:.4f} -> {last:.4f}"
    )
    return 0


def _load_backbone(cfg: RunConfig) -> ParamStore:
    path = Path(cfg["finetune.checkpoint"] or cfg.checkpoints_dir / "student.ckpt")
    if not path.exists():
        raise DataError(f"backbone checkpoint not found: {path} (run pretrain first)")
    return load_checkpoint(path)


def cmd_finetune(cfg: RunConfig) -> int:
    _prepare_run(cfg)
    vit_cfg = cfg.vit_config()
    region = cfg["finetune.region"]
    ft_cfg = cfg.finetune_config()
    split_tiles = {
        s: _load_tiles(cfg, [region], s)[region] for s in ("train", "val", "test")
    }
    if cfg["finetune.init"] == "pretrained":
        backbone = _load_backbone(cfg)
    elif cfg["finetune.init"] == "scratch":
        backbone = vit.init_vit_params(vit_cfg, seed=cfg.seed)
    else:
        raise ConfigError(f"finetune.init must be pretrained or scratch, got {cfg['finetune.init']!r}")

    labeled = finetune.subsample_labels(split_tiles["train"], ft_cfg.label_fraction, seed=cfg.seed)
    fit = finetune.finetune_fit(backbone, labeled, split_tiles["val"], vit_cfg, ft_cfg)
    test = split_tiles["test"][: cfg["finetune.test_cap"]] or split_tiles["test"]
    test_rmse = finetune.evaluate(fit.backbone, fit.decoder, test, vit_cfg, ft_cfg.feature_source)

    cfg.checkpoints_dir.mkdir(parents=True, exist_ok=True)
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    combined = fit.backbone.copy()
    combined.add("decoder.weight", fit.decoder.weight.astype(np.float32))
    combined.add("decoder.bias", np.array([fit.decoder.bias], dtype=np.float32))
    save_checkpoint(combined, cfg.checkpoints_dir / f"finetune_{region}.ckpt")
    finetune.write_finetune_csv(fit.curve, test_rmse, cfg.reports_dir / f"finetune_{region}.csv")
    print(
        f"fine-tuned {region} on {len(labeled)} labeled tiles ({cfg['finetune.init']}): "
        f"best val {fit.best_val_rmse:.4f} (epoch {fit.best_epoch}), test {test_rmse:.4f}"
    )
    return 0


def cmd_embed(cfg: RunConfig) -> int:
    _prepare_run(cfg)
    vit_cfg = cfg.vit_config()
    backbone = _load_backbone(cfg)
    per_region = _load_tiles(cfg, cfg["data.regions"], cfg["analysis.split"])
    pool = [t for r in cfg["data.regions"] for t in per_region[r]]
    es = embeddings.extract_embeddings(
        pool, backbone, vit_cfg, cap_per_region=cfg["analysis.cap_per_region"], seed=cfg.seed
    )
    cfg.embeddings_dir.mkdir(parents=True, exist_ok=True)
    embeddings.write_embeddings_csv(es, cfg.embeddings_dir / "embeddings.csv")
    print(f"embedded {len(es)} tiles (dim {es.dim}) -> {cfg.embeddings_dir / 'embeddings.csv'}")
    return 0


def _read_embeddings(cfg: RunConfig) -> embeddings.EmbeddingSet:
    path = cfg.embeddings_dir / "embeddings.csv"
    if not path.exists():
        raise DataError(f"embeddings not found: {path} (run embed first)")
    return embeddings.read_embeddings_csv(path)


def _layout_csv_path(cfg: RunConfig) -> Path:
    return cfg.reports_dir / "tsne_joint.csv"


def cmd_tsne(cfg: RunConfig) -> int:
    _prepare_run(cfg)
    es = _read_embeddings(cfg)
    layout = tsne.tsne_fit(
        es,
        perplexity=cfg["analysis.tsne_perplexity"],
        iterations=cfg["analysis.tsne_iterations"],
        seed=cfg.seed,
    )
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    spec = report.ScatterSpec("joint", layout, es, color_mode="label")
    report.emit_report([spec], [], [], cfg.reports_dir)
    print(f"tsne over {len(es)} embeddings: KL {layout.initial_kl:.4f} -> {layout.kl:.4f}")
    return 0


def cmd_swd(cfg: RunConfig) -> int:
    _prepare_run(cfg)
    es = _read_embeddings(cfg)
    regions = sorted(set(es.regions))
    rows = []
    for region in regions:  # within-region split-half rows first
        v = es.region_slice(region).vectors
        h = len(v) // 2
        if h:
            rows.append(
                (
                    region,
                    region,
                    swd.swd(
                        v[:h],
                        v[h:],
                        n_projections=cfg["analysis.swd_projections"],
                        n_seeds=cfg["analysis.swd_seeds"],
                        order=cfg["analysis.swd_order"],
                        base_seed=cfg.seed,
                    ),
                )
            )
    for i, a in enumerate(regions):
        for b in regions[i + 1 :]:
            rows.append(
                (
                    a,
                    b,
                    swd.swd(
                        es.region_slice(a).vectors,
                        es.region_slice(b).vectors,
                        n_projections=cfg["analysis.swd_projections"],
                        n_seeds=cfg["analysis.swd_seeds"],
                        order=cfg["analysis.swd_order"],
                        base_seed=cfg.seed,
                    ),
                )
            )
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    swd.write_swd_csv(rows, cfg.reports_dir / "swd.csv")
    print(f"wrote {len(rows)} SWD rows over {len(regions)} regions")
    return 0


def _load_fitted_model(cfg: RunConfig, region: str):
    path = cfg.checkpoints_dir / f"finetune_{region}.ckpt"
    if not path.exists():
        return None
    store = load_checkpoint(path)
    backbone = ParamStore()
    decoder_w = None
    decoder_b = None
    for name, node in store.items():
        if name == "decoder.weight":
            decoder_w = node.values.astype(np.float64)
        elif name == "decoder.bias":
            decoder_b = float(node.values[0])
        else:
            backbone.add(name, node.values)
    if decoder_w is None or decoder_b is None:
        raise DataError(f"{path}: checkpoint has no decoder parameters")
    return ana.FittedModel(
        backbone,
        finetune.DecoderParams(decoder_w, decoder_b),
        cfg["finetune.feature_source"],
    )


def cmd_eval_matrix(cfg: RunConfig) -> int:
    _prepare_run(cfg)
    vit_cfg = cfg.vit_config()
    infer_regions = cfg["analysis.infer_regions"] or cfg["data.regions"]
    models = {r: _load_fitted_model(cfg, r) for r in cfg["analysis.eval_regions"]}
    test_tiles = _load_tiles(cfg, infer_regions, "test")
    matrix = ana.eval_matrix(models, test_tiles, vit_cfg)
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    matrix.write_csv(cfg.reports_dir / "eval_matrix.csv")
    absent = sum(m is None for m in models.values())
    print(
        f"eval matrix {len(infer_regions)}x{len(models)} written"
        + (f" ({absent} absent checkpoints)" if absent else "")
    )
    return 0


def cmd_report(cfg: RunConfig) -> int:
    _prepare_run(cfg)
    scatters = []
    layout_path = _layout_csv_path(cfg)
    if layout_path.exists():
        es = _read_embeddings(cfg)
        coords, kl, perp, iters = _read_layout_csv(layout_path, es)
        layout = tsne.TsneLayout(coords, kl, kl, perp, iters)
        scatters.append(report.ScatterSpec("joint", layout, es, color_mode="label"))
    swd_rows = []
    swd_path = cfg.reports_dir / "swd.csv"
    if swd_path.exists():
        swd_rows = _read_swd_csv(swd_path)
    matrices = []
    matrix_path = cfg.reports_dir / "eval_matrix.csv"
    if matrix_path.exists():
        matrices.append(("regions", ana.read_eval_matrix_csv(matrix_path)))
    written = report.emit_report(scatters, swd_rows, matrices, cfg.reports_dir)
    print(f"report emitted {len(written)} files -> {cfg.reports_dir}")
    return 0


def _read_layout_csv(path: Path, es: embeddings.EmbeddingSet):
    import csv as _csv

    ids, xs, ys = [], [], []
    kl = perp = 0.0
    iters = 0
    with path.open(newline="") as fh:
        reader = _csv.reader(fh)
        next(reader)
        for row in reader:
            ids.append(row[0])
            xs.append(float(row[2]))
            ys.append(float(row[3]))
            kl, perp, iters = float(row[4]), float(row[5]), int(row[6])
    if ids != es.ids:
        raise DataError(f"{path}: layout rows do not match embeddings.csv rows")
    return np.column_stack([xs, ys]), kl, perp, iters


def _read_swd_csv(path: Path):
    import csv as _csv

    rows = []
    with path.open(newline="") as fh:
        reader = _csv.reader(fh)
        next(reader)
        for row in reader:
            rows.append(
                (
                    row[0],
                    row[1],
                    swd.SwdReport(float(row[2]), float(row[3]), int(row[4]), int(row[5]), int(row[6])),
                )
            )
    return rows


def cmd_gradcheck(cfg: RunConfig) -> int:
    _prepare_run(cfg)
    vit_cfg = cfg.vit_config()
    store = generic_eval_point(
        vit.init_vit_params(vit_cfg, seed=cfg.seed), scale=cfg["gradcheck.jitter"], seed=cfg.seed + 42
    )
    rng = np.random.default_rng(cfg.seed + 3)
    batch = rng.standard_normal((2, vit_cfg.channels, vit_cfg.image_size, vit_cfg.image_size))
    w = np.random.default_rng(cfg.seed).standard_normal((2, vit_cfg.head_output_dim))

    def loss(s):
        graph = vit.forward_graph(batch, s, vit_cfg)
        return (vit.dino_head_forward(graph.class_node, s) * w).sum()

    rep = check_gradients(
        loss, store, step=cfg["gradcheck.step"], sample=cfg["gradcheck.sample"], seed=cfg.seed
    )
    print(
        f"gradcheck max_rel_err {rep.max_rel_err:.6e} over {rep.n_checked} coordinates "
        f"(worst {rep.worst_name}[{rep.worst_index}])"
    )
    return 0 if rep.max_rel_err < 1e-4 else 1


HANDLERS = {
    "synth-data": cmd_synth_data,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "embed": cmd_embed,
    "tsne": cmd_tsne,
    "swd": cmd_swd,
    "eval-matrix": cmd_eval_matrix,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sardino",
        description="Desk-scale DINO lab for SAR-like tiles: synthetic data, "
        "self-distillation pre-training, vegetation fine-tuning, embedding analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", default=None, help="INI-style config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override one config value (repeatable)",
        )
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
    return parser


def run(command: str, config_path=None, overrides=(), seed: int | None = None) -> int:
    """Programmatic entry point mirroring the CLI contract."""
    cfg = load_config(config_path, overrides, seed)
    return HANDLERS[command](cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args.command, args.config, tuple(args.set), args.seed)
    except SardinoError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
