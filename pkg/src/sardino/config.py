"""Flat INI-style run configuration: `[section]` headers and `key = value`.

Every run resolves its configuration (file, then --set overrides, then
--seed) into a RunConfig and writes the resolved copy next to its outputs;
that copy alone reproduces the run. Unknown sections or keys are rejected
with the offending line number.
"""

from __future__ import annotations

import os
from pathlib import Path

from .dino import DinoConfig
from .errors import ConfigError
from .finetune import FinetuneConfig
from .vit import VitConfig

__all__ = ["RunConfig", "load_config", "SCHEMA", "OUT_ROOT_ENV"]

OUT_ROOT_ENV = "SARDINO_OUT_ROOT"

# kind: int | float | str | bool | list (comma-separated strings) |
#       range (comma pair of floats)
SCHEMA: dict = {
    "run": {
        "out_root": ("str", ""),  # empty -> $SARDINO_OUT_ROOT or ./runs
        "run_id": ("str", "run"),
        "seed": ("int", 0),
    },
    "data": {
        "regions": ("list", "regA,regB,regC,regD"),
        "tiles_per_region": ("int", 300),
        "tile_size": ("int", 32),
    },
    "vit": {
        "image_size": ("int", 32),
        "patch_size": ("int", 8),
        "channels": ("int", 3),
        "embed_dim": ("int", 64),
        "depth": ("int", 4),
        "heads": ("int", 4),
        "head_output_dim": ("int", 256),
    },
    "dino": {
        "teacher_temp": ("float", 0.008),
        "student_temp": ("float", 0.04),
        "warmup_teacher_temp": ("float", 0.04),
        "warmup_teacher_temp_epochs": ("int", 3),
        "center_momentum": ("float", 0.9),
        "ema_momentum": ("float", 0.99),
        "learning_rate": ("float", 3e-4),
        "n_global_crops": ("int", 2),
        "n_local_crops": ("int", 4),
        "global_crop_scale": ("range", "0.5,1.0"),
        "local_crop_scale": ("range", "0.2,0.5"),
        "global_size": ("int", 32),
        "local_size": ("int", 16),
        "epochs": ("int", 10),
        "batch_size": ("int", 16),
        "pretrain_regions": ("list", "regA,regB,regC"),
        "max_tiles": ("int", 0),  # 0 = use every training tile
    },
    "finetune": {
        "region": ("str", "regA"),
        "label_fraction": ("float", 0.01),
        "mode": ("str", "frozen_backbone"),
        "learning_rate": ("float", 0.05),
        "backbone_lr": ("float", 1e-4),
        "epochs": ("int", 300),
        "batch_size": ("int", 64),
        "feature_source": ("str", "class_token"),
        "init": ("str", "pretrained"),  # pretrained | scratch
        "checkpoint": ("str", ""),  # override for the pretrained backbone
        "val_cap": ("int", 96),
        "test_cap": ("int", 250),
    },
    "analysis": {
        "split": ("str", "test"),
        "cap_per_region": ("int", 2000),
        "tsne_perplexity": ("float", 30.0),
        "tsne_iterations": ("int", 1000),
        "swd_projections": ("int", 10000),
        "swd_seeds": ("int", 10),
        "swd_order": ("int", 2),
        "eval_regions": ("list", "regA,regB,regC"),
        "infer_regions": ("list", ""),  # empty -> data.regions
    },
    "gradcheck": {
        "sample": ("int", 400),
        "step": ("float", 1e-3),
        "jitter": ("float", 0.1),
    },
}


def _parse_value(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "list":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if kind == "range":
            lo, hi = (float(x) for x in raw.split(","))
            return (lo, hi)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"{where}: unknown schema kind {kind}")


class RunConfig:
    """Resolved configuration plus derived paths and dataclass views."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, dotted: str):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    # ---- derived paths ---------------------------------------------------

    @property
    def out_root(self) -> Path:
        root = self["run.out_root"] or os.environ.get(OUT_ROOT_ENV, "runs")
        return Path(root)

    @property
    def run_dir(self) -> Path:
        return self.out_root / self["run.run_id"]

    @property
    def tiles_dir(self) -> Path:
        return self.run_dir / "tiles"

    @property
    def manifest_path(self) -> Path:
        return self.tiles_dir / "manifest.csv"

    @property
    def checkpoints_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    @property
    def embeddings_dir(self) -> Path:
        return self.run_dir / "embeddings"

    @property
    def reports_dir(self) -> Path:
        return self.run_dir / "reports"

    @property
    def seed(self) -> int:
        return self["run.seed"]

    # ---- dataclass views ---------------------------------------------------

    def vit_config(self) -> VitConfig:
        v = self.values["vit"]
        return VitConfig(**v)

    def dino_config(self) -> DinoConfig:
        d = dict(self.values["dino"])
        d.pop("pretrain_regions")
        d.pop("max_tiles")
        return DinoConfig(seed=self.seed, **d)

    def finetune_config(self, seed: int | None = None, region: str | None = None) -> FinetuneConfig:
        f = dict(self.values["finetune"])
        for drop in ("region", "init", "checkpoint", "test_cap"):
            f.pop(drop)
        f["regions"] = (region or self["finetune.region"],)
        return FinetuneConfig(seed=self.seed if seed is None else seed, **f)

    def write_resolved(self, path) -> None:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key, (kind, _) in SCHEMA[section].items():
                val = self.values[section][key]
                if isinstance(val, tuple):
                    val = ",".join(str(x) for x in val)
                lines.append(f"{key} = {val}")
            lines.append("")
        Path(path).write_text("\n".join(lines))


def _defaults() -> dict:
    values: dict = {}
    for section, keys in SCHEMA.items():
        values[section] = {
            key: _parse_value(kind, str(default), f"default {section}.{key}")
            for key, (kind, default) in keys.items()
        }
    return values


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Parse a config file, apply `section.key=value` overrides, then seed.

    Malformed lines, unknown sections, and unknown keys raise ConfigError
    with the file name and line number.
    """
    values = _defaults()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        section = None
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith(("#", ";")):
                continue
            where = f"{path}:{lineno}"
            if line.startswith("["):
                if not line.endswith("]"):
                    raise ConfigError(f"{where}: malformed section header {line!r}")
                section = line[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(f"{where}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
            if section is None:
                raise ConfigError(f"{where}: key outside any [section]")
            key, _, rawval = line.partition("=")
            key = key.strip()
            if key not in SCHEMA[section]:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            kind = SCHEMA[section][key][0]
            values[section][key] = _parse_value(kind, rawval, where)

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, _, rawval = item.partition("=")
        section, _, key = dotted.strip().partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown override target {dotted.strip()!r}")
        values[section][key] = _parse_value(SCHEMA[section][key][0], rawval, f"override {dotted}")

    if seed is not None:
        values["run"]["seed"] = int(seed)
    return RunConfig(values)
