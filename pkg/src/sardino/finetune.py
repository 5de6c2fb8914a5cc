"""Supervised fine-tuning: a linear decoder from attention features to
mean vegetation percentage.

The decoder consumes the final block's class-token attention rows
(head-major concatenation) by default; the class-token embedding itself is
available as a config option. Training minimizes MSE on unclamped outputs;
predictions are clamped to [0, 100] only at inference, so gradients never
saturate.

Conditioning note: attention features live at the 1/N scale while labels are
percentages, so the fit standardizes features (and centers labels) internally
and folds the affine map back into the returned plain (weight, bias) pair.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, NumericError
from .params import ParamStore, adam_step
from .tiles import Tile
from .vit import VitConfig, forward_graph, attention_feature_node

__all__ = [
    "FinetuneConfig",
    "DecoderParams",
    "EpochLog",
    "FinetuneResult",
    "subsample_labels",
    "decoder_forward",
    "features_for_tiles",
    "finetune_fit",
    "rmse",
    "evaluate",
    "write_finetune_csv",
]

FEATURE_SOURCES = ("attention", "class_token")
MODES = ("frozen_backbone", "full")


@dataclass(frozen=True)
class FinetuneConfig:
    label_fraction: float = 0.01
    mode: str = "full"
    learning_rate: float = 0.02  # decoder
    backbone_lr: float = 1e-4  # used by mode="full" only
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    regions: tuple = ()
    feature_source: str = "attention"
    val_cap: int = 128  # per-epoch validation subsample cap

    def __post_init__(self):
        if not (0.0 < self.label_fraction <= 1.0):
            raise ConfigError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.feature_source not in FEATURE_SOURCES:
            raise ConfigError(f"feature_source must be one of {FEATURE_SOURCES}")


@dataclass
class DecoderParams:
    """Plain linear readout over raw features: prediction = weight . f + bias."""

    weight: np.ndarray
    bias: float


@dataclass
class EpochLog:
    epoch: int
    train_mse: float
    val_rmse: float


@dataclass
class FinetuneResult:
    decoder: DecoderParams
    backbone: ParamStore
    curve: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_rmse: float = math.inf


def subsample_labels(entries, fraction: float, seed: int = 0) -> list:
    """Seeded uniform subset of ceil(fraction * n) entries, no replacement."""
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    entries = list(entries)
    k = math.ceil(fraction * len(entries))
    if k >= len(entries):
        return entries
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(entries), size=k, replace=False)
    return [entries[i] for i in sorted(picks)]


def decoder_forward(features: np.ndarray, params: DecoderParams) -> np.ndarray | float:
    """Inference: weight . features + bias, clamped into [0, 100].

    Training uses the unclamped graph internally so gradients stay alive at
    the saturation boundaries.
    """
    features = np.asarray(features)
    if features.shape[-1] != params.weight.shape[0]:
        raise DimensionError(
            f"feature dim {features.shape[-1]} != decoder dim {params.weight.shape[0]}"
        )
    raw = features @ params.weight + params.bias
    out = np.clip(raw, 0.0, 100.0)
    return float(out) if out.ndim == 0 else out


def features_for_tiles(
    tiles: list[Tile],
    store: ParamStore,
    cfg: VitConfig,
    source: str = "attention",
    batch_size: int = 128,
) -> np.ndarray:
    """Gradient-free feature matrix (n, F) for a list of full-size tiles."""
    det = store.detached()
    out = []
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start : start + batch_size]
        graph = forward_graph(np.stack([t.data for t in chunk]), det, cfg)
        if source == "attention":
            rows = graph.class_attention(-1)
            out.append(rows.reshape(rows.shape[0], -1))
        else:
            out.append(graph.class_node.values.copy())
    return np.concatenate(out, axis=0)


def rmse(predictions, labels) -> float:
    """sqrt(mean((p - y)^2)); symmetric, zero iff exact."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"rmse length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise DataError("rmse of empty vectors is undefined")
    return float(np.sqrt(np.mean((p - y) ** 2)))


def _labels_of(tiles: list[Tile]) -> np.ndarray:
    missing = [t.id for t in tiles if t.label is None]
    if missing:
        raise DataError(f"tiles without labels in a supervised split: {missing[:4]} ...")
    return np.array([t.label for t in tiles], dtype=np.float64)


def _fold_affine(w_std, b_std, mu, sigma) -> DecoderParams:
    """Undo internal standardization: w.(f-mu)/sigma + b == (w/sigma).f + b'."""
    w = w_std / sigma
    return DecoderParams(weight=w.astype(np.float64), bias=float(b_std - float(w @ mu)))


def finetune_fit(
    backbone: ParamStore,
    train_tiles: list[Tile],
    val_tiles: list[Tile],
    vit_cfg: VitConfig,
    cfg: FinetuneConfig,
) -> FinetuneResult:
    """Fit the decoder (and optionally the backbone) by MSE.

    frozen_backbone precomputes features once and never touches the backbone
    (bit-exact contract); full backpropagates into a private copy of the
    backbone with its own learning rate. Validation RMSE is recorded per
    epoch and the best-validation state is returned.
    """
    if not train_tiles or not val_tiles:
        raise DataError("finetune_fit needs non-empty train and validation tile lists")
    y_train = _labels_of(train_tiles)
    y_val_all = _labels_of(val_tiles)

    rng = np.random.default_rng(cfg.seed)
    if len(val_tiles) > cfg.val_cap:
        keep = sorted(rng.choice(len(val_tiles), size=cfg.val_cap, replace=False))
        val_tiles = [val_tiles[i] for i in keep]
        y_val = y_val_all[keep]
    else:
        y_val = y_val_all

    frozen = cfg.mode == "frozen_backbone"
    net = backbone if frozen else backbone.copy()

    feats0 = features_for_tiles(train_tiles, net, vit_cfg, cfg.feature_source)
    mu = feats0.mean(axis=0)
    sigma = np.maximum(feats0.std(axis=0), 1e-6)
    y_mean = float(y_train.mean())

    dec = ParamStore()
    dec.add("weight", np.zeros((feats0.shape[1], 1), dtype=np.float32))
    dec.add("bias", np.array([y_mean], dtype=np.float32))

    if frozen:
        feats_val = features_for_tiles(val_tiles, net, vit_cfg, cfg.feature_source)

    def standardized(node_or_arr):
        return T.mul(T.add(node_or_arr, (-mu).astype(np.float32)), (1.0 / sigma).astype(np.float32))

    def val_rmse_now() -> float:
        params = _fold_affine(
            dec["weight"].values[:, 0].astype(np.float64), float(dec["bias"].values[0]), mu, sigma
        )
        fv = feats_val if frozen else features_for_tiles(val_tiles, net, vit_cfg, cfg.feature_source)
        return rmse(decoder_forward(fv, params), y_val)

    n = len(train_tiles)
    curve: list[EpochLog] = []
    best = FinetuneResult(
        decoder=_fold_affine(np.zeros(feats0.shape[1]), y_mean, mu, sigma), backbone=net
    )
    best_state = None

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(n)
        sq_sum, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            yb = y_train[idx].astype(np.float32)
            if frozen:
                f_node = T.as_node(feats0[idx].astype(np.float32))
            else:
                batch = np.stack([train_tiles[i].data for i in idx])
                graph = forward_graph(batch, net, vit_cfg)
                if cfg.feature_source == "attention":
                    f_node = attention_feature_node(graph)
                else:
                    f_node = graph.class_node
            pred = T.reshape(T.matmul(standardized(f_node), dec["weight"]), (-1,)) + dec["bias"]
            err = pred - T.as_node(yb)
            loss = T.tensor_mean(T.mul(err, err))
            lv = float(loss.values)
            if not math.isfinite(lv):
                raise NumericError(f"non-finite fine-tune loss at epoch {epoch}")
            loss.backward()
            adam_step(dec, lr=cfg.learning_rate)
            if not frozen:
                adam_step(net, lr=cfg.backbone_lr)
            sq_sum += lv * len(idx)
            count += len(idx)

        vr = val_rmse_now()
        curve.append(EpochLog(epoch, sq_sum / count, vr))
        if vr < best.best_val_rmse:
            best.best_val_rmse = vr
            best.best_epoch = epoch
            best_state = (
                dec["weight"].values.copy(),
                float(dec["bias"].values[0]),
                None if frozen else net.copy(),
            )

    if best_state is not None:
        w_best, b_best, net_best = best_state
        best.decoder = _fold_affine(w_best[:, 0].astype(np.float64), b_best, mu, sigma)
        best.backbone = net if net_best is None else net_best
    best.curve = curve
    return best


def evaluate(
    backbone: ParamStore,
    decoder: DecoderParams,
    tiles: list[Tile],
    vit_cfg: VitConfig,
    source: str = "attention",
) -> float:
    """Clamped-prediction RMSE of a fitted model on labeled tiles."""
    feats = features_for_tiles(tiles, backbone, vit_cfg, source)
    return rmse(decoder_forward(feats, decoder), _labels_of(tiles))


def write_finetune_csv(curve, test_rmse: float | None, path) -> None:
    """Per-epoch rows plus a final test-RMSE line (epoch column 'test')."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mse", "val_rmse"])
        for row in curve:
            writer.writerow([row.epoch, repr(row.train_mse), repr(row.val_rmse)])
        if test_rmse is not None:
            writer.writerow(["test", "", repr(float(test_rmse))])
