"""Cross-region evaluation matrices and distance-vs-error correlation.

These are the generalizability measurements: how a model fine-tuned in one
region performs when inferring in every other region, and whether a tile's
distance from the fine-tuning embedding cloud predicts its error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .embeddings import EmbeddingSet
from .errors import DataError, DimensionError
from .finetune import DecoderParams, evaluate
from .params import ParamStore
from .tiles import Tile
from .vit import VitConfig

__all__ = [
    "EvalMatrix",
    "CorrelationReport",
    "FittedModel",
    "eval_matrix",
    "distance_error_correlation",
    "read_eval_matrix_csv",
]


@dataclass
class FittedModel:
    """One fine-tuned checkpoint: backbone store + linear decoder."""

    backbone: ParamStore
    decoder: DecoderParams
    feature_source: str = "attention"


@dataclass
class EvalMatrix:
    """RMSE grid: rows = inference region, columns = fine-tune region.

    NaN marks an absent cell (missing checkpoint), which is reported rather
    than treated as a failure.
    """

    finetune_regions: list
    inference_regions: list
    values: np.ndarray  # (len(inference), len(finetune))

    def cell(self, infer_region: str, ft_region: str) -> float:
        return float(
            self.values[
                self.inference_regions.index(infer_region),
                self.finetune_regions.index(ft_region),
            ]
        )

    def write_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["inference_region"] + list(self.finetune_regions))
            for i, region in enumerate(self.inference_regions):
                row = [region]
                for v in self.values[i]:
                    row.append("" if np.isnan(v) else repr(float(v)))
                writer.writerow(row)


def read_eval_matrix_csv(path) -> EvalMatrix:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "inference_region":
            raise DataError(f"{path}: unexpected eval-matrix header {header}")
        ft_regions = header[1:]
        infer_regions, rows = [], []
        for row in reader:
            infer_regions.append(row[0])
            rows.append([float(x) if x else np.nan for x in row[1:]])
    return EvalMatrix(ft_regions, infer_regions, np.array(rows, dtype=np.float64))


def eval_matrix(
    models: dict,
    test_tiles: dict,
    vit_cfg: VitConfig,
) -> EvalMatrix:
    """RMSE of every fine-tuned model on every region's test split.

    ``models`` maps fine-tune region name -> FittedModel (or None for a
    missing checkpoint, which yields NaN cells). ``test_tiles`` maps region
    name -> labeled tiles. A combined-regions model appears simply as one
    more key in ``models``.
    """
    ft_regions = list(models)
    infer_regions = list(test_tiles)
    values = np.full((len(infer_regions), len(ft_regions)), np.nan)
    for j, ft_region in enumerate(ft_regions):
        model = models[ft_region]
        if model is None:
            continue
        for i, infer_region in enumerate(infer_regions):
            tiles = test_tiles[infer_region]
            if not tiles:
                continue
            values[i, j] = evaluate(
                model.backbone, model.decoder, tiles, vit_cfg, model.feature_source
            )
    return EvalMatrix(ft_regions, infer_regions, values)


@dataclass
class CorrelationReport:
    rho: float
    tied: bool  # True when errors (or distances) carried no rank information
    n: int


def distance_error_correlation(
    infer_embeddings: EmbeddingSet, finetune_embeddings: EmbeddingSet
) -> CorrelationReport:
    """Spearman rank correlation between embedding distance and |error|.

    Distance is Euclidean, from each inference tile's embedding to the
    centroid of the fine-tune set's embeddings. The inference set must carry
    per-tile absolute errors; degenerate all-tied inputs report rho = 0 with
    the tie flag set.
    """
    if infer_embeddings.errors is None:
        raise DataError("inference embeddings carry no per-tile errors")
    n = len(infer_embeddings)
    if n < 10:
        raise DataError(f"need at least 10 inference tiles for a rank correlation, got {n}")
    if infer_embeddings.dim != finetune_embeddings.dim:
        raise DimensionError(
            f"embedding dims differ: {infer_embeddings.dim} vs {finetune_embeddings.dim}"
        )
    centroid = finetune_embeddings.vectors.mean(axis=0)
    dist = np.linalg.norm(infer_embeddings.vectors - centroid, axis=1)
    err = np.abs(infer_embeddings.errors)
    if np.all(err == err[0]) or np.all(dist == dist[0]):
        return CorrelationReport(rho=0.0, tied=True, n=n)
    rho = float(stats.spearmanr(dist, err).statistic)
    return CorrelationReport(rho=rho, tied=False, n=n)


def prediction_errors(
    model: FittedModel, tiles: list[Tile], vit_cfg: VitConfig
) -> np.ndarray:
    """Per-tile |prediction - label| for labeled tiles under one model."""
    from .finetune import decoder_forward, features_for_tiles

    labels = np.array([t.label for t in tiles], dtype=np.float64)
    if np.any([t.label is None for t in tiles]):
        raise DataError("prediction_errors needs labeled tiles")
    feats = features_for_tiles(tiles, model.backbone, vit_cfg, model.feature_source)
    preds = decoder_forward(feats, model.decoder)
    return np.abs(np.asarray(preds, dtype=np.float64) - labels)
