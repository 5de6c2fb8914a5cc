"""Per-tile class-token embeddings with region and label metadata.

Embeddings are the final-layer-norm class token, taken before the projection
head. Extraction caps the tile count per region (seeded subsample) the way
the analysis figures cap at 2000 tiles per region.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError
from .params import ParamStore
from .tiles import Tile
from .vit import VitConfig, forward_graph

__all__ = ["EmbeddingSet", "extract_embeddings", "write_embeddings_csv", "read_embeddings_csv"]


@dataclass
class EmbeddingSet:
    """Aligned arrays: one row per tile. labels/errors are NaN when absent."""

    ids: list
    regions: list
    labels: np.ndarray  # (n,) float, NaN = unlabeled
    vectors: np.ndarray  # (n, d) float32
    errors: np.ndarray | None = None  # (n,) absolute prediction errors

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.regions) == n == self.labels.shape[0] == self.vectors.shape[0]):
            raise DimensionError("embedding set arrays disagree on row count")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("embedding vectors must be finite")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def region_slice(self, region: str) -> "EmbeddingSet":
        mask = np.array([r == region for r in self.regions])
        return self._mask(mask)

    def _mask(self, mask: np.ndarray) -> "EmbeddingSet":
        idx = np.flatnonzero(mask)
        return EmbeddingSet(
            ids=[self.ids[i] for i in idx],
            regions=[self.regions[i] for i in idx],
            labels=self.labels[idx],
            vectors=self.vectors[idx],
            errors=None if self.errors is None else self.errors[idx],
        )

    def with_errors(self, errors: np.ndarray) -> "EmbeddingSet":
        errors = np.asarray(errors, dtype=np.float64)
        if errors.shape != (len(self),):
            raise DimensionError(f"errors shape {errors.shape} != ({len(self)},)")
        return EmbeddingSet(self.ids, self.regions, self.labels, self.vectors, errors)


def extract_embeddings(
    tiles: list[Tile],
    store: ParamStore,
    cfg: VitConfig,
    cap_per_region: int = 2000,
    seed: int = 0,
    batch_size: int = 128,
) -> EmbeddingSet:
    """Class-token embedding per tile, capped per region by seeded subsample."""
    if not tiles:
        raise DataError("extract_embeddings needs at least one tile")
    for t in tiles:
        if t.channels != cfg.channels:
            raise DimensionError(
                f"tile {t.id}: {t.channels} channels, config expects {cfg.channels}"
            )
    by_region: dict[str, list[int]] = {}
    for i, t in enumerate(tiles):
        by_region.setdefault(t.region, []).append(i)
    keep: list[int] = []
    for region in sorted(by_region):
        idx = by_region[region]
        if len(idx) > cap_per_region:
            rng = np.random.default_rng([seed] + list(region.encode("utf-8")))
            idx = [idx[j] for j in sorted(rng.choice(len(idx), size=cap_per_region, replace=False))]
        keep.extend(idx)
    keep.sort()
    chosen = [tiles[i] for i in keep]

    det = store.detached()
    vecs = []
    for start in range(0, len(chosen), batch_size):
        chunk = chosen[start : start + batch_size]
        graph = forward_graph(np.stack([t.data for t in chunk]), det, cfg)
        vecs.append(graph.class_node.values.copy())
    return EmbeddingSet(
        ids=[t.id for t in chosen],
        regions=[t.region for t in chosen],
        labels=np.array([np.nan if t.label is None else t.label for t in chosen]),
        vectors=np.concatenate(vecs, axis=0),
    )


def write_embeddings_csv(es: EmbeddingSet, path) -> None:
    """Header tile_id,region,label,v0..v{d-1}; empty label field when absent."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile_id", "region", "label"] + [f"v{i}" for i in range(es.dim)])
        for i in range(len(es)):
            label = "" if np.isnan(es.labels[i]) else repr(float(es.labels[i]))
            writer.writerow([es.ids[i], es.regions[i], label] + [repr(float(x)) for x in es.vectors[i]])


def read_embeddings_csv(path) -> EmbeddingSet:
    path = Path(path)
    ids, regions, labels, vectors = [], [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["tile_id", "region", "label"]:
            raise DataError(f"{path}: unexpected embeddings header {header}")
        dim = len(header) - 3
        for row in reader:
            ids.append(row[0])
            regions.append(row[1])
            labels.append(float(row[2]) if row[2] else np.nan)
            vectors.append([float(x) for x in row[3 : 3 + dim]])
    return EmbeddingSet(
        ids=ids,
        regions=regions,
        labels=np.array(labels, dtype=np.float64),
        vectors=np.array(vectors, dtype=np.float32),
    )
