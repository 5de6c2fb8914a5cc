"""Tile containers, SAR channel composition, band splits, synthetic regions.

A Tile is one multi-channel float32 raster chip tagged with a region, a
latitudinal band index, and an optional mean-vegetation label in [0, 100].
Bands are the unit of train/val/test assignment so that contiguous tiles
never straddle a split.

The synthetic generator replaces real downloads: each region recipe drives a
smooth latent vegetation field per tile and maps it to channels, either
amplitude-like (values rise with vegetation) or coherence-like (values fall,
steepest at high vegetation).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, ParameterError
from .interp import resize_bilinear

__all__ = [
    "SEASONS",
    "SPLITS",
    "Tile",
    "ManifestEntry",
    "SeasonalStack",
    "RegionRecipe",
    "compose_s1grd_channels",
    "compose_gssic_channels",
    "assign_splits",
    "synth_region",
    "compute_label",
    "write_tile",
    "read_tile",
    "write_manifest",
    "read_manifest",
    "coherence_clamp_count",
    "reset_coherence_clamp_count",
]

SEASONS = ("spring", "summer", "autumn", "winter")
SPLITS = ("train", "val", "test")
TILE_MAGIC = b"SART"
TILE_VERSION = 1

# Count of coherence samples clamped into [0, 1] by compose_gssic_channels;
# read with coherence_clamp_count(), reset per run if needed.
_clamp_count = 0


def coherence_clamp_count() -> int:
    return _clamp_count


def reset_coherence_clamp_count() -> None:
    global _clamp_count
    _clamp_count = 0


@dataclass
class Tile:
    """One raster chip: channel-major float32 data plus metadata."""

    id: str
    region: str
    band_index: int
    data: np.ndarray  # (C, H, W) float32
    label: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionError(f"tile {self.id}: data must be (C, H, W), got {self.data.shape}")
        if self.band_index < 0:
            raise DataError(f"tile {self.id}: band_index must be >= 0")
        if self.label is not None:
            self.label = float(self.label)
            if not (0.0 <= self.label <= 100.0):
                raise DataError(f"tile {self.id}: label {self.label} outside [0, 100]")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class ManifestEntry:
    tile_id: str
    region: str
    band_index: int
    split: str  # train / val / test / unassigned
    path: str


@dataclass
class SeasonalStack:
    """Raw seasonal observables keyed by season name.

    vv_db/vh_db hold amplitude in dB (so VV-VH is a plain subtraction);
    coh_12d/coh_24d hold interferometric coherence in [0, 1].
    """

    vv_db: dict = field(default_factory=dict)
    vh_db: dict = field(default_factory=dict)
    coh_12d: dict = field(default_factory=dict)
    coh_24d: dict = field(default_factory=dict)


def compose_s1grd_channels(stack: SeasonalStack) -> np.ndarray:
    """Amplitude composite: per season [VV, VH, VV-VH] in dB -> 12 channels."""
    layers = []
    for season in SEASONS:
        if season not in stack.vv_db or season not in stack.vh_db:
            raise DataError(f"amplitude raster missing for season: {season}")
        vv = np.asarray(stack.vv_db[season], dtype=np.float32)
        vh = np.asarray(stack.vh_db[season], dtype=np.float32)
        if vv.shape != vh.shape:
            raise DimensionError(f"{season}: VV {vv.shape} and VH {vh.shape} disagree")
        if layers and vv.shape != layers[0].shape:
            raise DimensionError(f"{season}: shape {vv.shape} != {layers[0].shape}")
        layers.extend([vv, vh, vv - vh])
    return np.stack(layers)


def compose_gssic_channels(stack: SeasonalStack) -> np.ndarray:
    """Coherence composite: per season [coh_12d, coh_24d] -> 8 channels.

    Values outside [0, 1] are clamped; each clamped sample increments the
    module clamp counter.
    """
    global _clamp_count
    layers = []
    for season in SEASONS:
        for delta, rasters in (("12d", stack.coh_12d), ("24d", stack.coh_24d)):
            if season not in rasters:
                raise DataError(f"coherence raster missing: {season} {delta}")
            coh = np.asarray(rasters[season], dtype=np.float32)
            bad = int(np.count_nonzero((coh < 0.0) | (coh > 1.0)))
            if bad:
                _clamp_count += bad
                coh = np.clip(coh, 0.0, 1.0)
            if layers and coh.shape != layers[0].shape:
                raise DimensionError(f"{season} {delta}: shape {coh.shape} != {layers[0].shape}")
            layers.append(coh)
    return np.stack(layers)


_SPLIT_CYCLE = ("train", "train", "train", "val", "test")


def assign_splits(band_indices, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> dict:
    """Assign whole bands to train/val/test by cycling [t, t, t, v, e].

    Bands are ordered by index and walk the 5-slot cycle from an offset; only
    offsets whose realized counts stay within one band of the target
    fractions are eligible, and the seed picks among them. Every tile in a
    band inherits the band's split, which is the leakage guard.
    """
    bands = sorted(set(int(b) for b in band_indices))
    if len(bands) < 5:
        raise ConfigError(f"need at least 5 bands per region to split, got {len(bands)}")
    if tuple(fractions) != (0.6, 0.2, 0.2):
        raise ConfigError(f"only 60/20/20 splits are supported, got {fractions}")
    n = len(bands)
    targets = {name: frac * n for name, frac in zip(SPLITS, fractions)}

    valid_offsets = []
    for offset in range(len(_SPLIT_CYCLE)):
        assigned = [_SPLIT_CYCLE[(offset + i) % len(_SPLIT_CYCLE)] for i in range(n)]
        counts = {name: assigned.count(name) for name in SPLITS}
        if all(abs(counts[name] - targets[name]) <= 1.0 for name in SPLITS):
            valid_offsets.append(offset)
    rng = np.random.default_rng(seed)
    offset = valid_offsets[int(rng.integers(len(valid_offsets)))]
    return {
        band: _SPLIT_CYCLE[(offset + i) % len(_SPLIT_CYCLE)] for i, band in enumerate(bands)
    }


def compute_label(vegetation: np.ndarray) -> float:
    """Mean vegetation percentage of a raster in [0, 100]."""
    vegetation = np.asarray(vegetation)
    if vegetation.size == 0:
        raise DataError("cannot compute label of an empty vegetation raster")
    return float(vegetation.mean())


@dataclass(frozen=True)
class RegionRecipe:
    """Generative recipe for one synthetic region.

    Each tile is a soft mosaic of bare ground (veg_lo) and vegetated cover
    (veg_hi): a smooth latent field is thresholded per tile at a quantile
    drawn from the region's cover-fraction distribution, so the label (the
    spatial mean of v) tracks the vegetated fraction.

    Channels respond to v per pixel: kind "amplitude" rises with vegetation
    (offset + gain * v/100), kind "coherence" falls, steepest at dense cover
    (offset - gain * (v/100)^2, clipped to [0, 1]). Every tile also carries a
    shared calibration offset (jitter_std) across its channels, so absolute
    intensity alone is an unreliable vegetation readout, as it is for real
    uncalibrated backscatter.
    """

    name: str
    veg_lo: float  # bare-ground vegetation percentage
    veg_hi: float  # full-cover vegetation percentage
    frac_mean: float  # region mean of the vegetated cover fraction
    frac_spread: float  # std of the per-tile cover fraction
    edge_width: float  # softness of cover edges in latent-field units
    smooth_cells: int  # low-res grid side for the smooth field
    kind: str  # "amplitude" | "coherence"
    channel_gain: tuple
    channel_offset: tuple
    noise_std: float
    jitter_std: float = 0.0  # per-tile calibration offset, shared by channels
    nuisance_std: float = 0.0  # per-tile moisture-like factor, collinear with v
    n_bands: int = 10

    def __post_init__(self):
        if self.kind not in ("amplitude", "coherence"):
            raise ConfigError(f"unknown recipe kind: {self.kind}")
        if len(self.channel_gain) != len(self.channel_offset):
            raise ConfigError("channel_gain and channel_offset lengths differ")
        if not (0.0 <= self.veg_lo <= self.veg_hi <= 100.0):
            raise ConfigError("need 0 <= veg_lo <= veg_hi <= 100")


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """Smooth zero-mean field: low-res noise, bilinear upsample, unit-std."""
    coarse = rng.standard_normal((1, cells, cells)).astype(np.float32)
    fine = resize_bilinear(coarse, h, w)[0]
    std = fine.std()
    return fine / std if std > 0 else fine


def synth_region(
    recipe: RegionRecipe, n_tiles: int, height: int, width: int, channels: int, seed: int = 0
) -> list[Tile]:
    """Generate labeled tiles for one region from its recipe.

    Tiles are laid out in rows; the row index is the latitudinal band. Each
    tile draws from its own seeded RNG stream, so generation order (or
    parallelization) cannot change the output.
    """
    if n_tiles < 1:
        raise ParameterError(f"n_tiles must be >= 1, got {n_tiles}")
    if channels != len(recipe.channel_gain):
        raise ConfigError(
            f"recipe {recipe.name} defines {len(recipe.channel_gain)} channels, asked for {channels}"
        )
    gain = np.asarray(recipe.channel_gain, dtype=np.float32).reshape(-1, 1, 1)
    offset = np.asarray(recipe.channel_offset, dtype=np.float32).reshape(-1, 1, 1)
    row_len = max(1, math.ceil(n_tiles / recipe.n_bands))

    tiles = []
    for i in range(n_tiles):
        rng = np.random.default_rng([seed, i])
        field = _smooth_field(rng, height, width, recipe.smooth_cells)
        frac = float(np.clip(rng.normal(recipe.frac_mean, recipe.frac_spread), 0.02, 0.98))
        thresh = float(np.quantile(field, 1.0 - frac))
        cover = 1.0 / (1.0 + np.exp(-(field - thresh) / recipe.edge_width))
        v = (recipe.veg_lo + (recipe.veg_hi - recipe.veg_lo) * cover).astype(np.float32)
        vfrac = v[None, :, :] / 100.0
        noise = recipe.noise_std * rng.standard_normal((channels, height, width)).astype(np.float32)
        jitter = recipe.jitter_std * rng.normal()
        # nuisance enters through the same gains as vegetation, so tile-mean
        # intensity confounds the two; only within-tile texture separates them
        nuisance = recipe.nuisance_std * rng.normal()
        if recipe.kind == "amplitude":
            data = offset + jitter + gain * (vfrac + nuisance) + noise
        else:
            data = np.clip(offset + jitter - gain * (vfrac**2 + nuisance) + noise, 0.0, 1.0)
        tiles.append(
            Tile(
                id=f"{recipe.name}-{i:05d}",
                region=recipe.name,
                band_index=i // row_len,
                data=data.astype(np.float32),
                label=compute_label(v),
            )
        )
    return tiles


# ---- on-disk formats -------------------------------------------------------


def write_tile(tile: Tile, path) -> None:
    """SART binary layout; float32 little-endian, channel-major raster."""
    path = Path(path)
    tid = tile.id.encode("utf-8")
    region = tile.region.encode("utf-8")
    label = np.float32(np.nan if tile.label is None else tile.label)
    c, h, w = tile.data.shape
    header = b"".join(
        [
            TILE_MAGIC,
            struct.pack("<H", TILE_VERSION),
            struct.pack("<H", len(tid)),
            tid,
            struct.pack("<H", len(region)),
            region,
            struct.pack("<I", tile.band_index),
            struct.pack("<HHH", c, h, w),
            struct.pack("<f", label),
        ]
    )
    path.write_bytes(header + np.asarray(tile.data, dtype="<f4").tobytes())


def read_tile(path) -> Tile:
    blob = Path(path).read_bytes()
    if blob[:4] != TILE_MAGIC:
        raise DataError(f"{path}: not a SART tile (magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != TILE_VERSION:
        raise DataError(f"{path}: unsupported tile version {version}")
    off = 6
    (nlen,) = struct.unpack_from("<H", blob, off)
    off += 2
    tid = blob[off : off + nlen].decode("utf-8")
    off += nlen
    (rlen,) = struct.unpack_from("<H", blob, off)
    off += 2
    region = blob[off : off + rlen].decode("utf-8")
    off += rlen
    (band,) = struct.unpack_from("<I", blob, off)
    off += 4
    c, h, w = struct.unpack_from("<HHH", blob, off)
    off += 6
    (label,) = struct.unpack_from("<f", blob, off)
    off += 4
    data = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
    return Tile(
        id=tid,
        region=region,
        band_index=band,
        data=data.copy(),
        label=None if math.isnan(label) else float(label),
    )


def write_manifest(entries, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile_id", "region", "band_index", "split", "path"])
        for e in entries:
            writer.writerow([e.tile_id, e.region, e.band_index, e.split, e.path])


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["tile_id", "region", "band_index", "split", "path"]:
            raise DataError(f"{path}: unexpected manifest header {header}")
        seen = set()
        for row in reader:
            tile_id, region, band_index, split, tile_path = row
            if tile_id in seen:
                raise DataError(f"{path}: duplicate tile id {tile_id}")
            seen.add(tile_id)
            if split not in SPLITS + ("unassigned",):
                raise DataError(f"{path}: bad split {split!r} for {tile_id}")
            entries.append(ManifestEntry(tile_id, region, int(band_index), split, tile_path))
    return entries
