"""Deterministic CSV/SVG rendering of analysis outputs.

SVG scatters place one <circle> per embedding row, colored through a fixed
256-step colormap over log(1 + label) or absolute error. No timestamps or
other nondeterminism: identical inputs yield identical bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import EvalMatrix
from .embeddings import EmbeddingSet
from .errors import DataError
from .swd import SwdReport, write_swd_csv
from .tsne import TsneLayout

__all__ = ["ScatterSpec", "colormap_256", "color_of", "write_scatter_svg", "emit_report"]

# 256-step colormap interpolated through five anchors (dark blue -> teal ->
# green -> yellow), chosen to read naturally as "more vegetation / more error"
_ANCHORS = np.array(
    [
        (68, 1, 84),
        (59, 82, 139),
        (33, 145, 140),
        (94, 201, 98),
        (253, 231, 37),
    ],
    dtype=np.float64,
)


def colormap_256() -> np.ndarray:
    """(256, 3) uint8 lookup table."""
    steps = np.linspace(0.0, 1.0, 256)
    pos = np.linspace(0.0, 1.0, len(_ANCHORS))
    rgb = np.stack([np.interp(steps, pos, _ANCHORS[:, c]) for c in range(3)], axis=1)
    return rgb.round().astype(np.uint8)


_LUT = colormap_256()


def color_of(value: float, lo: float, hi: float) -> str:
    """Hex color for a value scaled into [lo, hi] through the 256-step map."""
    if hi <= lo:
        idx = 0
    else:
        idx = int(np.clip((value - lo) / (hi - lo) * 255.0, 0, 255))
    r, g, b = _LUT[idx]
    return f"#{r:02x}{g:02x}{b:02x}"


@dataclass
class ScatterSpec:
    """One scatter panel: a layout plus the metadata that colors it.

    color_mode "label" uses log(1 + label); "error" uses per-tile absolute
    errors from the embedding set.
    """

    name: str
    layout: TsneLayout
    embeddings: EmbeddingSet
    color_mode: str = "label"


def _color_values(spec: ScatterSpec) -> np.ndarray:
    if spec.color_mode == "label":
        return np.log1p(np.nan_to_num(spec.embeddings.labels, nan=0.0))
    if spec.color_mode == "error":
        if spec.embeddings.errors is None:
            raise DataError(f"scatter {spec.name}: color_mode 'error' but no errors attached")
        return np.abs(spec.embeddings.errors)
    raise DataError(f"scatter {spec.name}: unknown color_mode {spec.color_mode!r}")


def write_scatter_svg(spec: ScatterSpec, path, size: int = 640, radius: float = 3.0) -> None:
    """One <circle> per embedding row; deterministic output bytes."""
    coords = spec.layout.coords
    if coords.shape[0] != len(spec.embeddings):
        raise DataError(
            f"scatter {spec.name}: layout has {coords.shape[0]} points, "
            f"embedding set has {len(spec.embeddings)}"
        )
    values = _color_values(spec)
    lo, hi = float(values.min()), float(values.max())
    span = coords.max(axis=0) - coords.min(axis=0)
    span[span == 0] = 1.0
    margin = 2 * radius + 2
    scaled = (coords - coords.min(axis=0)) / span * (size - 2 * margin) + margin

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f"<title>{spec.name}</title>",
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for i in range(coords.shape[0]):
        cx = f"{scaled[i, 0]:.2f}"
        cy = f"{size - scaled[i, 1]:.2f}"
        lines.append(
            f'<circle cx="{cx}" cy="{cy}" r="{radius}" fill="{color_of(values[i], lo, hi)}"/>'
        )
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


def emit_report(
    scatters: list,
    swd_rows: list,
    matrices: list,
    out_dir,
) -> list:
    """Write every table as CSV and every scatter as SVG; return file names.

    ``scatters``: list of ScatterSpec. ``swd_rows``: (region_a, region_b,
    SwdReport) triples. ``matrices``: (name, EvalMatrix) pairs. An index.csv
    listing every emitted file (including an empty list) is always written.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"report directory not writable: {out_dir}: {exc}") from exc

    written: list[str] = []
    for spec in scatters:
        fname = f"tsne_{spec.name}.svg"
        write_scatter_svg(spec, out_dir / fname)
        written.append(fname)
        fname_csv = f"tsne_{spec.name}.csv"
        with (out_dir / fname_csv).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tile_id", "region", "x", "y", "kl", "perplexity", "iterations"])
            for i in range(len(spec.embeddings)):
                writer.writerow(
                    [
                        spec.embeddings.ids[i],
                        spec.embeddings.regions[i],
                        repr(float(spec.layout.coords[i, 0])),
                        repr(float(spec.layout.coords[i, 1])),
                        repr(float(spec.layout.kl)),
                        repr(float(spec.layout.perplexity)),
                        spec.layout.iterations,
                    ]
                )
        written.append(fname_csv)

    if swd_rows:
        write_swd_csv(swd_rows, out_dir / "swd.csv")
        written.append("swd.csv")

    for name, matrix in matrices:
        fname = f"eval_matrix_{name}.csv"
        matrix.write_csv(out_dir / fname)
        written.append(fname)

    with (out_dir / "index.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file"])
        for fname in written:
            writer.writerow([fname])
    return written
