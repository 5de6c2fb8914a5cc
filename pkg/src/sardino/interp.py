"""Bilinear resampling as explicit weight matrices.

Expressing interpolation as a matrix product keeps it exactly linear, which
lets positional-embedding resizing ride the autodiff matmul and makes the
same-size case a bit-exact identity.
"""

from __future__ import annotations

import numpy as np

__all__ = ["linear_weights", "resize_bilinear", "grid_interp_matrix"]


def linear_weights(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic matrix of 1D linear interpolation weights.

    Uses half-pixel centers (src = (dst + 0.5) * n_in / n_out - 0.5), clamped
    at the borders. n_out == n_in yields the identity matrix exactly.
    """
    if n_out == n_in:
        return np.eye(n_in)
    w = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    w[rows, lo] += 1.0 - frac
    w[rows, hi] += frac
    return w


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a channel-major (C, H, W) raster; dtype is preserved."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    wh = linear_weights(out_h, h).astype(img.dtype)
    ww = linear_weights(out_w, w).astype(img.dtype)
    return np.matmul(wh, np.matmul(img, ww.T))


def grid_interp_matrix(side_out: int, side_in: int) -> np.ndarray:
    """(side_out^2, side_in^2) matrix mapping a flattened row-major square
    grid to a resampled one: the Kronecker product of the two 1D weightings."""
    w = linear_weights(side_out, side_in)
    return np.kron(w, w)
