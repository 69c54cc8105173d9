"""Separable image interpolation with an explicit, documented convention.

All spatial resampling in this package (positional-embedding grids, crop
resizing) goes through the weight matrices built here, so every consumer
shares one convention:

  * align_corners=True sampling: source coordinate of output index j is
    j * (n_src - 1) / (n_dst - 1); for n_dst == 1 the source center.
  * "bicubic" uses the Catmull-Rom kernel (cubic convolution, a = -0.5),
    which reproduces linear ramps exactly away from borders.
  * Out-of-range taps are clamped to the edge sample.

Because interpolation is expressed as a dense [n_dst, n_src] matrix, a
2D resize is just `W_rows @ image @ W_cols.T` and is differentiable when
applied to torch tensors.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

MODES = ("bilinear", "bicubic")


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel evaluated at |t|."""
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = (a + 2.0) * t[near] ** 3 - (a + 3.0) * t[near] ** 2 + 1.0
    out[far] = a * t[far] ** 3 - 5.0 * a * t[far] ** 2 + 8.0 * a * t[far] - 4.0 * a
    return out


@lru_cache(maxsize=None)
def interp_weights(n_src: int, n_dst: int, mode: str = "bicubic") -> np.ndarray:
    """Build the [n_dst, n_src] 1D resampling matrix.

    Rows sum to 1, so constant signals are preserved exactly. Treat the
    returned (cached) array as read-only.
    """
    if n_src < 1 or n_dst < 1:
        raise ValueError(f"degenerate interpolation size {n_src} -> {n_dst}")
    if mode not in MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")

    if n_dst == 1:
        src = np.array([(n_src - 1) / 2.0])
    else:
        src = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)

    base = np.floor(src).astype(int)
    frac = src - base
    w = np.zeros((n_dst, n_src))

    if mode == "bilinear":
        taps = [(0, 1.0 - frac), (1, frac)]
    else:
        taps = [
            (-1, _cubic_kernel(frac + 1.0)),
            (0, _cubic_kernel(frac)),
            (1, _cubic_kernel(1.0 - frac)),
            (2, _cubic_kernel(2.0 - frac)),
        ]

    rows = np.arange(n_dst)
    for offset, weight in taps:
        cols = np.clip(base + offset, 0, n_src - 1)
        np.add.at(w, (rows, cols), weight)
    return w


def resize_plane(img: np.ndarray, out_h: int, out_w: int, mode: str = "bicubic") -> np.ndarray:
    """Resize a single [H, W] array; identity when shapes already match."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img
    wr = interp_weights(h, out_h, mode)
    wc = interp_weights(w, out_w, mode)
    return wr @ img @ wc.T


def resize_stack(imgs: np.ndarray, out_h: int, out_w: int, mode: str = "bicubic") -> np.ndarray:
    """Resize [..., H, W] along the trailing two axes with shared geometry."""
    h, w = imgs.shape[-2:]
    if (h, w) == (out_h, out_w):
        return imgs
    wr = interp_weights(h, out_h, mode)
    wc = interp_weights(w, out_w, mode)
    return np.einsum("ij,...jk,lk->...il", wr, imgs, wc, optimize=True)
