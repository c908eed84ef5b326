"""Whole-image super-resolution with overlapping tiles."""

from __future__ import annotations

import numpy as np

from . import model as M
from .data import from_batch, to_batch
from .tensor import Tensor

DEFAULT_TILE = 48
DEFAULT_OVERLAP = 8


def _starts(n: int, tile: int) -> list[int]:
    return list(range(0, n, tile))


def upscale(img: np.ndarray, params, cfg: M.ModelConfig, tile: int | None = DEFAULT_TILE,
            overlap: int = DEFAULT_OVERLAP) -> np.ndarray:
    """Super-resolve an ``H x W x 3`` image; output is clipped to ``[0, 1]``.

    Attention cost grows with the square of the token count, so large inputs
    are cut into ``tile x tile`` LR tiles, each run with ``overlap`` pixels of
    context on every side, and only the tile centres are kept.
    """
    h, w = img.shape[:2]
    r = cfg.scale
    dtype = next(iter(params.values())).dtype
    x = to_batch(np.asarray(img, dtype=dtype))
    if tile is None or (h <= tile and w <= tile):
        return np.clip(from_batch(M.esrt_forward(Tensor(x), params, cfg).data), 0, 1)

    out = np.zeros((1, 3, h * r, w * r), dtype=dtype)
    for y0 in _starts(h, tile):
        for x0 in _starts(w, tile):
            y1, x1 = min(y0 + tile, h), min(x0 + tile, w)
            # context window, widened to at least 4 pixels for tiny remnants
            cy0, cx0 = max(y0 - overlap, 0), max(x0 - overlap, 0)
            cy1, cx1 = min(y1 + overlap, h), min(x1 + overlap, w)
            cy0, cx0 = max(min(cy0, cy1 - 4), 0), max(min(cx0, cx1 - 4), 0)
            sr = M.esrt_forward(Tensor(x[:, :, cy0:cy1, cx0:cx1]), params, cfg).data
            oy, ox = (y0 - cy0) * r, (x0 - cx0) * r
            out[:, :, y0 * r:y1 * r, x0 * r:x1 * r] = sr[:, :, oy:oy + (y1 - y0) * r, ox:ox + (x1 - x0) * r]
    return np.clip(from_batch(out), 0, 1)
