"""PNG panel rendering for segmentation and redraw inspection."""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage

from .data import unit_range_to_uint8

PAD = 2


def mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    """Soft mask (H, W) in [0,1] -> grayscale image (C, H, W) in [-1, 1]."""
    gray = np.clip(mask, 0, 1) * 2 - 1
    return np.repeat(gray[None], 3, axis=0).astype(np.float32)


def tile_grid(tiles: list[np.ndarray], cols: int) -> np.ndarray:
    """Arrange (C, H, W) tiles in [-1, 1] into one uint8 (H', W', 3) grid."""
    if not tiles:
        raise ValueError("no tiles to render")
    c, h, w = tiles[0].shape
    rows = (len(tiles) + cols - 1) // cols
    canvas = np.full((rows * (h + PAD) + PAD, cols * (w + PAD) + PAD, 3), 255,
                     dtype=np.uint8)
    for k, tile in enumerate(tiles):
        if tile.shape != (c, h, w):
            raise ValueError(f"tile {k} shape {tile.shape} != {(c, h, w)}")
        r, col = divmod(k, cols)
        y = PAD + r * (h + PAD)
        x = PAD + col * (w + PAD)
        canvas[y:y + h, x:x + w] = unit_range_to_uint8(tile)
    return canvas


def save_grid(path, tiles: list[np.ndarray], cols: int) -> None:
    PILImage.fromarray(tile_grid(tiles, cols)).save(path)
