"""Bilinear resampling helpers shared by the chipper and the augmentations."""

import numpy as np
from scipy import ndimage


def resize_bilinear(img: np.ndarray, out_size: int) -> np.ndarray:
    """Resize a 2-d array to ``out_size`` squared with pixel-centre alignment and edge clamping."""
    h, w = img.shape
    if h == out_size and w == out_size:
        return img.copy()
    ys = (np.arange(out_size) + 0.5) * (h / out_size) - 0.5
    xs = (np.arange(out_size) + 0.5) * (w / out_size) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def warp_affine(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Sample ``img`` at ``matrix @ p + offset`` for every output pixel ``p = (row, col)``."""
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="nearest")


def box_sum(img: np.ndarray, side: int) -> np.ndarray:
    """Sum over a ``side`` x ``side`` window centred on each pixel, clipped at the borders."""
    if side <= 0:
        return np.zeros_like(img, dtype=np.float64)
    r = side // 2
    h, w = img.shape
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)
    rows = np.arange(h)
    cols = np.arange(w)
    r0 = np.clip(rows - r, 0, h)
    r1 = np.clip(rows + r + 1, 0, h)
    c0 = np.clip(cols - r, 0, w)
    c1 = np.clip(cols + r + 1, 0, w)
    return ii[r1][:, c1] - ii[r0][:, c1] - ii[r1][:, c0] + ii[r0][:, c0]


def box_count(shape, side: int) -> np.ndarray:
    return box_sum(np.ones(shape), side)
