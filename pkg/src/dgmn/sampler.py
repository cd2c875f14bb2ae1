"""Neighborhood sampling: dilated tap grids, predicted walks, bilinear gather.

Each output position samples K = k*k taps laid out on a dilated grid around
it; a walk field (predicted from the feature map by a dilated 3x3 conv) adds
a fractional 2-D displacement to every tap. The gather reads the value map
at the resulting fractional coordinates with bilinear interpolation; any
interpolation corner outside the image contributes zero, matching the
zero-padding convention of the convolutions.

Coordinate layout: a sample field has shape (n, K, 2, h, w), index 0 of the
pair axis is y, index 1 is x. Taps are ordered row-major, so tap 0 is the
top-left corner of the grid and tap (K-1)//2 is the center.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Conv2dParams, as_tensor4, conv2d, conv2d_backward


class RateGrid:
    """Integer tap offsets (dy, dx) = rate * (u, v), u, v in {-(k-1)/2..(k-1)/2}."""

    def __init__(self, rate: int, k: int = 3):
        if k % 2 == 0 or k < 1:
            raise ConfigError(f"grid kernel side must be odd and positive, got {k}")
        if rate < 1:
            raise ConfigError(f"sampling rate must be >= 1, got {rate}")
        self.rate = int(rate)
        self.k = int(k)
        half = (k - 1) // 2
        offs = [(rate * u, rate * v) for u in range(-half, half + 1)
                for v in range(-half, half + 1)]
        self.offsets = np.array(offs, dtype=np.int64)  # (K, 2), row-major

    @property
    def taps(self) -> int:
        return self.k * self.k


def base_grid(rate: int, k: int = 3) -> RateGrid:
    return RateGrid(rate, k)


def predict_walks(feat: np.ndarray, walk_conv: Conv2dParams, grid: RateGrid) -> np.ndarray:
    """Predict per-tap walks from the feature map.

    Returns (n, 2K, h, w); channels 2j and 2j+1 are the (dy, dx) walk of
    tap j. The predictor's dilation must match the grid's rate so its taps
    coincide with the uniform nodes it conditions on.
    """
    if walk_conv.c_out != 2 * grid.taps:
        raise ConfigError(
            f"walk predictor must output {2 * grid.taps} channels, has {walk_conv.c_out}"
        )
    if walk_conv.dilation != grid.rate:
        raise ConfigError(
            f"walk predictor dilation {walk_conv.dilation} != grid rate {grid.rate}"
        )
    return conv2d(feat, walk_conv)


def sample_field(
    grid: RateGrid, n: int, h: int, w: int, walks: np.ndarray | None = None
) -> np.ndarray:
    """Absolute fractional sampling coordinates p + offset[j] (+ walk).

    walks, if given, is the (n, 2K, h, w) output of predict_walks. Result is
    (n, K, 2, h, w). With walks None (or exactly zero) the coordinates are the
    integers of the dilated grid.
    """
    K = grid.taps
    ys = np.arange(h, dtype=np.float64)[:, None] + np.zeros((1, w))
    xs = np.arange(w, dtype=np.float64)[None, :] + np.zeros((h, 1))
    pos = np.stack([ys, xs])  # (2, h, w)
    coords = pos[None, None] + grid.offsets[None, :, :, None, None]  # (1, K, 2, h, w)
    coords = np.broadcast_to(coords, (n, K, 2, h, w)).copy()
    if walks is not None:
        if walks.shape != (n, 2 * K, h, w):
            raise ConfigError(
                f"walk field shape {walks.shape} != expected {(n, 2 * K, h, w)}"
            )
        coords += walks.reshape(n, K, 2, h, w)
    return coords


def bilinear_gather(feat: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Gather feat at fractional coordinates; zero outside the image.

    feat: (n, C, h, w); coords: (n, K, 2, h, w) absolute (y, x) positions.
    Returns (n, K, C, h, w). Each sample interpolates the four surrounding
    integer pixels; out-of-bounds corners contribute 0, so sampling at an
    in-bounds integer coordinate reproduces the pixel value exactly.
    """
    feat = as_tensor4(feat, "gather input")
    n, c, h, w = feat.shape
    if coords.ndim != 5 or coords.shape[0] != n or coords.shape[2] != 2 \
            or coords.shape[3:] != (h, w):
        raise ConfigError(f"sample field shape {coords.shape} incompatible with {feat.shape}")
    K = coords.shape[1]
    ys = coords[:, :, 0]
    xs = coords[:, :, 1]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ty = ys - y0
    tx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    fv = np.ascontiguousarray(feat.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    b = np.arange(n)[:, None, None, None]
    out = np.zeros((n, K, h, w, c), dtype=np.float64)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy
        xx = x0 + dx
        inb = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        wgt = (ty if dy else 1.0 - ty) * (tx if dx else 1.0 - tx) * inb
        flat = (b * h + np.clip(yy, 0, h - 1)) * w + np.clip(xx, 0, w - 1)
        vals = fv.take(flat.reshape(-1), axis=0).reshape(n, K, h, w, c)
        out += wgt[..., None] * vals
    return out.transpose(0, 1, 4, 2, 3)


def bilinear_gather_backward(feat: np.ndarray, coords: np.ndarray, grad_out: np.ndarray):
    """Adjoints of bilinear_gather: (grad_feat, grad_coords).

    grad_coords uses the piecewise-linear derivative of the interpolation
    weights; it has kinks at integer coordinates where the forward is
    continuous but not differentiable.
    """
    n, c, h, w = feat.shape
    K = coords.shape[1]
    ys = coords[:, :, 0]
    xs = coords[:, :, 1]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ty = ys - y0
    tx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    fv = np.ascontiguousarray(feat.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    b = np.arange(n)[:, None, None, None]
    gv = np.ascontiguousarray(grad_out.transpose(0, 1, 3, 4, 2))  # (n, K, h, w, C)
    gflat = gv.reshape(-1, c)
    gfeat_v = np.zeros(n * h * w * c, dtype=np.float64)
    gy = np.zeros((n, K, h, w), dtype=np.float64)
    gx = np.zeros((n, K, h, w), dtype=np.float64)
    chan = np.arange(c, dtype=np.int64)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy
        xx = x0 + dx
        inb = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        flat = (b * h + np.clip(yy, 0, h - 1)) * w + np.clip(xx, 0, w - 1)
        wy = ty if dy else 1.0 - ty
        wx = tx if dx else 1.0 - tx
        wgt = (wy * wx * inb).reshape(-1, 1)
        # bincount-based scatter-add over (position, channel) pairs
        idx = (flat.reshape(-1, 1) * c + chan).reshape(-1)
        gfeat_v += np.bincount(idx, weights=(wgt * gflat).reshape(-1),
                               minlength=gfeat_v.size)
        vals = fv.take(flat.reshape(-1), axis=0)
        dot = np.einsum("ic,ic->i", vals, gflat).reshape(n, K, h, w) * inb
        gy += (1.0 if dy else -1.0) * wx * dot
        gx += wy * (1.0 if dx else -1.0) * dot
    grad_coords = np.stack([gy, gx], axis=2)  # (n, K, 2, h, w)
    gfeat = gfeat_v.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    return gfeat, grad_coords


def walks_backward(feat: np.ndarray, walk_conv: Conv2dParams, grad_coords: np.ndarray):
    """Route a sample-field gradient back through the walk predictor.

    Returns (grad_feat, grad_weight, grad_bias). The base grid is constant,
    so grad_coords maps one-to-one onto the predictor's output channels.
    """
    n, K = grad_coords.shape[:2]
    h, w = grad_coords.shape[3:]
    grad_walks = grad_coords.reshape(n, 2 * K, h, w)
    return conv2d_backward(feat, walk_conv, grad_walks)
