"""Inverse warping of image batches by homographies, bilinear with zero padding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, ShapeError
from .xform import Homography, invert

# Pixel-index coordinates this close to an integer are snapped so that
# identity and whole-pixel shifts reproduce pixels exactly.
SNAP_TOL = 1e-9


@dataclass(eq=False)
class ImageTensor:
    data: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ShapeError(f"image batch must be [N, C, H, W] with N,C,H,W >= 1, got {self.data.shape}")
        lo, hi = self.value_range
        if self.data.size and (self.data.min() < lo - 1e-6 or self.data.max() > hi + 1e-6):
            raise InputError(
                f"pixel values [{self.data.min()}, {self.data.max()}] outside declared range {self.value_range}"
            )

    @property
    def shape(self):
        return self.data.shape


def pixel_grid(h: int, w: int) -> np.ndarray:
    """Normalized coordinates of pixel centers, shape [h*w, 2] in row-major order."""
    xs = 2.0 * (np.arange(w) + 0.5) / w - 1.0
    ys = 2.0 * (np.arange(h) + 0.5) / h - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _to_index(coord: np.ndarray, size: int) -> np.ndarray:
    u = (coord + 1.0) * size / 2.0 - 0.5
    r = np.round(u)
    return np.where(np.abs(u - r) < SNAP_TOL, r, u)


def _sample_batched(data: np.ndarray, xy: np.ndarray) -> np.ndarray:
    # data [N, C, H, W], xy [N, P, 2] -> [N, C, P]
    n, c, h, w = data.shape
    u = _to_index(xy[..., 0], w)
    v = _to_index(xy[..., 1], h)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0
    out = np.zeros((n, c, xy.shape[1]))
    batch = np.arange(n)[:, None]
    for du, dv, wgt in (
        (0, 0, (1 - fu) * (1 - fv)),
        (1, 0, fu * (1 - fv)),
        (0, 1, (1 - fu) * fv),
        (1, 1, fu * fv),
    ):
        ui = u0 + du
        vi = v0 + dv
        inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        vals = data[batch, :, np.clip(vi, 0, h - 1), np.clip(ui, 0, w - 1)]  # [N, P, C]
        out += np.moveaxis(vals * (wgt * inside)[..., None], -1, 1)
    return out


def bilinear_sample(img: np.ndarray | ImageTensor, xy: np.ndarray) -> np.ndarray:
    """Sample ``img`` ([C, H, W] or [N, C, H, W]) at normalized points ``xy`` [P, 2].

    Returns [C, P] (or [N, C, P]).  Neighbours outside the image contribute 0.
    """
    data = img.data if isinstance(img, ImageTensor) else np.asarray(img, dtype=float)
    xy = np.asarray(xy, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise ShapeError(f"coordinates must be [P, 2], got {xy.shape}")
    if not np.all(np.isfinite(xy)):
        raise InputError("sample coordinates contain NaN or infinite values")
    single = data.ndim == 3
    if single:
        data = data[None]
    if data.ndim != 4:
        raise ShapeError(f"image must be [C, H, W] or [N, C, H, W], got {data.shape}")
    out = _sample_batched(data, np.broadcast_to(xy, (data.shape[0],) + xy.shape))
    return out[0] if single else out


def warp_batch(data: np.ndarray, mats: Sequence[np.ndarray], out_hw=None) -> np.ndarray:
    """Warp each image ``data[i]`` by its own homography matrix ``mats[i]``."""
    n, c, h, w = data.shape
    oh, ow = out_hw or (h, w)
    grid = pixel_grid(oh, ow)
    inv = np.stack([invert(Homography(m)).m for m in mats])  # [N, 3, 3]
    hom = np.hstack([grid, np.ones((len(grid), 1))]) @ inv.transpose(0, 2, 1)  # [N, P, 3]
    src = hom[..., :2] / hom[..., 2:3]
    if not np.all(np.isfinite(src)):
        raise InputError("homography maps output pixels to infinity")
    return _sample_batched(data, src).reshape(n, c, oh, ow)


def warp_image(img: ImageTensor, h: Homography, out_hw=None) -> ImageTensor:
    """Output pixel p takes the bilinear sample of ``img`` at ``invert(h) . p``."""
    data = img.data
    out = warp_batch(data, [h.m] * data.shape[0], out_hw)
    lo, hi = img.value_range
    return ImageTensor(out, (min(0.0, lo), hi))
