"""Geometric primitives: heatmap codecs, 5-keypoint box codec, RoI handling,
feature cropping, and crop/augmentation transforms.

Coordinate convention (used everywhere): pixel centers sit on integer
coordinates, so pixel (i, j) covers the square [i-0.5, i+0.5] x [j-0.5, j+0.5].
Keypoints are (x, y) with x along width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class HeatmapStack:
    """K-channel confidence grid with an explicit scale to its source frame.

    ``stride`` maps heatmap coordinates back to the source frame:
    source = heatmap * stride + offset.
    """

    values: np.ndarray  # (K, H, W)
    stride: float = 1.0
    offset: tuple[float, float] = (0.0, 0.0)  # (x, y) in the source frame

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"heatmaps must be (K, H, W), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("heatmap values must be finite")
        if self.stride <= 0:
            raise ValueError("stride must be positive")


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box sides must be non-negative: {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix mapping source pixel coordinates to destination ones."""

    matrix: tuple  # ((a, b, tx), (c, d, ty))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        if abs(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]) < 1e-12:
            raise ValueError("affine transform must be invertible")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=np.float64)

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        m = self.as_array()
        return pts @ m[:, :2].T + m[:, 2]

    def inverse(self) -> "AffineTransform":
        m = self.as_array()
        a = m[:, :2]
        ainv = np.linalg.inv(a)
        t = -ainv @ m[:, 2]
        return AffineTransform(matrix=tuple(map(tuple, np.hstack([ainv, t[:, None]]))))


# --------------------------------------------------------------------------
# Heatmap codec
# --------------------------------------------------------------------------


def encode_gaussian(keypoints, visibility, shape, sigma, stride=1.0) -> tuple[HeatmapStack, list[int]]:
    """Amplitude-1 Gaussian heatmaps for (x, y) keypoints in heatmap coords.

    Channel k holds exp(-((i-y_k)^2 + (j-x_k)^2) / (2 sigma^2)) when keypoint
    k is visible, zeros otherwise.  Keypoints whose nearest pixel falls
    outside the grid yield an all-zero channel; their indices are returned as
    the out-of-grid flags.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    keypoints = np.asarray(keypoints, dtype=np.float64)
    visibility = np.asarray(visibility)
    h, w = shape
    k = len(keypoints)
    values = np.zeros((k, h, w))
    out_of_grid = []
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    for i, ((x, y), v) in enumerate(zip(keypoints, visibility)):
        if not v:
            continue
        if not (-0.5 <= x < w - 0.5 and -0.5 <= y < h - 0.5):
            out_of_grid.append(i)
            continue
        values[i] = np.exp(-((ys - y) ** 2 + (xs - x) ** 2) / (2.0 * sigma**2))
    return HeatmapStack(values=values, stride=stride), out_of_grid


def decode_quarter_offset(hm: HeatmapStack) -> np.ndarray:
    """Sub-pixel decode: argmax plus a quarter-pixel step per axis toward the
    larger of the two neighbors (zero step on exact ties; out-of-grid
    neighbors count as 0).  Returns (K, 3) rows of (x, y, confidence) in the
    source frame.
    """
    values = hm.values
    k, h, w = values.shape
    if h < 2 or w < 2:
        raise ValueError("decoding needs at least a 2x2 grid")
    out = np.empty((k, 3))
    for i in range(k):
        flat = int(np.argmax(values[i]))  # ties: lowest row-major index
        y, x = divmod(flat, w)
        peak = values[i, y, x]
        left = values[i, y, x - 1] if x > 0 else 0.0
        right = values[i, y, x + 1] if x < w - 1 else 0.0
        up = values[i, y - 1, x] if y > 0 else 0.0
        down = values[i, y + 1, x] if y < h - 1 else 0.0
        fx = x + 0.25 * np.sign(right - left)
        fy = y + 0.25 * np.sign(down - up)
        out[i] = (
            fx * hm.stride + hm.offset[0],
            fy * hm.stride + hm.offset[1],
            peak,
        )
    return out


def decode_argmax(hm: HeatmapStack) -> np.ndarray:
    """Plain argmax decode, the baseline the quarter offset improves on."""
    values = hm.values
    k, h, w = values.shape
    out = np.empty((k, 3))
    for i in range(k):
        flat = int(np.argmax(values[i]))
        y, x = divmod(flat, w)
        out[i] = (x * hm.stride + hm.offset[0], y * hm.stride + hm.offset[1], values[i, y, x])
    return out


# --------------------------------------------------------------------------
# 5-keypoint box codec
# --------------------------------------------------------------------------


def keypoints_from_box(box: Box) -> np.ndarray:
    """4 corners (tl, tr, br, bl) plus the geometric center."""
    x0, y0 = box.x, box.y
    x1, y1 = box.x + box.w, box.y + box.h
    return np.array(
        [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [(x0 + x1) / 2.0, (y0 + y1) / 2.0]]
    )


def box_from_keypoints(kpts) -> Box:
    """Minimum axis-aligned rectangle over the 5 box keypoints."""
    kpts = np.asarray(kpts, dtype=np.float64)
    if kpts.shape != (5, 2):
        raise ValueError(f"expected 5 box keypoints, got shape {kpts.shape}")
    x0, y0 = kpts.min(axis=0)
    x1, y1 = kpts.max(axis=0)
    return Box(x=float(x0), y=float(y0), w=float(x1 - x0), h=float(y1 - y0))


def expand_roi(box: Box, ratio: float) -> Box:
    """Scale width and height by ``ratio`` about the box center, unclamped."""
    if ratio < 1.0:
        raise ValueError(f"expansion ratio must be >= 1.0, got {ratio}")
    cx, cy = box.center
    w, h = box.w * ratio, box.h * ratio
    return Box(x=cx - w / 2.0, y=cy - h / 2.0, w=w, h=h)


# --------------------------------------------------------------------------
# RoIAlign
# --------------------------------------------------------------------------


def _bilinear_sample(plane: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = xs - x0
    ty = ys - y0
    top = plane[y0, x0] * (1 - tx) + plane[y0, x1] * tx
    bot = plane[y1, x0] * (1 - tx) + plane[y1, x1] * tx
    return top * (1 - ty) + bot * ty


def roi_align(features: HeatmapStack, box: Box, out_size) -> HeatmapStack:
    """One bilinear sample per output cell center; border samples clamp.

    ``box`` is given in the feature frame.  The output stack records the
    stride and origin tying each output cell back to the source frame.
    """
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    oh, ow = out_size
    if oh < 1 or ow < 1:
        raise ValueError("out_size must be >= 1")
    xs = box.x + (np.arange(ow) + 0.5) * box.w / ow
    ys = box.y + (np.arange(oh) + 0.5) * box.h / oh
    gx, gy = np.meshgrid(xs, ys)
    out = np.stack([_bilinear_sample(plane, gx, gy) for plane in features.values])
    sx = box.w / ow * features.stride
    return HeatmapStack(
        values=out,
        stride=sx,
        offset=(
            (box.x + 0.5 * box.w / ow) * features.stride + features.offset[0],
            (box.y + 0.5 * box.h / oh) * features.stride + features.offset[1],
        ),
    )


# --------------------------------------------------------------------------
# Crop / augmentation transform
# --------------------------------------------------------------------------


def make_augmentation_transform(
    box: Box,
    out_size,
    scale_jitter=(0.0, 0.0),
    rotation=0.0,
    flip=False,
    rng_seed=None,
) -> AffineTransform:
    """Crop-and-resize transform with the standard training augmentations.

    Composition: center on the (jittered) box, rotate by the sampled angle,
    optionally mirror horizontally, resize so the box corners land on the
    output corners (0, 0) and (out_w, out_h).  The box center always maps to
    the output center.  ``scale_jitter`` and ``rotation`` give symmetric
    ranges (e.g. (-0.5, 0.5) and 40 degrees); when ``rng_seed`` is None they
    must be degenerate and the transform is the deterministic crop.
    """
    if box.w <= 0 or box.h <= 0:
        raise ValueError(f"degenerate box cannot be cropped: {box}")
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    ow, oh = out_size

    if rng_seed is not None:
        rng = np.random.default_rng(rng_seed)
        jitter = 1.0 + rng.uniform(scale_jitter[0], scale_jitter[1])
        angle = math.radians(rng.uniform(-rotation, rotation))
        do_flip = bool(flip and rng.integers(2))
    else:
        jitter = 1.0 + scale_jitter[0]
        angle = math.radians(rotation)
        do_flip = bool(flip)

    cx, cy = box.center
    sx = ow / (box.w * jitter)
    sy = oh / (box.h * jitter)
    cos, sin = math.cos(angle), math.sin(angle)
    # rotate about the box center (positive angle turns the +x axis toward -y,
    # i.e. the crop content rotates clockwise on screen), then scale to the
    # output frame and recenter.
    rot = np.array([[cos, sin], [-sin, cos]])
    scale = np.diag([sx, sy])
    a = scale @ rot
    t = np.array([ow / 2.0, oh / 2.0]) - a @ np.array([cx, cy])
    m = np.hstack([a, t[:, None]])
    if do_flip:
        m[0, :] *= -1
        m[0, 2] += ow
    return AffineTransform(matrix=tuple(map(tuple, m)))
