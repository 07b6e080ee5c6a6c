"""Classical texture baselines: riu2 local binary patterns and box-counting FD."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientScales, PatchTooSmall

DEFAULT_SCALES = (2, 3, 4, 6, 8, 12, 16)


@dataclass(frozen=True)
class LbpConfig:
    neighbors: int = 8
    radius: int = 1

    def __post_init__(self):
        if self.neighbors < 4 or self.radius < 1:
            raise ValueError(f"LBP needs P >= 4 and R >= 1, got P={self.neighbors}, R={self.radius}")


def _neighbor_offsets(cfg):
    p = np.arange(cfg.neighbors)
    theta = 2 * np.pi * p / cfg.neighbors
    # rounding makes symmetric offsets bitwise equal (cos 45deg != sin 45deg in floats)
    dy = np.round(-cfg.radius * np.sin(theta), 9)
    dx = np.round(cfg.radius * np.cos(theta), 9)
    return dy + 0.0, dx + 0.0


def _neighbor_differences(x, cfg):
    """(P, h', w') array of interpolated neighbour minus centre for interior pixels."""
    h, w = x.shape
    r = cfg.radius
    center = x[r:h - r, r:w - r]
    dys, dxs = _neighbor_offsets(cfg)
    diffs = []
    for dy, dx in zip(dys, dxs):
        # interpolate along each axis from the pixel nearer the centre
        ny, nx = math.trunc(dy), math.trunc(dx)
        fy, fx = abs(dy - ny), abs(dx - nx)
        sy = 1 if dy > 0 else -1
        sx = 1 if dx > 0 else -1

        def at(oy, ox):
            return x[r + oy:h - r + oy, r + ox:w - r + ox] - center

        if fy == 0 and fx == 0:
            diffs.append(at(ny, nx))
            continue
        near_near = (1 - fy) * (1 - fx) * at(ny, nx)
        near_far = (1 - fy) * fx * at(ny, nx + sx) if fx else 0.0
        far_near = fy * (1 - fx) * at(ny + sy, nx) if fy else 0.0
        far_far = fy * fx * at(ny + sy, nx + sx) if fx and fy else 0.0
        # mixed terms are summed first so swapping the axes is bitwise exact
        diffs.append((near_near + (near_far + far_near)) + far_far)
    return np.stack(diffs)


def lbp_codes(patch, cfg=LbpConfig()):
    """riu2 code per interior pixel: set-bit count if uniform, else P + 1."""
    x = np.asarray(getattr(patch, "pixels", patch), dtype=np.float64)
    r = cfg.radius
    if min(x.shape) <= 2 * r:
        raise PatchTooSmall(f"patch {x.shape} too small for LBP radius {r}")
    bits = (_neighbor_differences(x, cfg) >= 0).astype(np.int64)
    transitions = np.abs(bits - np.roll(bits, 1, axis=0)).sum(axis=0)
    ones = bits.sum(axis=0)
    return np.where(transitions <= 2, ones, cfg.neighbors + 1)


def lbp_histogram(patch, cfg=LbpConfig()):
    """Normalized histogram of riu2 codes over P + 2 bins."""
    codes = lbp_codes(patch, cfg)
    hist = np.bincount(codes.ravel(), minlength=cfg.neighbors + 2).astype(np.float64)
    return hist / hist.sum()


def box_counts(pixels, size, gray_levels=256):
    """Differential box count N(s) over the full s x s cells of the patch."""
    x = np.asarray(pixels, dtype=np.float64)
    h, w = x.shape
    m = min(h, w)
    box_h = size * gray_levels / m
    rows, cols = h // size, w // size
    cells = x[:rows * size, :cols * size].reshape(rows, size, cols, size)
    hi = cells.max(axis=(1, 3))
    lo = cells.min(axis=(1, 3))
    return float((np.floor(hi / box_h) - np.floor(lo / box_h) + 1).sum())


def fractal_dimension(patch, scales=DEFAULT_SCALES):
    """Differential box-counting fractal dimension of an 8-bit patch.

    Slope of the least-squares line through ``(log 1/s, log N(s))``.  Scales
    smaller than 2 or larger than half the shorter side are skipped.
    """
    x = np.asarray(getattr(patch, "pixels", patch), dtype=np.float64)
    m = min(x.shape)
    usable = sorted({int(s) for s in scales if 2 <= s <= m // 2})
    if len(usable) < 3:
        raise InsufficientScales(f"only {len(usable)} usable box sizes for a {x.shape} patch")
    logs = np.log(1.0 / np.array(usable, dtype=np.float64))
    logn = np.log([box_counts(x, s) for s in usable])
    slope, _ = np.polyfit(logs, logn, 1)
    return float(slope)


@dataclass(frozen=True)
class TextureFeatures:
    lbp_hist: np.ndarray
    fd: float


def texture_features(patch, cfg=LbpConfig(), scales=DEFAULT_SCALES):
    return TextureFeatures(lbp_histogram(patch, cfg), fractal_dimension(patch, scales))
