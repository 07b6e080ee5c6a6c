"""Raster preprocessing: intensity normalization, resampling, rotation, ROI."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidResample, RoiOutOfBounds
from .geometry import align_to_plateau, tibia_width

PATCH_RESCALE = 56
PATCH_CROP = 48
LOW_PERCENTILE = 5
HIGH_PERCENTILE = 99
STANDARD_SPACING = 0.2


@dataclass(frozen=True)
class RasterImage:
    """2-D intensity grid with isotropic pixel spacing in mm.

    ``pixels`` is uint16 (raw input), uint8 (working form) or float64 for
    intermediate results of resampling and rotation.
    """

    pixels: np.ndarray
    spacing: float

    def __post_init__(self):
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValueError(f"raster must be a non-empty 2-D array, got {self.pixels.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def depth(self):
        return {np.dtype(np.uint8): 8, np.dtype(np.uint16): 16}.get(self.pixels.dtype)


@dataclass(frozen=True)
class RoiSpec:
    """ROI centre in pixel-edge coordinates (pixel i spans [i, i+1)) and side."""

    center_x: float
    center_y: float
    side: int

    @property
    def bounds(self):
        """(row0, col0, row1, col1), half-open."""
        col0 = int(round(self.center_x - self.side / 2))
        row0 = int(round(self.center_y - self.side / 2))
        return row0, col0, row0 + self.side, col0 + self.side


def nearest_rank(sorted_values, percent):
    """Nearest-rank percentile of an ascending array (``percent`` integral)."""
    n = len(sorted_values)
    rank = max(1, (percent * n + 99) // 100)
    return sorted_values[rank - 1]


def normalize_intensity(img):
    """Global contrast normalization, 5-99 percentile truncation, 8-bit output."""
    x = img.pixels.astype(np.float64)
    std = x.std()
    if std == 0:
        return RasterImage(np.zeros(x.shape, dtype=np.uint8), img.spacing)
    z = (x - x.mean()) / std
    s = np.sort(z, axis=None)
    lo, hi = nearest_rank(s, LOW_PERCENTILE), nearest_rank(s, HIGH_PERCENTILE)
    if hi <= lo:
        return RasterImage(np.zeros(x.shape, dtype=np.uint8), img.spacing)
    v = (np.clip(z, lo, hi) - lo) / (hi - lo) * 255.0
    return RasterImage(np.floor(v + 0.5).astype(np.uint8), img.spacing)


def bilinear_sample(pixels, rows, cols, fill=None):
    """Sample ``pixels`` at fractional (row, col) positions.

    Positions outside the grid are clamped to the border, or set to ``fill``
    when it is given.
    """
    p = np.asarray(pixels, dtype=np.float64)
    h, w = p.shape
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    outside = (rows < 0) | (rows > h - 1) | (cols < 0) | (cols > w - 1)
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.minimum(np.floor(r).astype(np.intp), max(h - 2, 0))
    c0 = np.minimum(np.floor(c).astype(np.intp), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    top = p[r0, c0] + fc * (p[r0, c1] - p[r0, c0])
    bottom = p[r1, c0] + fc * (p[r1, c1] - p[r1, c0])
    out = top + fr * (bottom - top)
    if fill is not None:
        out = np.where(outside, fill, out)
    return out


def resample(img, target_spacing=STANDARD_SPACING):
    """Bilinear resampling to a new isotropic pixel spacing (float output)."""
    if not target_spacing > 0:
        raise InvalidResample(f"target spacing must be positive, got {target_spacing}")
    ratio = img.spacing / target_spacing
    out_h = int(round(img.height * ratio))
    out_w = int(round(img.width * ratio))
    if out_h < 1 or out_w < 1:
        raise InvalidResample(f"resampling {img.height}x{img.width} by {ratio:g} leaves no pixels")
    if out_h == img.height and out_w == img.width and ratio == 1:
        return RasterImage(img.pixels.astype(np.float64), target_spacing)
    rows = (np.arange(out_h) + 0.5) / ratio - 0.5
    cols = (np.arange(out_w) + 0.5) / ratio - 0.5
    out = bilinear_sample(img.pixels, rows[:, None], cols[None, :])
    return RasterImage(out, target_spacing)


def rotate_image(img, angle, center):
    """Rotate content by ``angle`` radians about ``center`` = (x, y) pixels.

    Same convention as :class:`~oaknee.geometry.RigidTransform` in the
    x-right, y-down frame.  Pixels that map outside the source are 0.
    """
    if abs(angle) > math.pi:
        raise ValueError(f"rotation angle must be within [-pi, pi], got {angle}")
    if angle == 0:
        return RasterImage(img.pixels.astype(np.float64), img.spacing)
    cx, cy = center
    c, s = math.cos(angle), math.sin(angle)
    yy, xx = np.mgrid[0:img.height, 0:img.width].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    # inverse rotation gives the source position of each output pixel
    src_x = c * dx + s * dy + cx
    src_y = -s * dx + c * dy + cy
    return RasterImage(bilinear_sample(img.pixels, src_y, src_x, fill=0.0), img.spacing)


def to_uint8(img):
    return RasterImage(np.clip(np.floor(np.asarray(img.pixels, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8),
                       img.spacing)


def medial_roi_spec(landmarks, spacing):
    """Square ROI under the medial tibial plateau, in pixel units.

    Side is a seventh of the tibia width.  The ROI is centred a quarter of
    the tibia width in from the medial extent and its top edge sits on the
    tibia contour at that position.
    """
    width = tibia_width(landmarks)
    side = int(round(width / 7 / spacing))
    medial, lateral = landmarks.points[list(landmarks.roles.tibia_extent_pair)]
    sign = 1.0 if lateral[0] >= medial[0] else -1.0
    x_mm = medial[0] + sign * width / 4
    tibia = landmarks.tibia
    order = np.argsort(tibia[:, 0], kind="stable")
    y_mm = float(np.interp(x_mm, tibia[order, 0], tibia[order, 1]))
    # top edge of the ROI is the pixel row containing the contour
    cx, cy = mm_to_px((x_mm, y_mm), spacing)
    return RoiSpec(float(cx) + 0.5, float(np.floor(cy + 0.5)) + side / 2, side)


def extract_medial_roi(img, landmarks):
    """Cut the medial tibia ROI from a plateau-aligned image.

    ``landmarks`` are in mm in the image frame of ``img``.
    """
    spec = medial_roi_spec(landmarks, img.spacing)
    if spec.side < 1:
        raise RoiOutOfBounds("ROI side rounds to zero pixels")
    r0, c0, r1, c1 = spec.bounds
    if r0 < 0 or c0 < 0 or r1 > img.height or c1 > img.width:
        raise RoiOutOfBounds(
            f"ROI rows {r0}:{r1}, cols {c0}:{c1} exceed image {img.height}x{img.width}"
        )
    return RasterImage(img.pixels[r0:r1, c0:c1].copy(), img.spacing), spec


def rescale_square(pixels, size):
    """Bilinear rescale of a 2-D array to ``size`` x ``size`` (pixel-centre aligned)."""
    h, w = pixels.shape
    rows = (np.arange(size) + 0.5) * h / size - 0.5
    cols = (np.arange(size) + 0.5) * w / size - 0.5
    return bilinear_sample(pixels, rows[:, None], cols[None, :])


def crop_offset(mode, rng=None):
    """(row, col) offset of the 48x48 crop inside the 56x56 rescaled patch."""
    span = PATCH_RESCALE - PATCH_CROP
    if mode == "eval":
        return span // 2, span // 2
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    rng = np.random.default_rng(rng)
    r, c = rng.integers(0, span + 1, size=2)
    return int(r), int(c)


def prepare_patch(patch, mode="eval", rng_seed=None):
    """Rescale to 56x56, crop 48x48, scale 8-bit values to [0, 1]."""
    pixels = patch.pixels if isinstance(patch, RasterImage) else np.asarray(patch)
    if pixels.shape[0] != pixels.shape[1]:
        raise ValueError(f"patch must be square, got {pixels.shape}")
    big = rescale_square(pixels, PATCH_RESCALE) / 255.0
    r, c = crop_offset(mode, rng_seed)
    return big[r:r + PATCH_CROP, c:c + PATCH_CROP]


def augment(patch, rng, rotation_deg_range=(0.0, 0.0), gamma_range=(1.0, 1.0), brightness_range=(0.0, 0.0)):
    """Random rotation, gamma and brightness on a [0, 1] patch."""
    rng = np.random.default_rng(rng)
    x = np.asarray(patch, dtype=np.float64)
    angle = math.radians(rng.uniform(*rotation_deg_range))
    if angle:
        h, w = x.shape
        x = rotate_image(RasterImage(x, 1.0), angle, ((w - 1) / 2, (h - 1) / 2)).pixels
    gamma = rng.uniform(*gamma_range)
    if gamma != 1.0:
        x = np.clip(x, 0.0, 1.0) ** gamma
    shift = rng.uniform(*brightness_range)
    if shift:
        x = x + shift
    return np.clip(x, 0.0, 1.0)


def mm_to_px(xy_mm, spacing):
    """Pixel-centre convention: pixel (c, r) covers mm [c*s, (c+1)*s)."""
    return np.asarray(xy_mm, dtype=np.float64) / spacing - 0.5


def preprocess_knee(raw, landmarks, target_spacing=STANDARD_SPACING):
    """Normalize, resample and plateau-align one knee.

    Returns ``(aligned 8-bit image, aligned landmarks in mm)``.
    """
    img = resample(normalize_intensity(raw), target_spacing)
    transform, aligned = align_to_plateau(landmarks)
    p, q = landmarks.points[list(landmarks.roles.plateau_pair)]
    cx, cy = mm_to_px((p + q) / 2, target_spacing)
    return to_uint8(rotate_image(img, transform.rotation, (cx, cy))), aligned
