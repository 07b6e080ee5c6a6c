"""Per-knee feature extraction shared by the CLI and the experiment drivers."""

import os
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import dataio
from .errors import ContoursIntersect
from .geometry import JS2_LENGTH, LandmarkSet, RoleConfig, js2, jsw_measurements
from .imaging import (PATCH_RESCALE, RasterImage, extract_medial_roi, preprocess_knee,
                      rescale_square)
from .texture import LbpConfig, texture_features

JS2_NAMES = [f"js2_{k}" for k in range(JS2_LENGTH)]
JSW_NAMES = ["min_jsw", "med_fjsw", "lat_fjsw"]
LBP_NAMES = [f"lbp_{k}" for k in range(LbpConfig().neighbors + 2)]
FD_NAMES = ["fd"]

FEATURE_TAGS = {
    "js2": JS2_NAMES,
    "jsw": JSW_NAMES,
    "minjsw": ["min_jsw"],
    "lbp": LBP_NAMES,
    "fd": FD_NAMES,
}


def worker_count():
    try:
        return max(1, int(os.environ.get("OAKNEE_THREADS", "1")))
    except ValueError:
        return 1


def map_ordered(fn, items, workers=None):
    """``map`` over a thread pool; results come back in input order."""
    workers = worker_count() if workers is None else workers
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def landmarks_of(record, roles=None):
    return LandmarkSet(record.points, roles or RoleConfig.default())


def describe_record(record, roles=None):
    """JS2 plus minJSW / fJSW for one knee."""
    lm = landmarks_of(record, roles)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ContoursIntersect)
        m = jsw_measurements(lm)
    return np.concatenate([js2(lm), [m.min_jsw, m.med_fjsw, m.lat_fjsw]])


def prepared_knee(record, roles=None):
    """Aligned 8-bit image and landmarks.

    16-bit rasters are run through the full preprocessing chain; 8-bit ones
    are taken as already preprocessed and used as they are.
    """
    lm = landmarks_of(record, roles)
    raw = dataio.read_raster(record)
    if raw.pixels.dtype == np.uint8:
        return raw, lm
    return preprocess_knee(raw, lm)


def roi_patch(record, roles=None):
    img, lm = prepared_knee(record, roles)
    patch, _ = extract_medial_roi(img, lm)
    return patch


def texture_record(record, roles=None):
    f = texture_features(roi_patch(record, roles))
    return np.concatenate([f.lbp_hist, [f.fd]])


def rescaled_patches(patches):
    """Stack ROI patches as (N, 56, 56) float32 in [0, 1]."""
    out = np.empty((len(patches), PATCH_RESCALE, PATCH_RESCALE), dtype=np.float32)
    for i, p in enumerate(patches):
        pixels = p.pixels if isinstance(p, RasterImage) else np.asarray(p)
        out[i] = rescale_square(pixels.astype(np.float64), PATCH_RESCALE) / 255.0
    return out
