"""Landmark containers, plateau alignment, the JS2 descriptor and JSW measures.

Coordinates are millimetres in the image frame (x to the right, y down), so
the femur sits at smaller y than the tibia.
"""

import json
import math
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ContoursIntersect, DegenerateGeometry, InvalidLandmarks, OutOfSupport

N_FEMUR = 13
N_TIBIA = 17
JS2_LENGTH = N_FEMUR * N_TIBIA

MEDIAL_FJSW_X = 0.225
LATERAL_FJSW_X = 0.8


@dataclass(frozen=True)
class RoleConfig:
    """Which of the landmark points play which role.

    ``tibia_extent_pair`` is ordered (medial, lateral).
    """

    femur_indices: tuple
    tibia_indices: tuple
    plateau_pair: tuple
    tibia_extent_pair: tuple

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(*(tuple(int(v) for v in d[k]) for k in
                         ("femur_indices", "tibia_indices", "plateau_pair", "tibia_extent_pair")))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidLandmarks(f"bad role configuration: {exc}") from exc

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls):
        text = resources.files("oaknee").joinpath("data/roles.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))

    def to_dict(self):
        return {
            "femur_indices": list(self.femur_indices),
            "tibia_indices": list(self.tibia_indices),
            "plateau_pair": list(self.plateau_pair),
            "tibia_extent_pair": list(self.tibia_extent_pair),
        }


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray
    roles: RoleConfig

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidLandmarks(f"points must be an (n, 2) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidLandmarks("landmark coordinates must be finite")
        r = self.roles
        if len(r.femur_indices) != N_FEMUR or len(r.tibia_indices) != N_TIBIA:
            raise InvalidLandmarks(
                f"need {N_FEMUR} femur and {N_TIBIA} tibia indices, "
                f"got {len(r.femur_indices)} and {len(r.tibia_indices)}"
            )
        if len(r.plateau_pair) != 2 or len(r.tibia_extent_pair) != 2:
            raise InvalidLandmarks("plateau_pair and tibia_extent_pair need exactly two indices")
        for name in ("femur_indices", "tibia_indices", "plateau_pair", "tibia_extent_pair"):
            idx = getattr(r, name)
            if len(set(idx)) != len(idx):
                raise InvalidLandmarks(f"{name} contains duplicates")
            if min(idx) < 0 or max(idx) >= len(pts):
                raise InvalidLandmarks(f"{name} out of range for {len(pts)} points")
        object.__setattr__(self, "points", pts)

    @property
    def femur(self):
        return self.points[list(self.roles.femur_indices)]

    @property
    def tibia(self):
        return self.points[list(self.roles.tibia_indices)]

    def with_points(self, points):
        return LandmarkSet(points, self.roles)


@dataclass(frozen=True)
class RigidTransform:
    """``p -> R(rotation) @ p + translation``."""

    rotation: float
    translation: tuple = (0.0, 0.0)

    def __post_init__(self):
        a = math.remainder(self.rotation, 2 * math.pi)
        if a == -math.pi:
            a = math.pi
        object.__setattr__(self, "rotation", a)

    @property
    def matrix(self):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + np.asarray(self.translation)

    @classmethod
    def about(cls, angle, center):
        """Rotation by ``angle`` that keeps ``center`` fixed."""
        c = np.asarray(center, dtype=np.float64)
        r = cls(angle)
        t = c - r.matrix @ c
        return cls(angle, (float(t[0]), float(t[1])))


def compute_js2(tibia_pts, femur_pts):
    """Distances from every tibia point to every femur point.

    Entry ``k = i * len(femur_pts) + j`` holds ``|tibia[i] - femur[j]|``.
    """
    t = np.asarray(tibia_pts, dtype=np.float64).reshape(-1, 2)
    f = np.asarray(femur_pts, dtype=np.float64).reshape(-1, 2)
    if len(t) == 0 or len(f) == 0:
        raise InvalidLandmarks("compute_js2 needs at least one tibia and one femur point")
    dx = t[:, None, 0] - f[None, :, 0]
    dy = t[:, None, 1] - f[None, :, 1]
    return np.sqrt(dx * dx + dy * dy).ravel()


def js2(landmarks):
    """Canonical 221-entry descriptor of a landmark set."""
    return compute_js2(landmarks.tibia, landmarks.femur)


def js2_index(tibia_i, femur_i):
    if not (0 <= tibia_i < N_TIBIA and 0 <= femur_i < N_FEMUR):
        raise IndexError(f"landmark pair ({tibia_i}, {femur_i}) outside {N_TIBIA}x{N_FEMUR}")
    return tibia_i * N_FEMUR + femur_i


def js2_pair(k):
    """Inverse of :func:`js2_index`."""
    if not 0 <= k < JS2_LENGTH:
        raise IndexError(f"descriptor index {k} outside 0..{JS2_LENGTH - 1}")
    return divmod(k, N_FEMUR)


def tibia_width(landmarks):
    a, b = landmarks.points[list(landmarks.roles.tibia_extent_pair)]
    w = float(np.hypot(*(b - a)))
    if w == 0:
        raise DegenerateGeometry("tibia extent landmarks coincide")
    return w


def align_to_plateau(landmarks):
    """Rotate about the plateau-pair midpoint so the plateau line is horizontal
    with the femur above the tibia."""
    p, q = landmarks.points[list(landmarks.roles.plateau_pair)]
    d = q - p
    if not np.any(d):
        raise DegenerateGeometry("tibial plateau landmarks coincide")
    theta = math.atan2(d[1], d[0])
    # the line fixes the angle up to a half turn; y points down, so pick the
    # turn that puts the femur above the tibia
    centre = (p + q) / 2
    transform = RigidTransform.about(-theta, centre)
    pts = transform.apply(landmarks.points)
    roles = landmarks.roles
    if pts[list(roles.femur_indices), 1].mean() > pts[list(roles.tibia_indices), 1].mean():
        transform = RigidTransform.about(math.pi - theta, centre)
        pts = transform.apply(landmarks.points)
    return transform, landmarks.with_points(pts)


# ---------------------------------------------------------------------------
# joint space width
# ---------------------------------------------------------------------------


def _densify(poly, step):
    out = [poly[:1]]
    for a, b in zip(poly[:-1], poly[1:]):
        n = max(1, int(math.ceil(np.hypot(*(b - a)) / step)))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.concatenate(out)


def _point_to_polyline(pts, poly):
    a = poly[:-1][None]
    ab = (poly[1:] - poly[:-1])[None]
    ap = pts[:, None, :] - a
    denom = np.einsum("ijk,ijk->ij", ab, ab)
    t = np.clip(np.einsum("ijk,ijk->ij", ap, ab) / np.where(denom > 0, denom, 1), 0, 1)
    d = ap - t[..., None] * ab
    return np.sqrt(np.einsum("ijk,ijk->ij", d, d)).min(axis=1)


def _polylines_cross(p, q):
    """True if any segment of ``p`` touches or crosses any segment of ``q``."""
    a, b = p[:-1][:, None], p[1:][:, None]
    c, d = q[:-1][None], q[1:][None]

    def orient(u, v, w):
        return (v[..., 0] - u[..., 0]) * (w[..., 1] - u[..., 1]) - (v[..., 1] - u[..., 1]) * (w[..., 0] - u[..., 0])

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    return bool(proper.any())


def min_jsw(landmarks, densify_step=0.1):
    """Minimum femur-tibia distance in mm.

    Each contour is the polyline through its role landmarks.  The tibia one
    is sampled every ``densify_step`` mm and the closest approach to the
    femur polyline is returned; femur vertices are checked against the tibia
    polyline as well, so the result is the exact polyline distance.  Crossing or touching contours give 0.0 and a
    :class:`ContoursIntersect` warning.
    """
    if densify_step <= 0:
        raise ValueError("densify_step must be positive")
    femur, tibia = landmarks.femur, landmarks.tibia
    if _polylines_cross(femur, tibia):
        warnings.warn("femur and tibia contours intersect", ContoursIntersect, stacklevel=2)
        return 0.0
    # the closest approach of two polylines is at a vertex of one of them, so
    # femur vertices against the tibia polyline make the sampled minimum exact
    d = float(min(_point_to_polyline(_densify(tibia, densify_step), femur).min(),
                  _point_to_polyline(femur, tibia).min()))
    if d == 0.0:
        warnings.warn("femur and tibia contours touch", ContoursIntersect, stacklevel=2)
    return d


def _contour_y(poly, x):
    order = np.argsort(poly[:, 0], kind="stable")
    xs, ys = poly[order, 0], poly[order, 1]
    if x < xs[0] or x > xs[-1]:
        raise OutOfSupport(f"x = {x:.3f} mm outside contour span [{xs[0]:.3f}, {xs[-1]:.3f}]")
    return float(np.interp(x, xs, ys))


def fjsw_origin(landmarks):
    """Origin x and direction (+1/-1) of the normalized fJSW axis.

    The origin is the femur contour end on the medial side; the axis points
    toward the lateral tibia extent.
    """
    medial, lateral = landmarks.points[list(landmarks.roles.tibia_extent_pair)]
    sign = 1.0 if lateral[0] >= medial[0] else -1.0
    femur = landmarks.femur
    ends = femur[[0, -1]]
    origin = ends[np.argmin(np.abs(ends[:, 0] - medial[0])), 0]
    return float(origin), sign


def fixed_jsw(landmarks, x_norm):
    """Vertical femur-tibia gap at normalized position ``x_norm`` over tibia width.

    Landmarks must already be plateau-aligned.
    """
    if not 0 <= x_norm <= 1:
        raise OutOfSupport(f"x_norm must be in [0, 1], got {x_norm}")
    width = tibia_width(landmarks)
    origin, sign = fjsw_origin(landmarks)
    x = origin + sign * x_norm * width
    gap = _contour_y(landmarks.tibia, x) - _contour_y(landmarks.femur, x)
    return max(gap, 0.0) / width


@dataclass(frozen=True)
class JswMeasurements:
    min_jsw: float
    med_fjsw: float
    lat_fjsw: float


def jsw_measurements(landmarks, densify_step=0.1):
    """minJSW plus medial/lateral fJSW, aligning the landmarks first."""
    _, aligned = align_to_plateau(landmarks)
    return JswMeasurements(
        min_jsw(aligned, densify_step),
        fixed_jsw(aligned, MEDIAL_FJSW_X),
        fixed_jsw(aligned, LATERAL_FJSW_X),
    )
