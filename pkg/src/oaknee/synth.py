"""Calibrated synthetic knee cohort: landmarks, 16-bit radiographs, manifests.

Every knee draws from its own RNG stream keyed by ``(seed, knee index)`` so
the output does not depend on generation order.  The medial joint-space gap
is stored as descriptor entry ``js2_index(14, 10)`` and follows truncated
normal class distributions with the target mean and std of that feature.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
from numba import njit
from scipy import optimize, stats

from .geometry import JS2_LENGTH, N_FEMUR, N_TIBIA, RoleConfig, _polylines_cross, js2_index

KNEE_GAP_FEATURE = js2_index(14, 10)

# normalized positions (0 = medial tibia extent, 1 = lateral) of the role landmarks,
# listed lateral to medial as they appear in the role index lists
TIBIA_U = np.array([1.0, 0.95, 0.88, 0.80, 0.72, 0.64, 0.57, 0.53, 0.50,
                    0.47, 0.42, 0.36, 0.30, 0.25, 0.20, 0.10, 0.0])
FEMUR_U = np.array([0.97, 0.90, 0.82, 0.74, 0.66, 0.60, 0.50, 0.40, 0.34,
                    0.25, 0.20, 0.12, 0.04])
MEDIAL_U = 0.20
LATERAL_U = 0.80
# severity range expressed in condyle shape; keeps the femur over the fJSW span
SHAPE_SEVERITY = (-1.0, 3.0)


@dataclass
class SynthConfig:
    n_knees: int = 400
    oa_fraction: float = 0.5
    seed: int = 0
    test_fraction: float = 0.5
    spacing_mm: float = 0.2
    # geometry (mm)
    tibia_width_mean: float = 72.0
    tibia_width_std: float = 4.0
    medial_gap_oa: tuple = (3.98, 1.57)
    medial_gap_non_oa: tuple = (5.17, 0.96)
    gap_lower_bound: float = 0.5
    # latent severity: N(separation * label, 1); the traits below are
    # (value at severity 0, change per separation unit, residual std)
    severity_separation: float = 1.8
    lateral_gap: tuple = (6.2, -0.6, 0.6)
    osteophyte: tuple = (0.4, 0.8, 0.3)
    spine_height: tuple = (3.5, 0.4, 0.5)
    # condyle spread and curvature per unit severity, femur slide std (mm)
    condyle_spread: float = 0.08
    condyle_curvature: float = 0.3
    femur_slide_std: float = 3.0
    landmark_jitter: float = 0.25
    max_rotation_deg: float = 6.0
    # texture
    hurst_oa: tuple = (0.45, 0.10)
    hurst_non_oa: tuple = (0.65, 0.10)
    contrast_oa: tuple = (1.15, 0.25)
    contrast_non_oa: tuple = (1.0, 0.25)
    texture_amplitude: float = 3500.0
    noise_level: float = 400.0

    def __post_init__(self):
        if not 0 < self.oa_fraction < 1:
            raise ValueError(f"oa_fraction must be in (0, 1), got {self.oa_fraction}")
        if not 0 <= self.test_fraction < 1:
            raise ValueError(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        if self.n_knees < 2 or self.spacing_mm <= 0 or self.tibia_width_mean <= 0:
            raise ValueError("n_knees >= 2 and positive spacing/width required")
        # JSON hands back lists; keep every (mean, std) pair a tuple of floats
        for f in fields(self):
            if f.type in (tuple, "tuple"):
                setattr(self, f.name, tuple(float(v) for v in getattr(self, f.name)))

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# fractal texture
# ---------------------------------------------------------------------------


@njit(cache=True)
def _square_step(z, r0, c0, step, half, noise):
    n = z.shape[0]
    for i in range(noise.shape[0]):
        r = r0 + i * step
        for j in range(noise.shape[1]):
            c = c0 + j * step
            total = 0.0
            count = 0
            if r - half >= 0:
                total += z[r - half, c]
                count += 1
            if r + half < n:
                total += z[r + half, c]
                count += 1
            if c - half >= 0:
                total += z[r, c - half]
                count += 1
            if c + half < n:
                total += z[r, c + half]
                count += 1
            z[r, c] = total / count + noise[i, j]


def midpoint_displacement(levels, hurst, rng):
    """Diamond-square fBm surface of side ``2**levels + 1`` with unit coarse scale."""
    n = 2 ** levels + 1
    z = np.zeros((n, n))
    z[::n - 1, ::n - 1] = rng.standard_normal((2, 2))
    step = n - 1
    scale = 1.0
    while step > 1:
        half = step // 2
        scale *= 0.5 ** hurst
        # diamond: centres of squares
        c = (z[0:-1:step, 0:-1:step] + z[0:-1:step, step::step]
             + z[step::step, 0:-1:step] + z[step::step, step::step]) / 4
        z[half::step, half::step] = c + scale * rng.standard_normal(c.shape)
        # square: edge midpoints, averaging the available neighbours
        for r0, c0 in ((0, half), (half, 0)):
            rows = len(range(r0, n, step))
            cols = len(range(c0, n, step))
            _square_step(z, r0, c0, step, half, scale * rng.standard_normal((rows, cols)))
        step = half
    return z


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def truncated_normal_params(target_mean, target_std, lower):
    """(mu, sigma) of a normal truncated below at ``lower`` with the given moments."""

    def moments(p):
        mu, log_sigma = p
        sigma = math.exp(log_sigma)
        a = (lower - mu) / sigma
        m, v = stats.truncnorm.stats(a, np.inf, loc=mu, scale=sigma, moments="mv")
        return [float(m) - target_mean, math.sqrt(float(v)) - target_std]

    sol = optimize.fsolve(moments, [target_mean, math.log(target_std)], xtol=1e-12)
    return float(sol[0]), float(math.exp(sol[1]))


def calibrated_gaps(strata, u_jitter, mean, std, lower):
    """Stratified truncated-normal draws: stratum ``k`` of ``n`` maps to ``(k + u)/n``."""
    mu, sigma = truncated_normal_params(mean, std, lower)
    n = len(strata)
    q = (np.asarray(strata) + np.asarray(u_jitter)) / n
    a = (lower - mu) / sigma
    return stats.truncnorm.ppf(q, a, np.inf, loc=mu, scale=sigma)


# ---------------------------------------------------------------------------
# knee geometry
# ---------------------------------------------------------------------------


@dataclass
class KneeParams:
    label: int
    width: float
    medial_gap: float
    lateral_gap: float
    osteophyte: float
    spine_height: float
    hurst: float
    contrast: float
    rotation: float
    shift: tuple
    severity: float = 0.0
    femur_slide: float = 0.0
    extra: dict = field(default_factory=dict)


def tibia_surface(u, width, spine_height):
    """Plateau height (mm, y down, 0 at the rim) at normalized positions ``u``."""
    u = np.asarray(u, dtype=np.float64)
    # concave medial plateau, flatter lateral plateau, spines near the middle
    medial = 0.9 * np.exp(-((u - 0.22) / 0.12) ** 2)
    lateral = 0.4 * np.exp(-((u - 0.78) / 0.12) ** 2)
    spines = spine_height * (np.exp(-((u - 0.47) / 0.025) ** 2) + 0.9 * np.exp(-((u - 0.53) / 0.025) ** 2))
    rim = 1.2 * (np.exp(-(u / 0.05) ** 2) + np.exp(-((1 - u) / 0.05) ** 2))
    return (medial + lateral) * width / 72.0 - spines + rim


def gap_profile(u, medial_gap, lateral_gap, curvature=25.0):
    """Femur-tibia vertical gap (mm) along the joint; wide notch in the middle."""
    u = np.asarray(u, dtype=np.float64)
    med = medial_gap + curvature * (u - MEDIAL_U) ** 2
    lat = lateral_gap + curvature * (u - LATERAL_U) ** 2
    notch = 14.0 * np.exp(-((u - 0.5) / 0.07) ** 2)
    return np.where(u < 0.5, med, lat) + notch


def knee_frame_landmarks(k, spread=0.0, curvature=0.0):
    """74 landmarks in the knee frame: x = (u - 0.5) * width, y down, plateau rim at 0.

    ``spread`` and ``curvature`` scale the condyle span and gap curvature per
    unit of ``k.severity``; the femur then slides ``k.femur_slide`` mm along x.
    Femur heights follow the tibia surface at the moved positions, so every
    vertical gap stays at its profile value.
    """
    w = k.width
    x_of = lambda u: (np.asarray(u) - 0.5) * w  # noqa: E731

    t_y = tibia_surface(TIBIA_U, w, k.spine_height)
    tibia = np.column_stack([x_of(TIBIA_U), t_y])
    # marginal osteophytes push the medial rim outwards and up
    tibia[-1, 0] -= k.osteophyte
    tibia[-1, 1] -= 0.4 * k.osteophyte
    tibia[-2, 0] -= 0.3 * k.osteophyte
    tibia[0, 0] += 0.3 * k.osteophyte

    sev = float(np.clip(k.severity, *SHAPE_SEVERITY))
    f_u = 0.5 + (FEMUR_U - 0.5) * (1.0 + spread * sev) + k.femur_slide / w
    curv = 25.0 * (1.0 + curvature * sev)
    f_y = tibia_surface(f_u, w, k.spine_height) - gap_profile(f_u, k.medial_gap, k.lateral_gap, curv)
    femur = np.column_stack([x_of(f_u), f_y])
    femur[-1, 0] -= 0.5 * k.osteophyte

    # the JS2 gap pair sits exactly one medial gap apart vertically
    femur[10] = tibia[14] - (0.0, k.medial_gap)

    # shaft outlines (not used by the descriptor)
    depth = np.linspace(0, 40, 13)[1:]
    f_lat = np.column_stack([np.full(12, x_of(0.96)) + 0.08 * depth[::-1], f_y[0] - depth[::-1]])
    f_med = np.column_stack([np.full(12, x_of(0.05)) - 0.08 * depth, f_y[-1] - depth])
    d2 = np.linspace(0, 35, 11)[1:]
    t_lat = np.column_stack([np.full(10, x_of(1.0)) - 0.15 * d2[::-1], t_y[0] + d2[::-1]])
    t_med = np.column_stack([np.full(10, x_of(0.0)) + 0.15 * d2, t_y[-1] + d2])
    pts = np.concatenate([f_lat, femur, f_med, t_lat, tibia, t_med])
    assert len(pts) == 74
    return pts


def default_roles():
    return RoleConfig.default()


def sample_knee(cfg, label, gap, rng):
    def draw(pair):
        return rng.normal(*pair)

    def trait(spec):
        base, slope, std = spec
        return base + slope * t + std * rng.standard_normal()

    oa = label == 1
    # one latent severity drives the shape traits besides the calibrated gap
    severity = float(cfg.severity_separation * label + rng.standard_normal())
    t = severity / cfg.severity_separation
    width = float(np.clip(rng.normal(cfg.tibia_width_mean, cfg.tibia_width_std),
                          0.8 * cfg.tibia_width_mean, 1.2 * cfg.tibia_width_mean))
    lat = float(max(trait(cfg.lateral_gap), 1.0))
    ost = float(abs(trait(cfg.osteophyte)))
    spine = float(np.clip(trait(cfg.spine_height), 1.0, 6.0))
    slide = float(np.clip(rng.normal(0.0, cfg.femur_slide_std), -2.5 * cfg.femur_slide_std,
                          2.5 * cfg.femur_slide_std))
    hurst = float(np.clip(draw(cfg.hurst_oa if oa else cfg.hurst_non_oa), 0.1, 0.95))
    contrast = float(np.clip(draw(cfg.contrast_oa if oa else cfg.contrast_non_oa), 0.3, 2.5))
    rot = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    shift = (float(rng.uniform(-3, 3)), float(rng.uniform(-3, 3)))
    return KneeParams(label, width, float(gap), lat, ost, spine, hurst, contrast, rot, shift,
                      severity, slide)


def image_shape(cfg, width):
    w_mm = width * 1.1 + 16.0
    h_mm = 64.0
    return int(round(h_mm / cfg.spacing_mm)), int(round(w_mm / cfg.spacing_mm))


def place(points_knee, k, shape, spacing):
    """Knee frame -> image mm: rotate about the joint centre, then translate."""
    h, w = shape
    centre = np.array([w * spacing / 2, h * spacing * 0.5]) + np.asarray(k.shift)
    c, s = math.cos(k.rotation), math.sin(k.rotation)
    rot = np.array([[c, -s], [s, c]])
    return points_knee @ rot.T + centre, centre, rot


def jitter_landmarks(points, amount, rng):
    out = points + rng.normal(0, amount, points.shape)
    # the gap pair keeps its exact separation; jitter moves both points together
    t, f = 47 + 14, 12 + 10
    out[f] = out[t] - (points[t] - points[f])
    return out


def render(k, pts_knee, shape, spacing, cfg, rng):
    """16-bit radiograph-like raster for one knee (values in 0..65535)."""
    h, w = shape
    _, centre, rot = place(pts_knee, k, shape, spacing)
    yy, xx = np.mgrid[0:h, 0:w]
    img_mm = np.stack([(xx + 0.5) * spacing, (yy + 0.5) * spacing], axis=-1) - centre
    knee = img_mm @ rot  # inverse rotation (rot is orthonormal)
    kx, ky = knee[..., 0], knee[..., 1]

    tib = pts_knee[47:64]
    fem = pts_knee[12:25]
    to = np.argsort(tib[:, 0])
    fo = np.argsort(fem[:, 0])
    t_y = np.interp(kx, tib[to, 0], tib[to, 1])
    f_y = np.interp(kx, fem[fo, 0], fem[fo, 1])
    half = k.width / 2

    tibia = (ky > t_y) & (np.abs(kx) < half - 0.15 * np.clip(ky, 0, None) + 1.0)
    femur = (ky < f_y) & (np.abs(kx) < half * 0.98 + 0.08 * np.clip(-ky, 0, None))

    base = 9000.0 + 1500.0 * np.exp(-((kx / (k.width * 0.9)) ** 2))
    img = base.copy()
    img[femur] += 17000.0 + 40.0 * np.clip(-ky[femur] - 10, 0, None)
    img[tibia] += 15000.0

    # trabecular texture in the tibia, sampled on a 0.2 mm lattice in the knee frame
    levels = 9
    tex = midpoint_displacement(levels, k.hurst, rng)
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)
    n = tex.shape[0]
    tr = np.clip(np.rint(ky / 0.2).astype(int), 0, n - 1)
    tc = np.clip(np.rint((kx + half) / 0.2).astype(int), 0, n - 1)
    img[tibia] += cfg.texture_amplitude * k.contrast * tex[tr[tibia], tc[tibia]]
    # denser subchondral band right under the plateau
    band = tibia & (ky - t_y < 6.0)
    img[band] += 2500.0 * k.contrast

    img += rng.normal(0, cfg.noise_level, img.shape)
    return np.clip(np.rint(img), 0, 65535).astype(np.uint16)


# ---------------------------------------------------------------------------
# cohort assembly
# ---------------------------------------------------------------------------


def cohort_plan(cfg):
    """Labels, calibrated gaps, subject ids and cohort assignment for every knee."""
    master = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    n = cfg.n_knees
    n_oa = int(round(n * cfg.oa_fraction))
    labels = np.zeros(n, dtype=int)
    labels[master.permutation(n)[:n_oa]] = 1
    gaps = np.empty(n)
    for lab, (mean, std) in ((1, cfg.medial_gap_oa), (0, cfg.medial_gap_non_oa)):
        idx = np.flatnonzero(labels == lab)
        strata = master.permutation(len(idx))
        jitter = master.random(len(idx))
        gaps[idx] = calibrated_gaps(strata, jitter, mean, std, cfg.gap_lower_bound)
    subjects = np.arange(n) // 2
    n_subj = subjects[-1] + 1
    test_subjects = master.permutation(n_subj)[:int(round(n_subj * cfg.test_fraction))]
    cohort = np.where(np.isin(subjects, test_subjects), "test", "train")
    return labels, gaps, subjects, cohort


def generate_knee(cfg, i, label, gap):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
    k = sample_knee(cfg, label, gap, rng)
    pts_knee = knee_frame_landmarks(k, cfg.condyle_spread, cfg.condyle_curvature)
    shape = image_shape(cfg, k.width)
    pts_img, _, _ = place(pts_knee, k, shape, cfg.spacing_mm)
    # narrow gaps can cross under jitter; redraw (from the same stream) until clear
    for _ in range(20):
        jittered = jitter_landmarks(pts_img, cfg.landmark_jitter, rng)
        if not _polylines_cross(jittered[12:25], jittered[47:64]):
            break
    pts_img = jittered
    pixels = render(k, pts_knee, shape, cfg.spacing_mm, cfg, rng)
    return k, pts_img, pixels


def synth_generate(cfg, out_dir):
    """Write a synthetic cohort to ``out_dir``.

    Produces ``images/*.pgm`` (16-bit), ``points/*.pts``, ``manifest_train.csv``,
    ``manifest_test.csv``, ``truth.csv`` and ``synth_config.json``.  Returns the
    two manifest paths.
    """
    from . import dataio

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "points").mkdir(parents=True, exist_ok=True)
    labels, gaps, subjects, cohort = cohort_plan(cfg)
    rows = {"train": [], "test": []}
    truth = []
    for i in range(cfg.n_knees):
        k, pts, pixels = generate_knee(cfg, i, int(labels[i]), gaps[i])
        knee_id = f"knee_{i:05d}"
        img_rel = f"images/{knee_id}.pgm"
        pts_rel = f"points/{knee_id}.pts"
        dataio.write_pgm(out / img_rel, pixels)
        dataio.write_points(out / pts_rel, pts)
        rows[cohort[i]].append(dataio.ManifestEntry(
            image_path=img_rel, points_path=pts_rel, knee_id=knee_id,
            subject_id=f"subj_{subjects[i]:05d}", side="L" if i % 2 == 0 else "R",
            kl_grade=3 if k.label else 0, spacing_mm=cfg.spacing_mm,
        ))
        truth.append((knee_id, k.label, k.severity, k.width, k.medial_gap, k.lateral_gap, k.osteophyte,
                      k.spine_height, k.femur_slide, k.hurst, k.contrast, math.degrees(k.rotation)))
    paths = {}
    for name, entries in rows.items():
        paths[name] = out / f"manifest_{name}.csv"
        dataio.write_manifest(paths[name], entries)
    with open(out / "truth.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("knee_id,label,severity,tibia_width_mm,medial_gap_mm,lateral_gap_mm,osteophyte_mm,"
                 "spine_height_mm,femur_slide_mm,hurst,contrast,rotation_deg\n")
        for row in truth:
            fh.write(",".join([row[0], str(row[1])] + [repr(float(v)) for v in row[2:]]) + "\n")
    (out / "synth_config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    return paths["train"], paths["test"]


INFORMATIVE_JS2 = (KNEE_GAP_FEATURE,)

assert JS2_LENGTH == N_TIBIA * N_FEMUR
