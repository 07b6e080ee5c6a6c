"""Shared fixtures: landmark builders and a small generated cohort."""

import numpy as np
import pytest

from oaknee.geometry import LandmarkSet, RoleConfig

ROLES = RoleConfig.default()


def make_landmarks(tibia, femur, n_points=74, roles=ROLES):
    """Place explicit tibia/femur contours into a full 74-point set."""
    pts = np.zeros((n_points, 2))
    pts[list(roles.tibia_indices)] = tibia
    pts[list(roles.femur_indices)] = femur
    return LandmarkSet(pts, roles)


def flat_knee(width=70.0, gap=5.0, femur_y=None):
    """Horizontal tibia from x=width (lateral, first index) to x=0 (medial, last).

    The femur runs over the same span at y = -gap (or ``femur_y(x)``).
    """
    xt = np.linspace(width, 0.0, 17)
    xf = np.linspace(0.0, width, 13)
    yf = -gap * np.ones_like(xf) if femur_y is None else femur_y(xf)
    return make_landmarks(np.c_[xt, np.zeros(17)], np.c_[xf, yf])


def random_landmarks(rng, n_points=74):
    return LandmarkSet(rng.uniform(-50, 50, size=(n_points, 2)), ROLES)


def random_rigid(rng):
    theta = rng.uniform(-np.pi, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]]), rng.uniform(-100, 100, size=2)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """A 40-knee generated cohort (train and test manifests)."""
    from oaknee.synth import SynthConfig, synth_generate

    out = tmp_path_factory.mktemp("cohort")
    cfg = SynthConfig(n_knees=40, oa_fraction=0.5, seed=3)
    train_m, test_m = synth_generate(cfg, out)
    return cfg, out, train_m, test_m


@pytest.fixture(scope="session")
def synth_patches(tmp_path_factory):
    """64 generated knees as center-cropped (N, 1, 48, 48) float32 patches plus labels."""
    from oaknee import dataio, pipeline
    from oaknee.synth import SynthConfig, synth_generate

    out = tmp_path_factory.mktemp("patches")
    train_m, _ = synth_generate(SynthConfig(n_knees=128, oa_fraction=0.5, seed=21), out)
    records = dataio.load_dataset(train_m, "test")[:64]
    big = pipeline.rescaled_patches([pipeline.roi_patch(r) for r in records])
    return big[:, None, 4:52, 4:52].copy(), np.array([r.label for r in records])


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
