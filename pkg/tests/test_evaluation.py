import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oaknee import evaluation as ev
from oaknee.errors import DegenerateLabels


def pairwise_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert ev.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0
    assert ev.roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]).auc == 0.5
    assert ev.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == 0.75


def test_auc_single_class():
    with pytest.raises(DegenerateLabels):
        ev.roc_auc([0.1, 0.2], [1, 1])


def test_auc_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 8, n) / 4.0 if rng.random() < 0.5 else rng.normal(size=n)
        assert abs(ev.roc_auc(s, y).auc - pairwise_auc(s, y)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=40))
def test_auc_complement_and_monotone(pairs):
    s = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([int(p[1]) for p in pairs])
    if y.min() == y.max():
        return
    a = ev.roc_auc(s, y).auc
    assert a + ev.roc_auc(-s, y).auc == 1.0
    assert ev.roc_auc(np.exp(s) * 3 + 1, y).auc == a
    assert ev.roc_auc(s ** 3, y).auc == a


def test_roc_curve_shape():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 60)
    y[:2] = [0, 1]
    r = ev.roc_auc(rng.normal(size=60) + y, y)
    assert r.curve[0] == (0.0, 0.0) and r.curve[-1] == (1.0, 1.0)
    assert abs(ev.trapezoid_auc(r) - r.auc) < 1e-9
    assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)


def test_roc_csv(tmp_path):
    r = ev.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ev.write_roc_csv(tmp_path / "roc.csv", r)
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and lines[1].startswith("inf,0.0,0.0")
    assert len(lines) == len(r.fpr) + 1


# forest importance


def test_importance_informative_feature():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, 60)
        y[:2] = [0, 1]
        x = np.c_[y.astype(float), rng.normal(size=(60, 9))]
        rep = ev.forest_importance(x, y, ev.ForestConfig(n_trees=20, seed=seed))
        hits += rep.ranking[0] == 0
        assert abs(rep.importance.sum() - 1) < 1e-9
    assert hits >= 95


def test_importance_constant_feature_zero():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 50)
    y[:2] = [0, 1]
    x = np.c_[np.full(50, 3.0), rng.normal(size=(50, 4))]
    rep = ev.forest_importance(x, y, ev.ForestConfig(n_trees=30))
    assert rep.importance[0] == 0.0 and np.all(rep.importance >= 0)


def test_importance_errors():
    with pytest.raises(DegenerateLabels):
        ev.forest_importance(np.zeros((20, 3)), np.zeros(20))
    with pytest.raises(DegenerateLabels):
        ev.forest_importance(np.zeros((5, 3)), [0, 1, 0, 1, 0])


def test_importance_deterministic(tmp_path):
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(40, 6)), np.arange(40) % 2
    a = ev.forest_importance(x, y, ev.ForestConfig(n_trees=10, seed=5))
    b = ev.forest_importance(x, y, ev.ForestConfig(n_trees=10, seed=5))
    assert np.array_equal(a.importance, b.importance)
    ev.write_importance_csv(tmp_path / "imp.csv", a)
    rows = (tmp_path / "imp.csv").read_text().splitlines()
    assert rows[0] == "feature,importance,rank" and rows[1].endswith(",1")


# descriptor noise


def test_perturb_identity_and_clamp():
    x = np.abs(np.random.default_rng(4).normal(5, 2, 221))
    assert np.array_equal(ev.perturb_descriptor(x, 0.0, 0), x)
    noisy = ev.perturb_descriptor(np.zeros(10000), 5.0, 0)
    assert noisy.min() == 0.0
    with pytest.raises(ValueError):
        ev.perturb_descriptor(x, -1.0, 0)


def test_perturb_statistics():
    base = np.full((100000, 3), 100.0)
    for sigma in (1.0, 3.0, 5.0):
        noisy = ev.perturb_descriptor(base, sigma, 7)
        assert np.all(np.abs(noisy.std(axis=0) - sigma) < 0.02 * sigma)


def test_noise_sweep_seeds_independent_of_order():
    calls = []

    def fake(tag, sigma, seed):
        calls.append((tag, sigma, seed))
        return 0.9 - sigma / 100

    rows = ev.noise_sweep(fake, [0, 1, 3], ["lr", "js2-nn"], seed=4)
    rows2 = ev.noise_sweep(fake, [3, 0, 1], ["js2-nn", "lr"], seed=4)
    seeds = {(t, s): sd for t, s, sd in calls}
    assert len(seeds) == 6 and len(set(seeds.values())) == 6
    assert {(r.model, r.sigma_mm, r.auc) for r in rows} == {(r.model, r.sigma_mm, r.auc) for r in rows2}
    with pytest.raises(ValueError):
        ev.noise_sweep(fake, [-1], ["lr"])


def test_noise_sweep_zero_is_plain_evaluation():
    rows = ev.noise_sweep(lambda tag, sigma, seed: 0.77, [0], ["lr"])
    assert rows == [ev.NoiseSweepRow(0.0, "lr", 0.77)]


# density


def test_density_stats():
    rng = np.random.default_rng(5)
    v = np.r_[rng.normal(5.17, 0.96, 3000), rng.normal(3.98, 1.57, 3000)]
    y = np.r_[np.zeros(3000), np.ones(3000)]
    d = ev.class_density_stats(v, y)
    assert d.mean[0] == pytest.approx(np.mean(v[:3000]))
    assert d.std[1] == pytest.approx(np.std(v[3000:], ddof=1))
    width = np.diff(d.bin_edges)
    for c in (0, 1):
        assert len(d.density[c]) == 64
        assert abs((d.density[c] * width).sum() - 1) < 1e-6


def test_density_single_value_class():
    d = ev.class_density_stats([1.0, 1.0, 2.0, 3.0], [1, 1, 0, 0])
    assert d.std[1] == 0.0


def test_density_degenerate():
    with pytest.raises(DegenerateLabels):
        ev.class_density_stats([1.0, 2.0], [0, 0])
