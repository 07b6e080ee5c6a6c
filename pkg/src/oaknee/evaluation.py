"""ROC AUC, forest feature importance, descriptor noise and density statistics."""

import csv
import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ._forest import grow_tree
from .errors import DegenerateLabels, ShapeError


def _binary_labels(labels, n=None):
    y = np.asarray(labels)
    if y.ndim != 1 or (n is not None and len(y) != n):
        raise ShapeError(f"labels must be a vector of length {n}, got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)
    if y.min(initial=1) == y.max(initial=0):
        raise DegenerateLabels("both classes must be present")
    return y


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RocResult:
    auc: float
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def curve(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores, labels):
    """Mann-Whitney AUC (ties count one half) plus the ROC curve.

    The rank sum is carried as the integer ``2U`` so that the AUC of negated
    scores is exactly one minus this AUC.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"scores must be a vector, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    y = _binary_labels(labels, len(s))
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    # twice the average rank is an integer (first + last rank of a tie group)
    ranks2 = np.rint(2 * rankdata(s, method="average")).astype(np.int64)
    u2 = int(ranks2[y == 1].sum()) - n_pos * (n_pos + 1)
    d = 2 * n_pos * n_neg
    # evaluate the smaller side directly so auc(s) + auc(-s) == 1 in floating point
    auc = u2 / d if 2 * u2 <= d else 1.0 - (d - u2) / d

    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(y_sorted)[last_of_group]
    fp = np.cumsum(1 - y_sorted)[last_of_group]
    thresholds = np.r_[np.inf, s_sorted[last_of_group]]
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / n_neg
    return RocResult(float(auc), thresholds, fpr, tpr, n_pos, n_neg)


def trapezoid_auc(result):
    return float(np.sum(np.diff(result.fpr) * (result.tpr[1:] + result.tpr[:-1]) / 2))


def write_roc_csv(path, result):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(result.thresholds, result.fpr, result.tpr):
            w.writerow(["inf" if np.isinf(t) else repr(float(t)), repr(float(f)), repr(float(p))])


# ---------------------------------------------------------------------------
# forest importance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_features: str = "sqrt"
    min_split: int = 2
    seed: int = 0

    def n_candidates(self, n_features):
        if self.max_features == "sqrt":
            return max(1, int(np.sqrt(n_features)))
        if self.max_features == "all":
            return n_features
        k = int(self.max_features)
        if not 1 <= k <= n_features:
            raise ValueError(f"max_features {k} outside 1..{n_features}")
        return k


@dataclass(frozen=True)
class ImportanceReport:
    importance: np.ndarray
    ranking: np.ndarray

    def rank_of(self, feature):
        """0-based position of ``feature`` in the descending ranking."""
        return int(np.flatnonzero(self.ranking == feature)[0])


def forest_importance(features, labels, cfg=ForestConfig()):
    """Mean decrease in Gini impurity over a bootstrap forest, normalized to 1.

    Each tree's importances are normalized before averaging, so every tree
    carries equal weight.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be a matrix, got shape {x.shape}")
    y = _binary_labels(labels, x.shape[0])
    if x.shape[0] < 10:
        raise DegenerateLabels(f"forest importance needs at least 10 samples, got {x.shape[0]}")
    n, p = x.shape
    k = cfg.n_candidates(p)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF0]))
    total = np.zeros(p)
    for _ in range(cfg.n_trees):
        sample = rng.integers(0, n, size=n)
        imp = np.zeros(p)
        grow_tree(x, y, sample, k, cfg.min_split, int(rng.integers(2 ** 31)), imp)
        if imp.sum() > 0:
            total += imp / imp.sum()
    if total.sum() == 0:
        importance = np.zeros(p)
    else:
        importance = total / total.sum()
    ranking = np.argsort(-importance, kind="stable")
    return ImportanceReport(importance, ranking)


def write_importance_csv(path, report, names=None):
    names = names or [f"f{i}" for i in range(len(report.importance))]
    rank = np.empty(len(report.ranking), dtype=np.int64)
    rank[report.ranking] = np.arange(1, len(report.ranking) + 1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "importance", "rank"])
        for i in report.ranking:
            w.writerow([names[i], repr(float(report.importance[i])), int(rank[i])])


# ---------------------------------------------------------------------------
# descriptor noise
# ---------------------------------------------------------------------------


def perturb_descriptor(js2, sigma_mm, rng):
    """Add i.i.d. N(0, sigma^2) noise to every entry and clamp at zero."""
    if sigma_mm < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma_mm}")
    x = np.asarray(js2, dtype=np.float64)
    if sigma_mm == 0:
        return x.copy()
    rng = np.random.default_rng(rng)
    return np.maximum(x + rng.normal(0.0, sigma_mm, x.shape), 0.0)


def stream_seed(*parts):
    """Stable 64-bit seed from arbitrary parts (independent of call order)."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class NoiseSweepRow:
    sigma_mm: float
    model: str
    auc: float


def noise_sweep(train_eval, sigmas, model_tags, seed=0):
    """Retrain and evaluate each model at each noise level.

    ``train_eval(tag, sigma, seed)`` perturbs train and test descriptors with
    noise drawn from ``seed``, retrains ``tag`` and returns the test AUC.
    The seed of each job is derived from ``(seed, sigma, tag)`` only.
    """
    rows = []
    for sigma in sigmas:
        if sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        for tag in model_tags:
            auc = train_eval(tag, float(sigma), stream_seed(seed, float(sigma), tag))
            rows.append(NoiseSweepRow(float(sigma), tag, float(auc)))
    return rows


def write_noise_sweep_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma_mm", "model", "auc"])
        for r in rows:
            w.writerow([repr(r.sigma_mm), r.model, repr(r.auc)])


# ---------------------------------------------------------------------------
# class densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DensityStats:
    mean: tuple
    std: tuple
    count: tuple
    bin_edges: np.ndarray
    density: tuple

    @property
    def bin_centers(self):
        return (self.bin_edges[:-1] + self.bin_edges[1:]) / 2


def class_density_stats(values, labels, bins=64):
    """Per-class mean, unbiased std and binned density over the pooled range."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"feature column must be a vector, got shape {v.shape}")
    y = _binary_labels(labels, len(v))
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    means, stds, counts, dens = [], [], [], []
    for c in (0, 1):
        vc = v[y == c]
        means.append(float(vc.mean()))
        stds.append(float(vc.std(ddof=1)) if len(vc) > 1 else 0.0)
        counts.append(int(len(vc)))
        h, _ = np.histogram(vc, bins=edges, density=True)
        dens.append(h)
    return DensityStats(tuple(means), tuple(stds), tuple(counts), edges, tuple(dens))


def write_density_csv(path, stats):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center", "class0_density", "class1_density"])
        for c, d0, d1 in zip(stats.bin_centers, stats.density[0], stats.density[1]):
            w.writerow([repr(float(c)), repr(float(d0)), repr(float(d1))])
