"""Compiled CART tree growth for the importance forest (Gini, binary labels)."""

import numpy as np
from numba import njit


@njit(cache=True)
def _gini(pos, n):
    if n == 0:
        return 0.0
    p = pos / n
    return 2.0 * p * (1.0 - p)


@njit(cache=True)
def grow_tree(x, y, sample, max_features, min_split, seed, importance):
    """Grow one tree on rows ``sample`` (with repeats) and add its weighted
    impurity decreases to ``importance``.  Returns the node count.

    Nodes split while they hold at least ``min_split`` samples and are impure.
    At each node ``max_features`` candidate features are drawn without
    replacement; a feature that is constant within the node offers no split.
    """
    np.random.seed(seed)
    n_total = sample.shape[0]
    n_feat = x.shape[1]
    # explicit stack of (start, end) ranges into ``idx``
    idx = sample.copy()
    stack_s = np.empty(2 * n_total + 2, dtype=np.int64)
    stack_e = np.empty(2 * n_total + 2, dtype=np.int64)
    top = 0
    stack_s[0] = 0
    stack_e[0] = n_total
    top = 1
    nodes = 0
    feats = np.arange(n_feat)
    vals = np.empty(n_total)
    labs = np.empty(n_total, dtype=np.int64)
    while top > 0:
        top -= 1
        s = stack_s[top]
        e = stack_e[top]
        nodes += 1
        n = e - s
        pos = 0
        for i in range(s, e):
            pos += y[idx[i]]
        if n < min_split or pos == 0 or pos == n:
            continue
        parent = _gini(pos, n)
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        # partial Fisher-Yates shuffle picks the candidate features
        for k in range(max_features):
            j = k + np.random.randint(n_feat - k)
            t = feats[k]
            feats[k] = feats[j]
            feats[j] = t
            f = feats[k]
            for i in range(n):
                vals[i] = x[idx[s + i], f]
            order = np.argsort(vals[:n], kind="mergesort")
            for i in range(n):
                labs[i] = y[idx[s + order[i]]]
            left_pos = 0
            for i in range(n - 1):
                left_pos += labs[i]
                a = vals[order[i]]
                b = vals[order[i + 1]]
                if b <= a:
                    continue
                nl = i + 1
                nr = n - nl
                child = (nl * _gini(left_pos, nl) + nr * _gini(pos - left_pos, nr)) / n
                gain = parent - child
                if gain > best_gain + 1e-15:
                    best_gain = gain
                    best_f = f
                    best_thr = a + (b - a) * 0.5
                    if best_thr >= b:
                        best_thr = a
        if best_f < 0:
            continue
        importance[best_f] += n / n_total * best_gain
        # partition idx[s:e] on the threshold
        lo = s
        hi = e - 1
        while lo <= hi:
            if x[idx[lo], best_f] <= best_thr:
                lo += 1
            else:
                t = idx[lo]
                idx[lo] = idx[hi]
                idx[hi] = t
                hi -= 1
        stack_s[top] = s
        stack_e[top] = lo
        top += 1
        stack_s[top] = lo
        stack_e[top] = e
        top += 1
    return nodes
