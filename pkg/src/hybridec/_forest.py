"""Bagged CART trees, compiled with numba.

Variance-reduction splitting serves both regression and binary-probability
targets (for 0/1 labels the variance criterion is proportional to Gini).
All randomness flows through an explicit splitmix64 stream seeded per tree,
so results are bit-identical for a given seed regardless of thread count.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@njit(cache=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _next_u64(state):
    state[0] = state[0] + _GOLDEN
    return _mix64(state[0])


@njit(cache=True)
def _build_tree(x, y, min_leaf, mtry, tree_seed):
    n = x.shape[0]
    p = x.shape[1]
    state = np.empty(1, np.uint64)
    state[0] = _mix64(tree_seed)

    # Bootstrap sample of row indices.
    work = np.empty(n, np.int64)
    for i in range(n):
        work[i] = np.int64(_next_u64(state) % np.uint64(n))

    max_nodes = 2 * n + 1
    feat = np.full(max_nodes, -1, np.int64)
    thresh = np.zeros(max_nodes, np.float64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    value = np.zeros(max_nodes, np.float64)

    stack_node = np.empty(max_nodes, np.int64)
    stack_lo = np.empty(max_nodes, np.int64)
    stack_hi = np.empty(max_nodes, np.int64)
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    top = 1
    n_nodes = 1

    feat_pool = np.empty(p, np.int64)
    colbuf = np.empty(n, np.float64)
    ybuf = np.empty(n, np.float64)
    tmp = np.empty(n, np.int64)

    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        cnt = hi - lo

        s = 0.0
        ss = 0.0
        for i in range(lo, hi):
            yi = y[work[i]]
            s += yi
            ss += yi * yi
        value[node] = s / cnt
        sse_parent = ss - s * s / cnt
        if cnt < 2 * min_leaf or sse_parent <= 1e-12:
            continue

        for j in range(p):
            feat_pool[j] = j
        k_feats = mtry if mtry < p else p

        best_cost = np.inf
        best_f = -1
        best_t = 0.0
        for jj in range(k_feats):
            pick = jj + np.int64(_next_u64(state) % np.uint64(p - jj))
            f = feat_pool[pick]
            feat_pool[pick] = feat_pool[jj]
            feat_pool[jj] = f

            for i in range(cnt):
                colbuf[i] = x[work[lo + i], f]
            order = np.argsort(colbuf[:cnt])
            for i in range(cnt):
                ybuf[i] = y[work[lo + order[i]]]

            sum_l = 0.0
            ss_l = 0.0
            for i in range(cnt - 1):
                yl = ybuf[i]
                sum_l += yl
                ss_l += yl * yl
                n_l = i + 1
                n_r = cnt - n_l
                if n_l < min_leaf:
                    continue
                if n_r < min_leaf:
                    break
                v_lo = colbuf[order[i]]
                v_hi = colbuf[order[i + 1]]
                if v_lo == v_hi:
                    continue
                sum_r = s - sum_l
                ss_r = ss - ss_l
                cost = (ss_l - sum_l * sum_l / n_l) + (ss_r - sum_r * sum_r / n_r)
                if cost < best_cost:
                    best_cost = cost
                    best_f = f
                    best_t = 0.5 * (v_lo + v_hi)

        if best_f < 0:
            continue

        nl = 0
        for i in range(lo, hi):
            if x[work[i], best_f] < best_t:
                tmp[nl] = work[i]
                nl += 1
        nr = nl
        for i in range(lo, hi):
            if not (x[work[i], best_f] < best_t):
                tmp[nr] = work[i]
                nr += 1
        for i in range(cnt):
            work[lo + i] = tmp[i]

        feat[node] = best_f
        thresh[node] = best_t
        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        left[node] = lchild
        right[node] = rchild
        stack_node[top] = lchild
        stack_lo[top] = lo
        stack_hi[top] = lo + nl
        top += 1
        stack_node[top] = rchild
        stack_lo[top] = lo + nl
        stack_hi[top] = hi
        top += 1

    return feat[:n_nodes], thresh[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


class Forest:
    """Fitted bagged-tree ensemble; ``predict`` averages per-tree leaf means."""

    def __init__(self, n_trees: int, min_leaf: int, mtry: int, seed: int):
        self.n_trees = n_trees
        self.min_leaf = min_leaf
        self.mtry = mtry
        self.seed = seed
        self._trees = None

    def fit(self, x: np.ndarray, y: np.ndarray) -> "Forest":
        x = np.ascontiguousarray(x, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        base = np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
        trees = []
        for t in range(self.n_trees):
            tree_seed = np.uint64((int(base) + (t + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
            trees.append(
                _build_tree(x, y, np.int64(self.min_leaf), np.int64(self.mtry), tree_seed)
            )
        self._trees = trees
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        out = np.zeros(x.shape[0], dtype=np.float64)
        for feat, thresh, left, right, value in self._trees:
            out += _predict_tree(x, feat, thresh, left, right, value)
        return out / len(self._trees)


@njit(cache=True)
def _predict_tree(x, feat, thresh, left, right, value):
    n = x.shape[0]
    out = np.empty(n, np.float64)
    for i in range(n):
        node = 0
        while feat[node] >= 0:
            if x[i, feat[node]] < thresh[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out
