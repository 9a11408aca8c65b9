"""Histogram CART kernels: bagged forests and stage-wise gradient boosting.

Covariates are binned per feature (``edges[f, b]`` are ascending cut points,
padded with +inf); a split at bin ``b`` sends ``x <= edges[f, b]`` left.
Trees are stored flat: ``feat`` (-1 for leaves), ``thr``, ``left`` (the right
child is always ``left + 1``) and ``value``, with per-tree ``offsets``.

Splits maximize the reduction in squared error of the working response;
leaf values are ``sum(response) / sum(weight)`` so the same builder serves
mean leaves (weight 1) and Newton leaves (weight = hessian).
"""

import numpy as np
from numba import njit

LOSS_SQUARED = 0
LOSS_LOGISTIC = 1


def make_edges(x: np.ndarray, max_bins: int):
    """Per-feature cut points and bin codes for training matrix ``x``."""
    n, d = x.shape
    edges = np.full((d, max_bins), np.inf)
    n_edges = np.zeros(d, dtype=np.int64)
    for f in range(d):
        u = np.unique(x[:, f])
        if u.size <= 1:
            continue
        if u.size <= max_bins:
            cuts = 0.5 * (u[1:] + u[:-1])
        else:
            q = np.quantile(x[:, f], np.arange(1, max_bins) / max_bins)
            cuts = np.unique(q)
            cuts = cuts[cuts < u[-1]]
        edges[f, : cuts.size] = cuts
        n_edges[f] = cuts.size
    return edges, n_edges


def bin_codes(x: np.ndarray, edges: np.ndarray, n_edges: np.ndarray) -> np.ndarray:
    codes = np.empty(x.shape, dtype=np.int32)
    for f in range(x.shape[1]):
        codes[:, f] = np.searchsorted(edges[f, : n_edges[f]], x[:, f], side="left")
    return codes


@njit(cache=True, nogil=True)
def _build(codes, resp, weight, idx, edges, n_edges, max_depth, min_split, min_leaf,
           mtry, feat, thr, left, value, leaf_of, cnt, sm):
    """Grow one tree over rows ``idx`` (reordered in place); returns node count."""
    d = codes.shape[1]
    n_idx = idx.shape[0]
    stack_node = np.empty(2 * n_idx + 2, dtype=np.int64)
    stack_start = np.empty(2 * n_idx + 2, dtype=np.int64)
    stack_end = np.empty(2 * n_idx + 2, dtype=np.int64)
    stack_depth = np.empty(2 * n_idx + 2, dtype=np.int64)
    perm = np.arange(d)
    top = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n_idx
    stack_depth[0] = 0
    n_nodes = 1
    while top >= 0:
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        top -= 1
        m = end - start
        s_y = 0.0
        s_yy = 0.0
        s_w = 0.0
        for t in range(start, end):
            i = idx[t]
            s_y += resp[i]
            s_yy += resp[i] * resp[i]
            s_w += weight[i]
        sse = s_yy - s_y * s_y / m
        best_gain = 1e-12 * (1.0 + s_yy)
        best_f = -1
        best_b = -1
        can_split = (
            (max_depth < 0 or depth < max_depth)
            and m > min_split
            and m >= 2 * min_leaf
            and sse > 1e-12 * (1.0 + s_yy)
        )
        if can_split:
            # partial Fisher-Yates: first mtry entries of perm are the candidates
            if mtry < d:
                for j in range(mtry):
                    r = j + np.random.randint(d - j)
                    tmp = perm[j]
                    perm[j] = perm[r]
                    perm[r] = tmp
            for jj in range(mtry):
                f = perm[jj]
                nb = n_edges[f]
                if nb == 0:
                    continue
                # cnt/sm are all-zero on entry; only [lo, hi] is touched and reset
                lo = nb
                hi = 0
                for t in range(start, end):
                    i = idx[t]
                    c = codes[i, f]
                    cnt[c] += 1
                    sm[c] += resp[i]
                    if c < lo:
                        lo = c
                    if c > hi:
                        hi = c
                if lo == hi:
                    cnt[lo] = 0
                    sm[lo] = 0.0
                    continue
                nl = 0
                sl = 0.0
                for b in range(lo, hi):
                    nl += cnt[b]
                    sl += sm[b]
                    nr = m - nl
                    if nl < min_leaf:
                        continue
                    if nr < min_leaf:
                        break
                    if cnt[b] == 0:
                        continue
                    sr = s_y - sl
                    gain = sl * sl / nl + sr * sr / nr - s_y * s_y / m
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_b = b
                for b in range(lo, hi + 1):
                    cnt[b] = 0
                    sm[b] = 0.0
        if best_f < 0:
            feat[node] = -1
            value[node] = s_y / s_w if s_w > 1e-300 else 0.0
            for t in range(start, end):
                leaf_of[idx[t]] = node
            continue
        # partition rows: codes <= best_b go left
        i = start
        j = end - 1
        while i <= j:
            if codes[idx[i], best_f] <= best_b:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        feat[node] = best_f
        thr[node] = edges[best_f, best_b]
        lc = n_nodes
        left[node] = lc
        n_nodes += 2
        top += 1
        stack_node[top] = lc + 1
        stack_start[top] = i
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lc
        stack_start[top] = start
        stack_end[top] = i
        stack_depth[top] = depth + 1
    return n_nodes


@njit(cache=True, nogil=True)
def _predict_tree(x, feat, thr, left, value, off, out, scale):
    for i in range(x.shape[0]):
        node = 0
        while feat[off + node] >= 0:
            if x[i, feat[off + node]] <= thr[off + node]:
                node = left[off + node]
            else:
                node = left[off + node] + 1
        out[i] += scale * value[off + node]


@njit(cache=True, nogil=True)
def predict_ensemble(x, feat, thr, left, value, offsets, scale, init):
    out = np.full(x.shape[0], init)
    for t in range(offsets.shape[0] - 1):
        _predict_tree(x, feat, thr, left, value, offsets[t], out, scale)
    return out


@njit(cache=True, nogil=True)
def forest_fit(codes, y, edges, n_edges, n_trees, mtry, min_split, seed):
    """Bagged trees on bootstrap resamples of size n; leaves hold means."""
    np.random.seed(seed)
    n = codes.shape[0]
    cap = 2 * n + 1
    weight = np.ones(n)
    leaf_of = np.empty(n, dtype=np.int64)
    cnt = np.zeros(edges.shape[1] + 1, dtype=np.int64)
    sm = np.zeros(edges.shape[1] + 1)
    t_feat = np.empty(cap, dtype=np.int32)
    t_thr = np.empty(cap)
    t_left = np.empty(cap, dtype=np.int32)
    t_val = np.empty(cap)
    offsets = np.zeros(n_trees + 1, dtype=np.int64)
    size = cap * 4
    feat = np.empty(size, dtype=np.int32)
    thr = np.empty(size)
    left = np.empty(size, dtype=np.int32)
    value = np.empty(size)
    for t in range(n_trees):
        idx = np.empty(n, dtype=np.int64)
        for i in range(n):
            idx[i] = np.random.randint(n)
        k = _build(codes, y, weight, idx, edges, n_edges, -1, min_split, 1, mtry,
                   t_feat, t_thr, t_left, t_val, leaf_of, cnt, sm)
        o = offsets[t]
        if o + k > feat.shape[0]:
            grow = max(feat.shape[0] * 2, o + k)
            feat2 = np.empty(grow, dtype=np.int32)
            thr2 = np.empty(grow)
            left2 = np.empty(grow, dtype=np.int32)
            value2 = np.empty(grow)
            feat2[:o] = feat[:o]
            thr2[:o] = thr[:o]
            left2[:o] = left[:o]
            value2[:o] = value[:o]
            feat, thr, left, value = feat2, thr2, left2, value2
        feat[o:o + k] = t_feat[:k]
        thr[o:o + k] = t_thr[:k]
        left[o:o + k] = t_left[:k]
        value[o:o + k] = t_val[:k]
        offsets[t + 1] = o + k
    m = offsets[n_trees]
    return feat[:m].copy(), thr[:m].copy(), left[:m].copy(), value[:m].copy(), offsets


@njit(cache=True, nogil=True)
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def _val_loss(pred, yv, loss):
    s = 0.0
    for i in range(yv.shape[0]):
        if loss == 0:
            r = yv[i] - pred[i]
            s += r * r
        else:
            p = _sigmoid(pred[i])
            p = min(max(p, 1e-15), 1.0 - 1e-15)
            s -= yv[i] * np.log(p) + (1.0 - yv[i]) * np.log(1.0 - p)
    return s


@njit(cache=True, nogil=True)
def gbt_fit(codes, y, edges, n_edges, n_trees, max_depth, shrinkage, min_leaf, loss,
            x_val, y_val, checkpoints):
    """Stage-wise boosting of depth-limited trees.

    Squared loss uses mean leaves; logistic loss uses one Newton step per
    leaf. Returns the flat trees (values already scaled by ``shrinkage``),
    the initial score, and the summed validation loss after
    ``checkpoints[c]`` trees (empty validation set -> zeros).
    """
    n, d = codes.shape
    cap = 2 ** (max_depth + 1) + 1
    ybar = 0.0
    for i in range(n):
        ybar += y[i]
    ybar /= n
    if loss == 0:
        init = ybar
    else:
        q = min(max(ybar, 1e-6), 1.0 - 1e-6)
        init = np.log(q / (1.0 - q))
    score = np.full(n, init)
    val_score = np.full(x_val.shape[0], init)
    resp = np.empty(n)
    hess = np.ones(n)
    leaf_of = np.empty(n, dtype=np.int64)
    cnt = np.zeros(edges.shape[1] + 1, dtype=np.int64)
    sm = np.zeros(edges.shape[1] + 1)
    idx = np.empty(n, dtype=np.int64)
    feat = np.empty(n_trees * cap, dtype=np.int32)
    thr = np.empty(n_trees * cap)
    left = np.empty(n_trees * cap, dtype=np.int32)
    value = np.empty(n_trees * cap)
    offsets = np.zeros(n_trees + 1, dtype=np.int64)
    t_feat = np.empty(cap, dtype=np.int32)
    t_thr = np.empty(cap)
    t_left = np.empty(cap, dtype=np.int32)
    t_val = np.empty(cap)
    losses = np.zeros(checkpoints.shape[0])
    ci = 0
    for t in range(n_trees):
        for i in range(n):
            idx[i] = i
            if loss == 0:
                resp[i] = y[i] - score[i]
            else:
                p = _sigmoid(score[i])
                resp[i] = y[i] - p
                hess[i] = max(p * (1.0 - p), 1e-12)
        k = _build(codes, resp, hess, idx, edges, n_edges, max_depth, 1, min_leaf, d,
                   t_feat, t_thr, t_left, t_val, leaf_of, cnt, sm)
        o = offsets[t]
        for j in range(k):
            feat[o + j] = t_feat[j]
            thr[o + j] = t_thr[j]
            left[o + j] = t_left[j]
            value[o + j] = shrinkage * t_val[j]
        offsets[t + 1] = o + k
        for i in range(n):
            score[i] += value[o + leaf_of[i]]
        if x_val.shape[0] > 0:
            _predict_tree(x_val, feat, thr, left, value, o, val_score, 1.0)
        while ci < checkpoints.shape[0] and checkpoints[ci] == t + 1:
            losses[ci] = _val_loss(val_score, y_val, loss)
            ci += 1
    m = offsets[n_trees]
    return feat[:m].copy(), thr[:m].copy(), left[:m].copy(), value[:m].copy(), offsets, init, losses
