"""Compiled inner loops (numba, nogil so callers may fan out over threads)."""
import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _mix64(z):
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def grow_tree(X, y, weight, n_classes, col_hash, tree_seed, max_depth, max_features,
              min_decrease, presorted):
    """Grow one CART classification tree on the rows with positive weight.

    Candidate features at a node are the ``max_features`` columns with the
    smallest keys ``mix(tree_seed, node_position, column_hash)``; keys depend
    on column content rather than column order, so permuting the columns of
    ``X`` permutes the grown tree's features and nothing else.

    ``presorted[f]`` lists all row indices ordered by ``X[:, f]``; large
    nodes walk that order instead of sorting their own rows.

    Returns (feature, threshold, left, right, value, importance_sum).
    ``feature[node] == -1`` marks a leaf; ``value`` holds weighted class counts.
    """
    n, p = X.shape
    max_nodes = 2 ** (max_depth + 1) - 1
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros((max_nodes, n_classes))
    importance = np.zeros(p)

    rows = np.flatnonzero(weight > 0)
    n_rows = rows.shape[0]
    total_w = 0.0
    for r in rows:
        total_w += weight[r]

    # stack of (node id, heap position, start, end, depth)
    stack = np.zeros((max_nodes, 5), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = 0
    stack[0, 3] = n_rows
    stack[0, 4] = 0
    top = 1
    next_id = 1

    keys = np.empty(p, dtype=np.uint64)
    counts = np.zeros(n_classes)
    left_counts = np.zeros(n_classes)
    vals = np.empty(n_rows)
    buf = np.empty(n_rows, dtype=np.int64)
    node_of = np.full(n, -1, dtype=np.int64)
    for r in rows:
        node_of[r] = 0
    seed = np.uint64(tree_seed)

    while top > 0:
        top -= 1
        node = stack[top, 0]
        pos_i = stack[top, 1]
        pos = np.uint64(pos_i)
        start = stack[top, 2]
        end = stack[top, 3]
        depth = stack[top, 4]

        counts[:] = 0.0
        for t in range(start, end):
            r = rows[t]
            counts[y[r]] += weight[r]
        node_w = 0.0
        for c in range(n_classes):
            value[node, c] = counts[c]
            node_w += counts[c]
        gini = 1.0
        n_nonzero = 0
        for c in range(n_classes):
            q = counts[c] / node_w
            gini -= q * q
            if counts[c] > 0:
                n_nonzero += 1
        if depth >= max_depth or n_nonzero <= 1 or end - start < 2:
            continue

        h = _mix64(seed ^ _mix64(pos + np.uint64(0x9E3779B97F4A7C15)))
        for f in range(p):
            keys[f] = _mix64(h ^ col_hash[f])
        order = np.argsort(keys, kind="mergesort")

        best_dec = min_decrease
        best_f = -1
        best_thr = 0.0
        seg = rows[start:end]
        m = end - start
        for fi in range(min(max_features, p)):
            f = order[fi]
            if 16 * m >= n:
                c_ = 0
                for t in range(n):
                    r = presorted[f, t]
                    if node_of[r] == node:
                        buf[c_] = r
                        c_ += 1
            else:
                for t in range(m):
                    vals[t] = X[seg[t], f]
                srt = np.argsort(vals[:m])
                for t in range(m):
                    buf[t] = seg[srt[t]]
            left_counts[:] = 0.0
            wl = 0.0
            for t in range(m - 1):
                r = buf[t]
                left_counts[y[r]] += weight[r]
                wl += weight[r]
                a = X[r, f]
                b = X[buf[t + 1], f]
                if b <= a:
                    continue
                wr = node_w - wl
                gl = 1.0
                gr = 1.0
                for c in range(n_classes):
                    ql = left_counts[c] / wl
                    qr = (counts[c] - left_counts[c]) / wr
                    gl -= ql * ql
                    gr -= qr * qr
                dec = (node_w * gini - wl * gl - wr * gr) / total_w
                if dec > best_dec:
                    best_dec = dec
                    best_f = f
                    best_thr = a + (b - a) / 2.0
                    if best_thr >= b:
                        best_thr = a
        if best_f < 0:
            continue

        # partition rows[start:end] in place
        i = start
        j = end - 1
        while i <= j:
            if X[rows[i], best_f] <= best_thr:
                i += 1
            else:
                tmp = rows[i]
                rows[i] = rows[j]
                rows[j] = tmp
                j -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        importance[best_f] += best_dec
        lid = next_id
        rid = next_id + 1
        next_id += 2
        for t in range(start, i):
            node_of[rows[t]] = lid
        for t in range(i, end):
            node_of[rows[t]] = rid
        left[node] = lid
        right[node] = rid
        stack[top, 0] = lid
        stack[top, 1] = 2 * pos_i + 1
        stack[top, 2] = start
        stack[top, 3] = i
        stack[top, 4] = depth + 1
        top += 1
        stack[top, 0] = rid
        stack[top, 1] = 2 * pos_i + 2
        stack[top, 2] = i
        stack[top, 3] = end
        stack[top, 4] = depth + 1
        top += 1

    return feature[:next_id], threshold[:next_id], left[:next_id], right[:next_id], \
        value[:next_id], importance


@njit(cache=True, nogil=True)
def tree_predict_proba(X, feature, threshold, left, right, value, out):
    """Add the leaf class distribution of each row of X into ``out``."""
    n = X.shape[0]
    n_classes = value.shape[1]
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        tot = 0.0
        for c in range(n_classes):
            tot += value[node, c]
        for c in range(n_classes):
            out[i, c] += value[node, c] / tot


@njit(cache=True, nogil=True)
def enet_cd_subproblem(H, g, theta, penalized, l1, l2, z, max_sweeps, tol):
    """Coordinate descent on the proximal-Newton model.

    Minimises  g.(z-theta) + 0.5 (z-theta)' H (z-theta)
               + sum_{penalized r} l1*|z_r| + 0.5*l2*z_r^2
    starting from ``z`` (modified in place). Returns the number of sweeps.
    """
    q = z.shape[0]
    # Hd = H @ (z - theta), maintained incrementally
    d = z - theta
    Hd = H @ d
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        max_change = 0.0
        for r in range(q):
            hrr = H[r, r]
            grad_r = g[r] + Hd[r] - hrr * d[r]   # linear coefficient excluding own term
            # minimise 0.5*hrr*(zr-th)^2 + grad_r*(zr-th) + pen(zr)
            if penalized[r]:
                a = hrr + l2
                u = hrr * theta[r] - grad_r
                if u > l1:
                    new = (u - l1) / a
                elif u < -l1:
                    new = (u + l1) / a
                else:
                    new = 0.0
            else:
                if hrr <= 0.0:
                    continue
                new = theta[r] - grad_r / hrr
            delta = new - z[r]
            if delta != 0.0:
                z[r] = new
                d[r] += delta
                for s in range(q):
                    Hd[s] += H[s, r] * delta
                ad = abs(delta)
                if ad > max_change:
                    max_change = ad
        if max_change <= tol:
            break
    return sweeps
