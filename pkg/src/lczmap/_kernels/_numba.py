"""numba implementations; must agree bit-for-bit with :mod:`._numpy`."""

import numpy as np
from numba import njit

_OPTS = dict(cache=True, nogil=True)


@njit(**_OPTS)
def im2col(xpad, k, out_h, out_w):
    n, c = xpad.shape[0], xpad.shape[1]
    cols = np.empty((n * out_h * out_w, c * k * k), dtype=xpad.dtype)
    for b in range(n):
        for y in range(out_h):
            for x in range(out_w):
                row = (b * out_h + y) * out_w + x
                col = 0
                for ch in range(c):
                    for i in range(k):
                        for j in range(k):
                            cols[row, col] = xpad[b, ch, y + i, x + j]
                            col += 1
    return cols


@njit(**_OPTS)
def maxpool2_forward(x):
    n, c, h, w = x.shape
    hh, ww = h // 2, w // 2
    out = np.empty((n, c, hh, ww), dtype=x.dtype)
    arg = np.empty((n, c, hh, ww), dtype=np.uint8)
    for b in range(n):
        for ch in range(c):
            for y in range(hh):
                for xx in range(ww):
                    best = x[b, ch, 2 * y, 2 * xx]
                    pos = 0
                    for q in range(1, 4):
                        v = x[b, ch, 2 * y + q // 2, 2 * xx + q % 2]
                        if v > best:
                            best = v
                            pos = q
                    out[b, ch, y, xx] = best
                    arg[b, ch, y, xx] = pos
    return out, arg


@njit(**_OPTS)
def maxpool2_backward(grad_out, arg):
    n, c, hh, ww = grad_out.shape
    g = np.zeros((n, c, 2 * hh, 2 * ww), dtype=grad_out.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(hh):
                for x in range(ww):
                    q = arg[b, ch, y, x]
                    g[b, ch, 2 * y + q // 2, 2 * x + q % 2] = grad_out[b, ch, y, x]
    return g


@njit(**_OPTS)
def split_scan(xs, ys, n_classes, min_leaf):
    n = xs.shape[0]
    if n < 2:
        return -1, -np.inf
    right = np.zeros(n_classes, dtype=np.int64)
    for i in range(n):
        right[ys[i]] += 1
    left = np.zeros(n_classes, dtype=np.int64)
    sq_left = 0
    sq_right = 0
    for q in range(n_classes):
        sq_right += right[q] * right[q]
    best_pos = -1
    best = -np.inf
    for i in range(n - 1):
        y = ys[i]
        sq_left += 2 * left[y] + 1
        sq_right -= 2 * right[y] - 1
        left[y] += 1
        right[y] -= 1
        n_left = i + 1
        n_right = n - n_left
        if n_left < min_leaf or n_right < min_leaf:
            continue
        if not xs[i] < xs[i + 1]:
            continue
        score = sq_left / n_left + sq_right / n_right
        if score > best:
            best = score
            best_pos = i
    return best_pos, best


@njit(**_OPTS)
def apply_tree(feature, threshold, left, right, X):
    m = X.shape[0]
    out = np.empty(m, dtype=np.int64)
    for r in range(m):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = node
    return out
