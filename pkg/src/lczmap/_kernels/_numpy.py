"""Pure-numpy kernel implementations (reference path)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xpad, k, out_h, out_w):
    """Unfold ``k x k`` windows of a padded (N, C, H+k-1, W+k-1) array.

    Returns a (N*out_h*out_w, C*k*k) matrix; row order is (n, y, x) and
    column order is (c, i, j), matching ``weight.reshape(out_ch, -1)``.
    """
    n, c = xpad.shape[:2]
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))[:, :, :out_h, :out_w]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * out_h * out_w, c * k * k
    )


def maxpool2_forward(x):
    """2x2 / stride-2 max pooling.

    Returns the pooled array and the within-window argmax (0..3, row-major),
    with ties resolved to the first maximal element.
    """
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(grad_out, arg):
    n, c, hh, ww = grad_out.shape
    onehot = arg[..., None] == np.arange(4, dtype=np.uint8)
    g = np.where(onehot, grad_out[..., None], 0).astype(grad_out.dtype, copy=False)
    g = g.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g).reshape(n, c, hh * 2, ww * 2)


def split_scan(xs, ys, n_classes, min_leaf):
    """Best Gini split of one pre-sorted feature column.

    ``xs`` must be sorted ascending and ``ys`` permuted alongside it. The
    score maximised is ``sum(cL^2)/nL + sum(cR^2)/nR`` which is equivalent to
    minimising the weighted child impurity. Returns ``(pos, score)`` where the
    split puts ``xs[:pos + 1]`` on the left, or ``(-1, -inf)`` if no position
    is admissible. Ties go to the lowest position.
    """
    n = xs.shape[0]
    if n < 2:
        return -1, -np.inf
    onehot = np.zeros((n, n_classes), dtype=np.int64)
    onehot[np.arange(n), ys] = 1
    left = np.cumsum(onehot, axis=0)[:-1]
    right = left[-1] + onehot[-1] - left
    n_left = np.arange(1, n, dtype=np.int64)
    n_right = n - n_left
    sq_left = (left * left).sum(axis=1)
    sq_right = (right * right).sum(axis=1)
    score = sq_left / n_left + sq_right / n_right
    ok = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not ok.any():
        return -1, -np.inf
    score = np.where(ok, score, -np.inf)
    pos = int(np.argmax(score))
    return pos, float(score[pos])


def apply_tree(feature, threshold, left, right, X):
    """Leaf index reached by every row of ``X`` (``x <= threshold`` goes left)."""
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    active = feature[node] >= 0
    while active.any():
        idx = rows[active]
        cur = node[idx]
        go_left = X[idx, feature[cur]] <= threshold[cur]
        node[idx] = np.where(go_left, left[cur], right[cur])
        active = feature[node] >= 0
    return node
