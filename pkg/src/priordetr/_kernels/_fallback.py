"""Pure numpy/Python reference versions of the compiled kernels."""
from __future__ import annotations

import math

import numpy as np


def _corners(loc: np.ndarray, h: int, w: int):
    """Flat indices, validity masks and fractional parts for the 4 corners."""
    x = loc[..., 0]
    y = loc[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    idx = []
    valid = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx.append(np.where(ok, yi * w + xi, 0))
            valid.append(ok)
    return idx, valid, fx, fy


def bilinear_forward(feat: np.ndarray, loc: np.ndarray) -> np.ndarray:
    """feat (B, C, H, W), loc (B, P, 2) as (x, y) -> (B, C, P)."""
    b, c, h, w = feat.shape
    flat = feat.reshape(b, c, h * w)
    idx, valid, fx, fy = _corners(loc, h, w)
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    out = np.zeros((b, c, loc.shape[1]), dtype=feat.dtype)
    for ix, ok, wt in zip(idx, valid, weights):
        vals = np.take_along_axis(flat, ix[:, None, :], axis=2)
        out += vals * (wt * ok)[:, None, :]
    return out


def bilinear_backward(grad: np.ndarray, feat: np.ndarray, loc: np.ndarray):
    """Gradients of ``bilinear_forward`` w.r.t. feat and loc."""
    b, c, h, w = feat.shape
    p = loc.shape[1]
    flat = feat.reshape(b, c, h * w)
    idx, valid, fx, fy = _corners(loc, h, w)
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    dwdx = (-(1 - fy), 1 - fy, -fy, fy)
    dwdy = (-(1 - fx), -fx, 1 - fx, fx)
    base = (np.arange(b * c) * (h * w)).reshape(b, c, 1)
    gfeat = np.zeros(b * c * h * w, dtype=feat.dtype)
    gx = np.zeros((b, p), dtype=feat.dtype)
    gy = np.zeros((b, p), dtype=feat.dtype)
    for ix, ok, wt, ddx, ddy in zip(idx, valid, weights, dwdx, dwdy):
        okf = ok.astype(feat.dtype)
        contrib = grad * (wt * okf)[:, None, :]
        lin = (base + ix[:, None, :]).ravel()
        gfeat += np.bincount(lin, weights=contrib.ravel(), minlength=gfeat.size)
        vals = np.take_along_axis(flat, ix[:, None, :], axis=2)
        gv = (grad * vals).sum(axis=1) * okf
        gx += gv * ddx
        gy += gv * ddy
    gloc = np.stack([gx, gy], axis=-1)
    return gfeat.reshape(feat.shape), gloc


def linear_sum_assignment(cost: np.ndarray):
    """Minimum-cost assignment by shortest augmenting paths.

    Works on rectangular matrices; every row of the smaller side is matched.
    Returns ``(rows, cols)`` with rows sorted ascending.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if cost.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if np.isnan(cost).any() or np.isneginf(cost).any():
        raise ValueError("cost matrix contains NaN or -inf")
    transposed = cost.shape[0] > cost.shape[1]
    if transposed:
        cost = cost.T
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)

    for cur in range(nr):
        shortest = np.full(nc, np.inf)
        path = np.full(nc, -1, dtype=np.int64)
        seen_rows = np.zeros(nr, dtype=bool)
        seen_cols = np.zeros(nc, dtype=bool)
        min_val = 0.0
        i = cur
        sink = -1
        while sink < 0:
            seen_rows[i] = True
            free = ~seen_cols
            reduced = min_val + cost[i] - u[i] - v
            better = free & (reduced < shortest)
            shortest[better] = reduced[better]
            path[better] = i
            cand = np.where(free, shortest, np.inf)
            lowest = cand.min()
            if not math.isfinite(lowest):
                raise ValueError("cost matrix is infeasible")
            ties = np.flatnonzero(cand == lowest)
            unassigned = ties[row4col[ties] < 0]
            j = int(unassigned[0]) if unassigned.size else int(ties[0])
            min_val = lowest
            seen_cols[j] = True
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])

        u[cur] += min_val
        others = seen_rows.copy()
        others[cur] = False
        rows = np.flatnonzero(others)
        u[rows] += min_val - shortest[col4row[rows]]
        v[seen_cols] -= min_val - shortest[seen_cols]

        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break

    if transposed:
        order = np.argsort(col4row)
        return col4row[order], order.astype(np.int64)
    return np.arange(nr, dtype=np.int64), col4row
