# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the bilinear-sampling and assignment kernels.

Signatures and semantics mirror ``_fallback``; the test suite runs both
against each other.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY, isnan

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _setup(real x, real y, Py_ssize_t h, Py_ssize_t w,
                        Py_ssize_t* idx, real* wt, real* dwx, real* dwy) noexcept nogil:
    cdef real x0 = floor(x)
    cdef real y0 = floor(y)
    cdef real fx = x - x0
    cdef real fy = y - y0
    cdef Py_ssize_t xi0 = <Py_ssize_t>x0
    cdef Py_ssize_t yi0 = <Py_ssize_t>y0
    cdef Py_ssize_t k, xi, yi
    cdef real wts[4]
    cdef real ddx[4]
    cdef real ddy[4]
    wts[0] = (1 - fx) * (1 - fy); ddx[0] = -(1 - fy); ddy[0] = -(1 - fx)
    wts[1] = fx * (1 - fy);       ddx[1] = 1 - fy;    ddy[1] = -fx
    wts[2] = (1 - fx) * fy;       ddx[2] = -fy;       ddy[2] = 1 - fx
    wts[3] = fx * fy;             ddx[3] = fy;        ddy[3] = fx
    for k in range(4):
        xi = xi0 + (k & 1)
        yi = yi0 + (k >> 1)
        if xi >= 0 and xi < w and yi >= 0 and yi < h:
            idx[k] = yi * w + xi
            wt[k] = wts[k]
            dwx[k] = ddx[k]
            dwy[k] = ddy[k]
        else:
            idx[k] = -1
            wt[k] = 0
            dwx[k] = 0
            dwy[k] = 0


def bilinear_forward(real[:, :, :, ::1] feat, real[:, :, ::1] loc):
    cdef Py_ssize_t b = feat.shape[0], c = feat.shape[1]
    cdef Py_ssize_t h = feat.shape[2], w = feat.shape[3]
    cdef Py_ssize_t p = loc.shape[1]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((b, c, p), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef real[:, :, ::1] flat = np.asarray(feat).reshape(b, c, h * w)
    cdef Py_ssize_t bi, pi, ci, k
    cdef Py_ssize_t idx[4]
    cdef real wt[4]
    cdef real dwx[4]
    cdef real dwy[4]
    cdef real acc
    with nogil:
        for bi in range(b):
            for pi in range(p):
                _setup(loc[bi, pi, 0], loc[bi, pi, 1], h, w, idx, wt, dwx, dwy)
                for ci in range(c):
                    acc = 0
                    for k in range(4):
                        if idx[k] >= 0:
                            acc = acc + wt[k] * flat[bi, ci, idx[k]]
                    out[bi, ci, pi] = acc
    return out_arr


def bilinear_backward(real[:, :, ::1] grad, real[:, :, :, ::1] feat,
                      real[:, :, ::1] loc):
    cdef Py_ssize_t b = feat.shape[0], c = feat.shape[1]
    cdef Py_ssize_t h = feat.shape[2], w = feat.shape[3]
    cdef Py_ssize_t p = loc.shape[1]
    dtype = np.float32 if real is float else np.float64
    gfeat_arr = np.zeros((b, c, h * w), dtype=dtype)
    gloc_arr = np.zeros((b, p, 2), dtype=dtype)
    cdef real[:, :, ::1] gfeat = gfeat_arr
    cdef real[:, :, ::1] gloc = gloc_arr
    cdef real[:, :, ::1] flat = np.asarray(feat).reshape(b, c, h * w)
    cdef Py_ssize_t bi, pi, ci, k
    cdef Py_ssize_t idx[4]
    cdef real wt[4]
    cdef real dwx[4]
    cdef real dwy[4]
    cdef real g, v, sx, sy
    with nogil:
        for bi in range(b):
            for pi in range(p):
                _setup(loc[bi, pi, 0], loc[bi, pi, 1], h, w, idx, wt, dwx, dwy)
                sx = 0
                sy = 0
                for ci in range(c):
                    g = grad[bi, ci, pi]
                    for k in range(4):
                        if idx[k] >= 0:
                            v = flat[bi, ci, idx[k]]
                            gfeat[bi, ci, idx[k]] += wt[k] * g
                            sx = sx + g * v * dwx[k]
                            sy = sy + g * v * dwy[k]
                gloc[bi, pi, 0] = sx
                gloc[bi, pi, 1] = sy
    return gfeat_arr.reshape(b, c, h, w), gloc_arr


def linear_sum_assignment(cost_in):
    cost_arr = np.asarray(cost_in, dtype=np.float64)
    if cost_arr.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost_arr.shape}")
    if cost_arr.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if np.isnan(cost_arr).any() or np.isneginf(cost_arr).any():
        raise ValueError("cost matrix contains NaN or -inf")
    transposed = cost_arr.shape[0] > cost_arr.shape[1]
    if transposed:
        cost_arr = cost_arr.T
    cost_arr = np.ascontiguousarray(cost_arr)
    cdef double[:, ::1] cost = cost_arr
    cdef Py_ssize_t nr = cost.shape[0], nc = cost.shape[1]
    u_arr = np.zeros(nr)
    v_arr = np.zeros(nc)
    shortest_arr = np.empty(nc)
    col4row_arr = np.full(nr, -1, dtype=np.int64)
    row4col_arr = np.full(nc, -1, dtype=np.int64)
    path_arr = np.empty(nc, dtype=np.int64)
    remaining_arr = np.empty(nc, dtype=np.int64)
    sr_arr = np.empty(nr, dtype=np.uint8)
    sc_arr = np.empty(nc, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, shortest = shortest_arr
    cdef cnp.int64_t[::1] col4row = col4row_arr, row4col = row4col_arr
    cdef cnp.int64_t[::1] path = path_arr, remaining = remaining_arr
    cdef unsigned char[::1] sr = sr_arr, sc = sc_arr
    cdef Py_ssize_t cur, i, j, it, index, n_rem, sink, tmp
    cdef double min_val, lowest, r
    cdef bint infeasible = False

    with nogil:
        for cur in range(nr):
            for j in range(nc):
                shortest[j] = INFINITY
                path[j] = -1
                sc[j] = 0
                remaining[j] = nc - j - 1
            for i in range(nr):
                sr[i] = 0
            n_rem = nc
            min_val = 0
            i = cur
            sink = -1
            while sink < 0:
                sr[i] = 1
                index = -1
                lowest = INFINITY
                for it in range(n_rem):
                    j = remaining[it]
                    r = min_val + cost[i, j] - u[i] - v[j]
                    if r < shortest[j]:
                        path[j] = i
                        shortest[j] = r
                    if shortest[j] < lowest or (shortest[j] == lowest and row4col[j] < 0):
                        lowest = shortest[j]
                        index = it
                min_val = lowest
                if min_val == INFINITY:
                    infeasible = True
                    break
                j = remaining[index]
                if row4col[j] < 0:
                    sink = j
                else:
                    i = row4col[j]
                sc[j] = 1
                n_rem -= 1
                remaining[index] = remaining[n_rem]
            if infeasible:
                break

            u[cur] += min_val
            for i in range(nr):
                if sr[i] and i != cur:
                    u[i] += min_val - shortest[col4row[i]]
            for j in range(nc):
                if sc[j]:
                    v[j] -= min_val - shortest[j]

            j = sink
            while True:
                i = path[j]
                row4col[j] = i
                tmp = col4row[i]
                col4row[i] = j
                j = tmp
                if i == cur:
                    break

    if infeasible:
        raise ValueError("cost matrix is infeasible")
    if transposed:
        order = np.argsort(col4row_arr)
        return col4row_arr[order], order.astype(np.int64)
    return np.arange(nr, dtype=np.int64), col4row_arr
