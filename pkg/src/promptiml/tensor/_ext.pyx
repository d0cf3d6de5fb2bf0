# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; drop-in replacements for ``_fallback``."""

import numpy as np
from libc.math cimport floor

ctypedef fused real:
    float
    double


def bilinear_gather(real[:, :, :, ::1] value, real[:, :, ::1] points):
    cdef Py_ssize_t N = value.shape[0], H = value.shape[1], W = value.shape[2], C = value.shape[3]
    cdef Py_ssize_t P = points.shape[1]
    dt = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, P, C), dtype=dt)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t n, p, c, x0, y0, xi, yi, dx, dy
    cdef real x, y, fx, fy, w
    with nogil:
        for n in range(N):
            for p in range(P):
                x = points[n, p, 0]
                y = points[n, p, 1]
                x0 = <Py_ssize_t>floor(x)
                y0 = <Py_ssize_t>floor(y)
                fx = x - x0
                fy = y - y0
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= H:
                        continue
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= W:
                            continue
                        w = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
                        for c in range(C):
                            out[n, p, c] += w * value[n, yi, xi, c]
    return out_arr


def bilinear_scatter(real[:, :, ::1] grad, real[:, :, :, ::1] value, real[:, :, ::1] points):
    cdef Py_ssize_t N = value.shape[0], H = value.shape[1], W = value.shape[2], C = value.shape[3]
    cdef Py_ssize_t P = points.shape[1]
    dt = np.float32 if real is float else np.float64
    gv_arr = np.zeros((N, H, W, C), dtype=dt)
    gp_arr = np.zeros((N, P, 2), dtype=dt)
    cdef real[:, :, :, ::1] gv = gv_arr
    cdef real[:, :, ::1] gp = gp_arr
    cdef Py_ssize_t n, p, c, x0, y0, xi, yi, dx, dy
    cdef real x, y, fx, fy, w, wxd, wyd, dot, g
    with nogil:
        for n in range(N):
            for p in range(P):
                x = points[n, p, 0]
                y = points[n, p, 1]
                x0 = <Py_ssize_t>floor(x)
                y0 = <Py_ssize_t>floor(y)
                fx = x - x0
                fy = y - y0
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= H:
                        continue
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= W:
                            continue
                        wxd = fx if dx else 1 - fx
                        wyd = fy if dy else 1 - fy
                        w = wxd * wyd
                        dot = 0
                        for c in range(C):
                            g = grad[n, p, c]
                            gv[n, yi, xi, c] += w * g
                            dot = dot + g * value[n, yi, xi, c]
                        gp[n, p, 0] += (2 * dx - 1) * wyd * dot
                        gp[n, p, 1] += (2 * dy - 1) * wxd * dot
    return gv_arr, gp_arr


def col2im(real[:, :, :, :, :, ::1] dcols, Py_ssize_t H, Py_ssize_t W, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t N = dcols.shape[0], Ho = dcols.shape[1], Wo = dcols.shape[2]
    cdef Py_ssize_t C = dcols.shape[3], k = dcols.shape[4]
    dt = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, C, H, W), dtype=dt)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oy, ox, c, i, j, iy, ix
    with nogil:
        for n in range(N):
            for oy in range(Ho):
                for ox in range(Wo):
                    for c in range(C):
                        for i in range(k):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                continue
                            for j in range(k):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= W:
                                    continue
                                out[n, c, iy, ix] += dcols[n, oy, ox, c, i, j]
    return out_arr
