# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the hot inner loops.

Loop nesting mirrors the numpy backend so both produce bit-identical
results (see _numpy.py).
"""

import numpy as np

cimport cython
from libc.math cimport floor

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int sh, int sw,
           int ph, int pw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n, c * kh * kw, oh * ow), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, ky, kx, oy, ox, sy, row, base, lo, hi
    with nogil:
        for i in range(n):
            for j in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (j * kh + ky) * kw + kx
                        lo = 0
                        if pw > kx:
                            lo = (pw - kx + sw - 1) // sw
                        hi = (w - 1 - kx + pw) // sw + 1
                        if hi > ow:
                            hi = ow
                        for oy in range(oh):
                            sy = oy * sh + ky - ph
                            if sy < 0 or sy >= h:
                                continue
                            base = kx - pw
                            for ox in range(lo, hi):
                                out[i, row, oy * ow + ox] = \
                                    x[i, j, sy, ox * sw + base]
    return out_arr


def col2im(floating[:, :, ::1] cols, int n, int c, int h, int w,
           int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    x_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t i, j, ky, kx, oy, ox, sy, row, base, lo, hi
    with nogil:
        for ky in range(kh):
            for kx in range(kw):
                lo = 0
                if pw > kx:
                    lo = (pw - kx + sw - 1) // sw
                hi = (w - 1 - kx + pw) // sw + 1
                if hi > ow:
                    hi = ow
                base = kx - pw
                for i in range(n):
                    for j in range(c):
                        row = (j * kh + ky) * kw + kx
                        for oy in range(oh):
                            sy = oy * sh + ky - ph
                            if sy < 0 or sy >= h:
                                continue
                            for ox in range(lo, hi):
                                x[i, j, sy, ox * sw + base] += \
                                    cols[i, row, oy * ow + ox]
    return x_arr


def maxpool_forward(floating[:, :, :, ::1] x, int wh, int ww, int sh, int sw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - wh) // sh + 1
    cdef Py_ssize_t ow = (w - ww) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y_arr = np.empty((n, c, oh, ow), dtype=dtype)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef long long[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t i, j, oy, ox, wy, wx, sy, sx
    cdef floating best, v
    cdef long long bi
    with nogil:
        for i in range(n):
            for j in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        best = x[i, j, oy * sh, ox * sw]
                        bi = (oy * sh) * w + ox * sw
                        for wy in range(wh):
                            sy = oy * sh + wy
                            for wx in range(ww):
                                sx = ox * sw + wx
                                v = x[i, j, sy, sx]
                                if v > best:
                                    best = v
                                    bi = sy * w + sx
                        y[i, j, oy, ox] = best
                        idx[i, j, oy, ox] = bi
    return y_arr, idx_arr


def maxpool_backward(floating[:, :, :, ::1] dy, long long[:, :, :, ::1] idx,
                     int h, int w):
    cdef Py_ssize_t n = dy.shape[0], c = dy.shape[1]
    cdef Py_ssize_t oh = dy.shape[2], ow = dy.shape[3]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.zeros((n, c, h * w), dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t i, j, oy, ox
    with nogil:
        for i in range(n):
            for j in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        dx[i, j, idx[i, j, oy, ox]] += dy[i, j, oy, ox]
    return dx_arr.reshape(n, c, h, w)


def bilinear_sample(floating[:, ::1] img, double[::1] xs, double[::1] ys):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], m = xs.shape[0]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty(m, dtype=dtype)
    cdef floating[::1] out = out_arr
    cdef Py_ssize_t i, x0, y0, x1, y1
    cdef double xc, yc, fx, fy, top, bot
    with nogil:
        for i in range(m):
            xc = xs[i]
            if xc < 0.0:
                xc = 0.0
            elif xc > w - 1.0:
                xc = w - 1.0
            yc = ys[i]
            if yc < 0.0:
                yc = 0.0
            elif yc > h - 1.0:
                yc = h - 1.0
            x0 = <Py_ssize_t>floor(xc)
            y0 = <Py_ssize_t>floor(yc)
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            fx = xc - x0
            fy = yc - y0
            top = (<double>img[y0, x0]) * (1.0 - fx) + (<double>img[y0, x1]) * fx
            bot = (<double>img[y1, x0]) * (1.0 - fx) + (<double>img[y1, x1]) * fx
            out[i] = <floating>(top * (1.0 - fy) + bot * fy)
    return out_arr


def slic_assign(double[:, ::1] image, double[:, ::1] centers, int half_width,
                double spatial_scale):
    cdef Py_ssize_t h = image.shape[0], w = image.shape[1]
    cdef Py_ssize_t nk = centers.shape[0]
    labels_arr = np.full((h, w), -1, dtype=np.int32)
    dist_arr = np.full((h, w), np.inf, dtype=np.float64)
    cdef int[:, ::1] labels = labels_arr
    cdef double[:, ::1] dist = dist_arr
    cdef double ss2 = spatial_scale * spatial_scale
    cdef Py_ssize_t k, y, x, y0, y1, x0, x1
    cdef double cy, cx, ci, dc, dyy, dxx, d2
    with nogil:
        for k in range(nk):
            cy = centers[k, 0]
            cx = centers[k, 1]
            ci = centers[k, 2]
            y0 = <Py_ssize_t>floor(cy) - half_width
            if y0 < 0:
                y0 = 0
            y1 = <Py_ssize_t>floor(cy) + half_width + 1
            if y1 > h:
                y1 = h
            x0 = <Py_ssize_t>floor(cx) - half_width
            if x0 < 0:
                x0 = 0
            x1 = <Py_ssize_t>floor(cx) + half_width + 1
            if x1 > w:
                x1 = w
            for y in range(y0, y1):
                dyy = y - cy
                for x in range(x0, x1):
                    dc = image[y, x] - ci
                    dxx = x - cx
                    d2 = dc * dc + (dyy * dyy + dxx * dxx) * ss2
                    if d2 < dist[y, x]:
                        dist[y, x] = d2
                        labels[y, x] = k
    return labels_arr, dist_arr
