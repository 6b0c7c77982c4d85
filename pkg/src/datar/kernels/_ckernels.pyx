# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for grouped 2-D cross-correlation and bilinear sampling.

Every function mirrors the signature of its counterpart in ``_pykernels``.
Inputs must be C-contiguous float64 arrays.
"""
import numpy as np

from libc.math cimport floor


cdef inline Py_ssize_t _out_size(Py_ssize_t n, Py_ssize_t k, int stride, int padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d_forward(const double[:, :, ::1] x, const double[:, :, :, ::1] w,
                   int stride, int padding, int groups):
    cdef Py_ssize_t H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t C_out = w.shape[0], cin_g = w.shape[1]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t cout_g = C_out // groups
    cdef Py_ssize_t Ho = _out_size(H, kh, stride, padding)
    cdef Py_ssize_t Wo = _out_size(W, kw, stride, padding)
    out = np.zeros((C_out, Ho, Wo), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t co, ci, c, ki, kj, i, j, y, xx
    cdef double wv
    for co in range(C_out):
        for ci in range(cin_g):
            c = (co // cout_g) * cin_g + ci
            for ki in range(kh):
                for kj in range(kw):
                    wv = w[co, ci, ki, kj]
                    for i in range(Ho):
                        y = i * stride + ki - padding
                        if y < 0 or y >= H:
                            continue
                        for j in range(Wo):
                            xx = j * stride + kj - padding
                            if xx < 0 or xx >= W:
                                continue
                            o[co, i, j] += wv * x[c, y, xx]
    return out


def conv2d_backward(const double[:, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, ::1] gout, int stride, int padding, int groups):
    cdef Py_ssize_t H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t C_out = w.shape[0], cin_g = w.shape[1]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t cout_g = C_out // groups
    cdef Py_ssize_t Ho = gout.shape[1], Wo = gout.shape[2]
    gx_arr = np.zeros((x.shape[0], H, W), dtype=np.float64)
    gw_arr = np.zeros((C_out, cin_g, kh, kw), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t co, ci, c, ki, kj, i, j, y, xx
    cdef double wv, acc, g
    for co in range(C_out):
        for ci in range(cin_g):
            c = (co // cout_g) * cin_g + ci
            for ki in range(kh):
                for kj in range(kw):
                    wv = w[co, ci, ki, kj]
                    acc = 0.0
                    for i in range(Ho):
                        y = i * stride + ki - padding
                        if y < 0 or y >= H:
                            continue
                        for j in range(Wo):
                            xx = j * stride + kj - padding
                            if xx < 0 or xx >= W:
                                continue
                            g = gout[co, i, j]
                            acc += g * x[c, y, xx]
                            gx[c, y, xx] += wv * g
                    gw[co, ci, ki, kj] = acc
    return gx_arr, gw_arr


cdef inline void _corners(double u, Py_ssize_t n, Py_ssize_t* i0, Py_ssize_t* i1, double* frac) nogil:
    cdef Py_ssize_t lo
    if n == 1:
        i0[0] = 0
        i1[0] = 0
        frac[0] = 0.0
        return
    lo = <Py_ssize_t>floor(u)
    if lo < 0:
        lo = 0
    elif lo > n - 2:
        lo = n - 2
    i0[0] = lo
    i1[0] = lo + 1
    frac[0] = u - lo


def bilinear_forward(const double[:, :, ::1] z, const double[::1] uy, const double[::1] ux):
    cdef Py_ssize_t C = z.shape[0], H = z.shape[1], W = z.shape[2]
    cdef Py_ssize_t N = uy.shape[0]
    out = np.empty((N, C), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t n, c, y0, y1, x0, x1
    cdef double wy, wx, a, b, cc, d
    for n in range(N):
        _corners(uy[n], H, &y0, &y1, &wy)
        _corners(ux[n], W, &x0, &x1, &wx)
        a = (1.0 - wy) * (1.0 - wx)
        b = (1.0 - wy) * wx
        cc = wy * (1.0 - wx)
        d = wy * wx
        for c in range(C):
            o[n, c] = (a * z[c, y0, x0] + b * z[c, y0, x1]
                       + cc * z[c, y1, x0] + d * z[c, y1, x1])
    return out


def bilinear_backward(const double[:, :, ::1] z, const double[::1] uy, const double[::1] ux,
                      const double[:, ::1] gout):
    cdef Py_ssize_t C = z.shape[0], H = z.shape[1], W = z.shape[2]
    cdef Py_ssize_t N = uy.shape[0]
    gz_arr = np.zeros((C, H, W), dtype=np.float64)
    guy_arr = np.zeros(N, dtype=np.float64)
    gux_arr = np.zeros(N, dtype=np.float64)
    cdef double[:, :, ::1] gz = gz_arr
    cdef double[::1] guy = guy_arr
    cdef double[::1] gux = gux_arr
    cdef Py_ssize_t n, c, y0, y1, x0, x1
    cdef double wy, wx, g, z00, z01, z10, z11, sy, sx
    for n in range(N):
        _corners(uy[n], H, &y0, &y1, &wy)
        _corners(ux[n], W, &x0, &x1, &wx)
        sy = 0.0
        sx = 0.0
        for c in range(C):
            g = gout[n, c]
            z00 = z[c, y0, x0]
            z01 = z[c, y0, x1]
            z10 = z[c, y1, x0]
            z11 = z[c, y1, x1]
            gz[c, y0, x0] += (1.0 - wy) * (1.0 - wx) * g
            gz[c, y0, x1] += (1.0 - wy) * wx * g
            gz[c, y1, x0] += wy * (1.0 - wx) * g
            gz[c, y1, x1] += wy * wx * g
            if H > 1:
                sy += g * ((1.0 - wx) * (z10 - z00) + wx * (z11 - z01))
            if W > 1:
                sx += g * ((1.0 - wy) * (z01 - z00) + wy * (z11 - z10))
        guy[n] = sy
        gux[n] = sx
    return gz_arr, guy_arr, gux_arr
