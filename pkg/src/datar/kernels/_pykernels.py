"""Numpy implementations of the hot kernels, used when the compiled module is unavailable."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride, padding):
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return xp, win[:, ::stride, ::stride]


def conv2d_forward(x, w, stride, padding, groups):
    C_out, cin_g, kh, kw = w.shape
    cout_g = C_out // groups
    _, win = _windows(x, kh, kw, stride, padding)
    outs = []
    for g in range(groups):
        xs = win[g * cin_g:(g + 1) * cin_g]
        ws = w[g * cout_g:(g + 1) * cout_g]
        outs.append(np.einsum("oikl,ihwkl->ohw", ws, xs, optimize=True))
    return np.ascontiguousarray(np.concatenate(outs, axis=0))


def conv2d_backward(x, w, gout, stride, padding, groups):
    C_out, cin_g, kh, kw = w.shape
    cout_g = C_out // groups
    Ho, Wo = gout.shape[1:]
    xp, win = _windows(x, kh, kw, stride, padding)
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for g in range(groups):
        xs = win[g * cin_g:(g + 1) * cin_g]
        go = gout[g * cout_g:(g + 1) * cout_g]
        ws = w[g * cout_g:(g + 1) * cout_g]
        gw[g * cout_g:(g + 1) * cout_g] = np.einsum("ohw,ihwkl->oikl", go, xs, optimize=True)
        # per-tap scatter back into the padded input
        contrib = np.einsum("oikl,ohw->iklhw", ws, go, optimize=True)
        dst = gxp[g * cin_g:(g + 1) * cin_g]
        for ki in range(kh):
            for kj in range(kw):
                dst[:, ki:ki + stride * (Ho - 1) + 1:stride,
                    kj:kj + stride * (Wo - 1) + 1:stride] += contrib[:, ki, kj]
    H, W = x.shape[1:]
    return gxp[:, padding:padding + H, padding:padding + W].copy(), gw


def _corners(u, n):
    if n == 1:
        zero = np.zeros(u.shape, dtype=np.intp)
        return zero, zero, np.zeros_like(u)
    lo = np.clip(np.floor(u), 0, n - 2).astype(np.intp)
    return lo, lo + 1, u - lo


def bilinear_forward(z, uy, ux):
    y0, y1, wy = _corners(uy, z.shape[1])
    x0, x1, wx = _corners(ux, z.shape[2])
    wy = wy[:, None]
    wx = wx[:, None]
    out = ((1.0 - wy) * (1.0 - wx) * z[:, y0, x0].T + (1.0 - wy) * wx * z[:, y0, x1].T
           + wy * (1.0 - wx) * z[:, y1, x0].T + wy * wx * z[:, y1, x1].T)
    return np.ascontiguousarray(out)


def bilinear_backward(z, uy, ux, gout):
    C, H, W = z.shape
    y0, y1, wy = _corners(uy, H)
    x0, x1, wx = _corners(ux, W)
    gz = np.zeros_like(z)
    wyc = wy[:, None]
    wxc = wx[:, None]
    for yi, xi, wgt in (
        (y0, x0, (1.0 - wyc) * (1.0 - wxc)),
        (y0, x1, (1.0 - wyc) * wxc),
        (y1, x0, wyc * (1.0 - wxc)),
        (y1, x1, wyc * wxc),
    ):
        np.add.at(gz, (slice(None), yi, xi), (wgt * gout).T)
    z00, z01 = z[:, y0, x0].T, z[:, y0, x1].T
    z10, z11 = z[:, y1, x0].T, z[:, y1, x1].T
    guy = (gout * ((1.0 - wxc) * (z10 - z00) + wxc * (z11 - z01))).sum(axis=1)
    gux = (gout * ((1.0 - wyc) * (z01 - z00) + wyc * (z11 - z10))).sum(axis=1)
    if H == 1:
        guy = np.zeros_like(guy)
    if W == 1:
        gux = np.zeros_like(gux)
    return gz, guy, gux
