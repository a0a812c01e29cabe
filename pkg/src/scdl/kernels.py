"""Hot convolution kernels: numba-compiled loops plus a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``SCDL_DISABLE_NUMBA``
is unset (or ``0``).  Both paths implement the same 3x3, zero-padding-1
convolution for stride 1 or 2, laid out as (batch, channel, height, width).

Loop orders inside the numba kernels are fixed so every reduction is summed
in the same sequence on every run.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KSIZE = 3
PAD = 1


def _env_flag(name):
    return os.environ.get(name, "0").strip().lower() not in ("", "0", "false", "no")


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _env_flag("SCDL_DISABLE_NUMBA")

if HAVE_NUMBA and os.environ.get("SCDL_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["SCDL_THREADS"]), numba.config.NUMBA_NUM_THREADS)))


def conv_out_size(n, stride):
    return (n + 2 * PAD - KSIZE) // stride + 1


def _pad(x):
    return np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _windows(xpad, stride):
    win = sliding_window_view(xpad, (KSIZE, KSIZE), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward_numpy(x, w, b, stride):
    win = _windows(_pad(x), stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward_numpy(x, w, g, stride, need_gx=True):
    """Return (grad_x, grad_w, grad_b) for upstream gradient ``g``."""
    xpad = _pad(x)
    win = _windows(xpad, stride)
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    gb = g.sum(axis=(0, 2, 3))
    if not need_gx:
        return None, gw, gb
    cols = np.tensordot(g, w, axes=([1], [0]))  # B, Ho, Wo, C, k, k
    ho, wo = g.shape[2], g.shape[3]
    gpad = np.zeros_like(xpad)
    for ky in range(KSIZE):
        for kx in range(KSIZE):
            gpad[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += (
                cols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            )
    gx = gpad[:, :, PAD:PAD + x.shape[2], PAD:PAD + x.shape[3]]
    return np.ascontiguousarray(gx), gw, gb


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

def _column_shifts(xpad, stride, wo):
    """Contiguous (3, N, C, Hp, Wo) stack with shifts[kx][..., j] = xpad[..., j*stride + kx]."""
    return np.ascontiguousarray(np.stack(
        [xpad[:, :, :, kx:kx + stride * (wo - 1) + 1:stride] for kx in range(KSIZE)]))


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _conv_fwd_nb(xs, w, b, stride, ho, wo):
        nb, cin = xs.shape[1], xs.shape[2]
        cout = w.shape[0]
        out = np.empty((nb, cout, ho, wo))
        for n in range(nb):
            for o in range(cout):
                for i in range(ho):
                    arow = out[n, o, i]
                    arow[:] = b[o]
                    for c in range(cin):
                        for ky in range(3):
                            row = i * stride + ky
                            for kx in range(3):
                                wv = w[o, c, ky, kx]
                                xrow = xs[kx, n, c, row]
                                for j in range(wo):
                                    arow[j] += wv * xrow[j]
        return out

    @numba.njit(cache=True)
    def _conv_bwd_nb(xs, w, g, stride, need_gx):
        nb, cin, hp = xs.shape[1], xs.shape[2], xs.shape[3]
        cout, ho, wo = g.shape[1], g.shape[2], g.shape[3]
        gw = np.zeros_like(w)
        gb = np.zeros(cout)
        tmp = np.empty(wo)
        for o in range(cout):
            tmp[:] = 0.0
            for n in range(nb):
                for i in range(ho):
                    for j in range(wo):
                        tmp[j] += g[n, o, i, j]
            s = 0.0
            for j in range(wo):
                s += tmp[j]
            gb[o] = s
        for o in range(cout):
            for c in range(cin):
                for ky in range(3):
                    for kx in range(3):
                        tmp[:] = 0.0
                        for n in range(nb):
                            for i in range(ho):
                                grow = g[n, o, i]
                                xrow = xs[kx, n, c, i * stride + ky]
                                for j in range(wo):
                                    tmp[j] += grow[j] * xrow[j]
                        s = 0.0
                        for j in range(wo):
                            s += tmp[j]
                        gw[o, c, ky, kx] = s
        gxs = np.zeros((3, nb, cin, hp, wo)) if need_gx else np.zeros((3, 0, 0, 0, 0))
        if need_gx:
            plane = np.empty((hp, wo))
            for n in range(nb):
                for c in range(cin):
                    for kx in range(3):
                        plane[:, :] = 0.0
                        for o in range(cout):
                            for ky in range(3):
                                wv = w[o, c, ky, kx]
                                for i in range(ho):
                                    prow = plane[i * stride + ky]
                                    grow = g[n, o, i]
                                    for j in range(wo):
                                        prow[j] += wv * grow[j]
                        gxs[kx, n, c] = plane
        return gxs, gw, gb


def conv2d_forward_numba(x, w, b, stride):
    ho, wo = conv_out_size(x.shape[2], stride), conv_out_size(x.shape[3], stride)
    xs = _column_shifts(_pad(x), stride, wo)
    return _conv_fwd_nb(xs, np.ascontiguousarray(w), b, stride, ho, wo)


def conv2d_backward_numba(x, w, g, stride, need_gx=True):
    xpad = _pad(x)
    wo = g.shape[3]
    gxs, gw, gb = _conv_bwd_nb(_column_shifts(xpad, stride, wo), np.ascontiguousarray(w),
                               np.ascontiguousarray(g), stride, need_gx)
    if not need_gx:
        return None, gw, gb
    gpad = np.zeros_like(xpad)
    for kx in range(KSIZE):
        gpad[:, :, :, kx:kx + stride * (wo - 1) + 1:stride] += gxs[kx]
    gx = np.ascontiguousarray(gpad[:, :, PAD:PAD + x.shape[2], PAD:PAD + x.shape[3]])
    return gx, gw, gb


def conv2d_forward(x, w, b, stride):
    if USE_NUMBA:
        return conv2d_forward_numba(x, w, b, stride)
    return conv2d_forward_numpy(x, w, b, stride)


def conv2d_backward(x, w, g, stride, need_gx=True):
    if USE_NUMBA:
        return conv2d_backward_numba(x, w, g, stride, need_gx)
    return conv2d_backward_numpy(x, w, g, stride, need_gx)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
