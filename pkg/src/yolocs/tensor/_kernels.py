"""Hot loops for convolution and max pooling.

Each kernel exists twice: a numba version and a numpy version. They share one
accumulation order per output element:

    conv forward     acc = sum over in-channel c of (sum over ky, kx of x*w), then + bias
    conv grad_input  sum over (out-channel, ky, kx), lexicographic
    maxpool          first strict maximum in a row-major window scan

so both paths produce the same bits. The serial numba kernels keep channels-last
scratch buffers so their innermost loop runs across channels; the
``parallel=True`` forward splits over output channels instead. Neither layout
changes the order in which any single output element is summed.
"""

import numpy as np

from yolocs._backend import njit, prange


def _conv_fwd_impl(x, w, b, stride, pad, use_bias, out):
    n, ci, h, wd = x.shape
    co = w.shape[0]
    k = w.shape[2]
    ho = out.shape[2]
    wo = out.shape[3]
    for bi in range(n):
        for o in prange(co):
            acc = np.zeros((ho, wo), dtype=x.dtype)
            part = np.empty((ho, wo), dtype=x.dtype)
            for c in range(ci):
                part[:, :] = 0
                for ky in range(k):
                    y0 = max(0, -((ky - pad) // stride))
                    y1 = min(ho, (h - 1 + pad - ky) // stride + 1)
                    for kx in range(k):
                        x0 = max(0, -((kx - pad) // stride))
                        x1 = min(wo, (wd - 1 + pad - kx) // stride + 1)
                        wv = w[o, c, ky, kx]
                        off = kx - pad
                        for y in range(y0, y1):
                            src = x[bi, c, y * stride + ky - pad]
                            dst = part[y]
                            if stride == 1:
                                for xx in range(x0, x1):
                                    dst[xx] += src[xx + off] * wv
                            else:
                                for xx in range(x0, x1):
                                    dst[xx] += src[xx * stride + off] * wv
                for y in range(ho):
                    for xx in range(wo):
                        acc[y, xx] += part[y, xx]
            if use_bias:
                bv = b[o]
                for y in range(ho):
                    for xx in range(wo):
                        acc[y, xx] += bv
            out[bi, o] = acc
    return out


_conv_fwd_parallel = njit(cache=True, parallel=True)(_conv_fwd_impl)


@njit(cache=True)
def _conv_fwd_serial(x, w, b, stride, pad, use_bias, out):
    # Same per-element order as _conv_fwd_impl, but channels-last scratch so
    # the innermost loop runs over output channels and vectorizes.
    n, ci, h, wd = x.shape
    co = w.shape[0]
    k = w.shape[2]
    ho = out.shape[2]
    wo = out.shape[3]
    wt = np.empty((ci, k, k, co), dtype=x.dtype)
    for o in range(co):
        for c in range(ci):
            for ky in range(k):
                for kx in range(k):
                    wt[c, ky, kx, o] = w[o, c, ky, kx]
    acc = np.empty((ho, wo, co), dtype=x.dtype)
    part = np.empty((ho, wo, co), dtype=x.dtype)
    for bi in range(n):
        acc[:, :, :] = 0
        for c in range(ci):
            part[:, :, :] = 0
            for ky in range(k):
                y0 = max(0, -((ky - pad) // stride))
                y1 = min(ho, (h - 1 + pad - ky) // stride + 1)
                for kx in range(k):
                    x0 = max(0, -((kx - pad) // stride))
                    x1 = min(wo, (wd - 1 + pad - kx) // stride + 1)
                    wrow = wt[c, ky, kx]
                    for y in range(y0, y1):
                        src = x[bi, c, y * stride + ky - pad]
                        for xx in range(x0, x1):
                            xv = src[xx * stride + kx - pad]
                            dst = part[y, xx]
                            for o in range(co):
                                dst[o] += xv * wrow[o]
            for y in range(ho):
                for xx in range(wo):
                    a = acc[y, xx]
                    p = part[y, xx]
                    for o in range(co):
                        a[o] += p[o]
        for o in range(co):
            bv = b[o]
            for y in range(ho):
                for xx in range(wo):
                    if use_bias:
                        out[bi, o, y, xx] = acc[y, xx, o] + bv
                    else:
                        out[bi, o, y, xx] = acc[y, xx, o]
    return out


@njit(cache=True)
def _conv_grad_input_numba(go, w, stride, pad, out):
    n, co, ho, wo = go.shape
    ci = w.shape[1]
    k = w.shape[2]
    h = out.shape[2]
    wd = out.shape[3]
    wt = np.empty((co, k, k, ci), dtype=go.dtype)
    for o in range(co):
        for c in range(ci):
            for ky in range(k):
                for kx in range(k):
                    wt[o, ky, kx, c] = w[o, c, ky, kx]
    gi = np.empty((h, wd, ci), dtype=go.dtype)
    for bi in range(n):
        gi[:, :, :] = 0
        for o in range(co):
            for ky in range(k):
                y0 = max(0, -((ky - pad) // stride))
                y1 = min(ho, (h - 1 + pad - ky) // stride + 1)
                for kx in range(k):
                    x0 = max(0, -((kx - pad) // stride))
                    x1 = min(wo, (wd - 1 + pad - kx) // stride + 1)
                    wrow = wt[o, ky, kx]
                    for y in range(y0, y1):
                        src = go[bi, o, y]
                        for xx in range(x0, x1):
                            g = src[xx]
                            dst = gi[y * stride + ky - pad, xx * stride + kx - pad]
                            for c in range(ci):
                                dst[c] += g * wrow[c]
        for c in range(ci):
            for y in range(h):
                for xx in range(wd):
                    out[bi, c, y, xx] = gi[y, xx, c]
    return out


@njit(cache=True)
def _maxpool_fwd_numba(x, k, pad, out, arg):
    n, c, h, wd = x.shape
    for bi in range(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(wd):
                    best = -np.inf
                    idx = -1
                    for ky in range(k):
                        iy = y + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = xx + kx - pad
                            if ix < 0 or ix >= wd:
                                continue
                            v = x[bi, ch, iy, ix]
                            if v > best:
                                best = v
                                idx = iy * wd + ix
                    out[bi, ch, y, xx] = best
                    arg[bi, ch, y, xx] = idx
    return out, arg


@njit(cache=True)
def _maxpool_bwd_numba(go, arg, out):
    n, c, h, wd = go.shape
    for bi in range(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(wd):
                    i = arg[bi, ch, y, xx]
                    out[bi, ch, i // wd, i % wd] += go[bi, ch, y, xx]
    return out


def _conv_fwd_numpy(x, w, b, stride, pad, use_bias, out):
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = out.shape[2], out.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    acc = np.zeros((n, co, ho, wo), dtype=x.dtype)
    part = np.empty_like(acc)
    for c in range(ci):
        part.fill(0)
        for ky in range(k):
            for kx in range(k):
                patch = xp[:, c, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride]
                part += patch[:, None] * w[:, c, ky, kx][None, :, None, None]
        acc += part
    if use_bias:
        acc += b[None, :, None, None]
    out[...] = acc
    return out


def _conv_grad_input_numpy(go, w, stride, pad, out):
    n, co, ho, wo = go.shape
    k = w.shape[2]
    h, wd = out.shape[2], out.shape[3]
    gp = np.zeros((n, w.shape[1], h + 2 * pad + stride, wd + 2 * pad + stride), dtype=go.dtype)
    for o in range(co):
        g = go[:, o, None]
        for ky in range(k):
            for kx in range(k):
                gp[:, :, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride] += (
                    g * w[o, :, ky, kx][None, :, None, None])
    out[...] = gp[:, :, pad:pad + h, pad:pad + wd]
    return out


def _maxpool_fwd_numpy(x, k, pad, out, arg):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    ys, xs = np.meshgrid(np.arange(h), np.arange(wd), indexing="ij")
    best = np.full(x.shape, -np.inf, dtype=x.dtype)
    idx = np.full(x.shape, -1, dtype=np.int64)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, :, ky:ky + h, kx:kx + wd]
            better = patch > best
            best = np.where(better, patch, best)
            flat = (ys + ky - pad) * wd + (xs + kx - pad)
            idx = np.where(better, flat[None, None], idx)
    out[...] = best
    arg[...] = idx
    return out, arg


def _maxpool_bwd_numpy(go, arg, out):
    n, c, h, wd = go.shape
    planes = out.reshape(n * c, h * wd)
    rows = np.repeat(np.arange(n * c), h * wd)
    np.add.at(planes, (rows, arg.reshape(-1)), go.reshape(-1))
    return out


def conv_forward(x, w, b, stride, pad, use_bias, out, *, use_numba, parallel=False):
    if use_numba:
        kernel = _conv_fwd_parallel if parallel else _conv_fwd_serial
        if b is None:
            b = np.zeros(w.shape[0], dtype=x.dtype)
        return kernel(x, w, b, stride, pad, use_bias, out)
    return _conv_fwd_numpy(x, w, b, stride, pad, use_bias, out)


def conv_grad_input(go, w, stride, pad, out, *, use_numba):
    if use_numba:
        return _conv_grad_input_numba(go, w, stride, pad, out)
    return _conv_grad_input_numpy(go, w, stride, pad, out)


def maxpool_forward(x, k, pad, out, arg, *, use_numba):
    if use_numba:
        return _maxpool_fwd_numba(x, k, pad, out, arg)
    return _maxpool_fwd_numpy(x, k, pad, out, arg)


def maxpool_backward(go, arg, out, *, use_numba):
    if use_numba:
        return _maxpool_bwd_numba(go, arg, out)
    return _maxpool_bwd_numpy(go, arg, out)
