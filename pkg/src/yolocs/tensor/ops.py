"""Forward and backward kernels for every primitive the blocks need.

Feature maps are plain C-contiguous ``ndarray`` objects shaped (n, c, h, w).
All functions are pure: batch-norm in train mode hands back new running
statistics instead of mutating its input.
"""

from dataclasses import dataclass, replace

import numpy as np

from yolocs import _backend
from yolocs.errors import DimensionMismatchError
from yolocs.tensor import _kernels
from yolocs.tensor.types import BatchNormParams, ConvParams, ConvSpec, check_tensor4


def conv2d_forward(x, spec: ConvSpec, params: ConvParams, *, parallel=False, layer=None):
    x = check_tensor4(x)
    if x.shape[1] != spec.in_channels:
        raise DimensionMismatchError(
            f"expected {spec.in_channels} input channels, got {x.shape[1]}", layer)
    params.check(spec, layer)
    ho, wo = spec.out_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise DimensionMismatchError(f"input {x.shape[2:]} too small for kernel {spec.kernel_size}", layer)
    w = np.ascontiguousarray(params.weights, dtype=x.dtype)
    b = None if params.bias is None else np.ascontiguousarray(params.bias, dtype=x.dtype)
    out = np.empty((x.shape[0], spec.out_channels, ho, wo), dtype=x.dtype)
    return _kernels.conv_forward(x, w, b, spec.stride, spec.padding, spec.has_bias, out,
                                 use_numba=_backend.USE_NUMBA, parallel=parallel)


def _windows(x, spec: ConvSpec, ho, wo):
    p, s, k = spec.padding, spec.stride, spec.kernel_size
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]


def conv2d_backward(x, spec: ConvSpec, params: ConvParams, grad_out, *, layer=None):
    """Return ``(grad_input, grad_weights, grad_bias)``; ``grad_bias`` is None without bias."""
    x = check_tensor4(x)
    grad_out = check_tensor4(grad_out, "grad_out")
    ho, wo = spec.out_hw(x.shape[2], x.shape[3])
    expected = (x.shape[0], spec.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise DimensionMismatchError(f"grad_out shape {grad_out.shape} != {expected}", layer)
    w = np.ascontiguousarray(params.weights, dtype=x.dtype)
    grad_out = grad_out.astype(x.dtype, copy=False)
    gi = np.empty_like(x)
    _kernels.conv_grad_input(grad_out, w, spec.stride, spec.padding, gi, use_numba=_backend.USE_NUMBA)
    win = _windows(x, spec, ho, wo)
    gw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    gb = grad_out.sum(axis=(0, 2, 3)) if spec.has_bias else None
    return gi, np.ascontiguousarray(gw), gb


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def batchnorm_forward(x, params: BatchNormParams, mode: str = "train", *, layer=None):
    """Normalize per channel.

    Returns ``(out, cache, params_after)``. In train mode ``params_after`` holds
    the momentum-updated running statistics; in eval mode it is ``params``.
    """
    x = check_tensor4(x)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    c = x.shape[1]
    if c != params.channels:
        raise DimensionMismatchError(f"expected {params.channels} channels, got {c}", layer)
    dt = x.dtype
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = params.momentum
        new = replace(
            params,
            running_mean=((1 - mom) * params.running_mean + mom * mean).astype(params.running_mean.dtype),
            running_var=((1 - mom) * params.running_var + mom * unbiased).astype(params.running_var.dtype),
        )
    else:
        mean = params.running_mean.astype(dt)
        var = params.running_var.astype(dt)
        new = params
    inv_std = (1.0 / np.sqrt(var + dt.type(params.eps))).astype(dt)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gamma = params.gamma.astype(dt)
    out = gamma[None, :, None, None] * xhat + params.beta.astype(dt)[None, :, None, None]
    return out, BatchNormCache(xhat, inv_std, gamma, mode == "train"), new


def batchnorm_backward(grad_out, cache: BatchNormCache):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    g = grad_out
    gbeta = g.sum(axis=(0, 2, 3))
    ggamma = (g * cache.xhat).sum(axis=(0, 2, 3))
    scale = (cache.gamma * cache.inv_std)[None, :, None, None]
    if not cache.train:
        return g * scale, ggamma, gbeta
    m = g.shape[0] * g.shape[2] * g.shape[3]
    gi = scale * (g - gbeta[None, :, None, None] / m - cache.xhat * (ggamma[None, :, None, None] / m))
    return gi.astype(g.dtype, copy=False), ggamma, gbeta


def _sigmoid(x):
    # exp(-|x|) never overflows; pick the matching form per sign
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x):
    return _sigmoid(np.asarray(x))


def silu(x):
    return x * _sigmoid(x)


def silu_backward(x, grad_out):
    s = _sigmoid(x)
    return grad_out * (s * (1 + x * (1 - s)))


def concat_channels(inputs, *, layer=None):
    if not inputs:
        raise DimensionMismatchError("concat needs at least one input", layer)
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise DimensionMismatchError(
                f"cannot concat {t.shape} with {inputs[0].shape}: batch/spatial dims differ", layer)
    return np.concatenate(inputs, axis=1)


def split_channels(grad_out, sizes):
    """Backward of :func:`concat_channels`: slice the gradient back per input."""
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, bounds, axis=1)]


def add(a, b, *, layer=None):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"cannot add {a.shape} and {b.shape}", layer)
    return a + b


def add_backward(grad_out):
    return grad_out, grad_out


def maxpool2d(x, kernel=5, stride=1, padding=2):
    """Same-size max pooling. Returns ``(out, argmax)`` with flat per-plane argmax indices."""
    x = check_tensor4(x)
    if stride != 1 or kernel % 2 == 0 or padding != kernel // 2:
        raise ValueError("only odd-kernel, stride-1, same-padding max pooling is supported")
    out = np.empty_like(x)
    arg = np.empty(x.shape, dtype=np.int64)
    return _kernels.maxpool_forward(x, kernel, padding, out, arg, use_numba=_backend.USE_NUMBA)


def maxpool2d_backward(grad_out, argmax):
    gi = np.zeros_like(grad_out)
    return _kernels.maxpool_backward(np.ascontiguousarray(grad_out), argmax, gi, use_numba=_backend.USE_NUMBA)


def upsample_nearest_2x(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest_2x_backward(grad_out):
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
