"""Compact convolutional encoder shared by both Siamese streams.

Each block is a 3x3 convolution (stride 1, zero padding 1), ReLU and a 2x2
max-pool with stride 2; a global average pool turns the last feature map into
the embedding. Kernels are stored as (3, 3, C, F).

Layout notes (all internal):

* activations are channel-major, (C, N, H, W);
* patch matrices are ordered by pool quadrant, (9C, 4, N, H/2, W/2), so a
  convolution is one GEMM and the following 2x2 pool is an element-wise max
  over four contiguous blocks;
* the pool is taken over pre-activations and ReLU applied afterwards. ReLU is
  monotone, so this equals ReLU-then-pool, gradient included;
* the first layer's patches depend only on the input crops. Training passes
  them in precomputed (see :func:`first_layer_patches`) in the transposed
  (P, 27) orientation, which multiplies much faster for few output channels.
"""
from __future__ import annotations

import numpy as np

from . import _kernels as _k

_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]
_QUADRANTS = [(0, 0), (0, 1), (1, 0), (1, 1)]


def to_channel_major(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (C, N, H, W), contiguous."""
    return np.ascontiguousarray(np.moveaxis(np.asarray(x), -1, 0))


def quadrant_patches(x: np.ndarray) -> np.ndarray:
    """(C, N, H, W) -> (9C, 4*N*H/2*W/2) zero-padded 3x3 patches, pool-quadrant ordered."""
    c, n, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"feature map {(h, w)} is not divisible by 2")
    cols = np.empty((9, c, 4, n, h // 2, w // 2), dtype=x.dtype)
    _k.patches(np.ascontiguousarray(x), cols)
    return cols.reshape(9 * c, -1)


def quadrant_col2im(dcols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`quadrant_patches`."""
    c, n, h, w = shape
    out = np.empty(shape, dtype=dcols.dtype)
    _k.col2im(np.ascontiguousarray(dcols).reshape(9, c, 4, n, h // 2, w // 2), out)
    return out


def first_layer_patches(x: np.ndarray) -> np.ndarray:
    """Channel-major crops (3, N, S, S) -> transposed first-layer patches (4*N*S*S/4, 27)."""
    return np.ascontiguousarray(quadrant_patches(x).T)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain 3x3 'same' convolution, channels-last (N, H, W, C) -> (N, H, W, F).

    Straightforward reference implementation; the encoder itself uses the
    fused patch/pool path below.
    """
    n, h, wd, c = x.shape
    if w.shape[:3] != (3, 3, c):
        raise ValueError(f"kernel shape {w.shape} does not match {c} input channels")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, w.shape[-1]), dtype=np.result_type(x, w))
    for dy, dx in _OFFSETS:
        out += xp[:, dy:dy + h, dx:dx + wd, :] @ w[dy, dx]
    return out + b


def maxpool2_forward(z: np.ndarray) -> np.ndarray:
    """2x2/2 max pool over axes 1, 2 of a channels-last batch."""
    n, h, w, c = z.shape
    return z.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))


def n_blocks(params) -> int:
    return sum(1 for k in params if k.startswith("conv") and k.endswith(".w"))


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    # (3, 3, C, F) -> (F, 9C), matching the patch row order (dy, dx, c)
    return w.reshape(-1, w.shape[-1]).T


def encode_channel_major(params, x=None, keep_cache: bool = False, patches0=None, n: int | None = None):
    """Encode channel-major crops (3, N, S, S) -> (N, E). Returns (embedding, cache).

    Instead of ``x`` the caller may pass ``patches0`` from
    :func:`first_layer_patches` together with the crop count ``n``. The
    cache holds, per block, the block input, the pool argmax and the output.
    """
    w0 = params["conv0.w"]
    dtype = w0.dtype
    if patches0 is None:
        x = np.asarray(x, dtype=dtype)
        patches0 = first_layer_patches(x)
        n = x.shape[1]
    elif n is None:
        raise ValueError("precomputed patches need the crop count n")
    f0 = w0.shape[-1]
    z = (patches0 @ w0.reshape(-1, f0)).reshape(4, -1, f0)
    m_count = z.shape[1]
    side = int(round(np.sqrt(m_count / n)))
    h = np.empty((f0, m_count), dtype=dtype)
    idx = np.empty((m_count, f0), dtype=np.uint8)
    _k.pool_relu_pm(z, params["conv0.b"].astype(dtype), h, idx)
    del z
    h = h.reshape(f0, n, side, side)
    cache = [(patches0, idx, h)] if keep_cache else []
    for l in range(1, n_blocks(params)):
        w = params[f"conv{l}.w"]
        f = w.shape[-1]
        z = (_kernel_matrix(w) @ quadrant_patches(h)).reshape(f, 4, -1)
        out = np.empty((f, z.shape[2]), dtype=dtype)
        idx = np.empty(out.shape, dtype=np.uint8)
        _k.pool_relu_cm(z, params[f"conv{l}.b"].astype(dtype), out, idx)
        del z
        out = out.reshape(f, n, h.shape[2] // 2, h.shape[3] // 2)
        if keep_cache:
            cache.append((h, idx, out))
        h = out
    return h.mean(axis=(2, 3)).T, cache


def backbone_forward(params, x: np.ndarray, keep_cache: bool = False):
    """Encode crops (N, S, S, 3), or a single (S, S, 3) crop, to embeddings (N, E)."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != params["conv0.w"].shape[2]:
        raise ValueError(f"expected (N, S, S, {params['conv0.w'].shape[2]}) crops, got {x.shape}")
    if x.shape[1] % (2 ** n_blocks(params)) or x.shape[1] != x.shape[2]:
        raise ValueError(f"crop shape {x.shape[1:3]} incompatible with {n_blocks(params)} pooling blocks")
    return encode_channel_major(params, to_channel_major(x), keep_cache)


def backbone_backward(params, cache, demb: np.ndarray, grads: dict) -> None:
    """Accumulate backbone parameter gradients for ``demb`` (N, E) into ``grads``."""
    last = cache[-1][2]
    dtype = last.dtype
    hh, ww = last.shape[-2:]
    dh = np.empty(last.shape, dtype=dtype)
    dh[...] = (demb.T / (hh * ww))[:, :, None, None]
    for l in reversed(range(1, len(cache))):
        x, idx, out = cache[l]
        w = params[f"conv{l}.w"]
        f = w.shape[-1]
        dz = np.empty((f, 4, idx.shape[1]), dtype=dtype)
        _k.unpool_relu_cm(dh.reshape(f, -1), out.reshape(f, -1), idx, dz)
        dz = dz.reshape(f, -1)
        grads[f"conv{l}.w"] += (dz @ quadrant_patches(x).T).T.reshape(w.shape)
        grads[f"conv{l}.b"] += dz.sum(axis=1)
        dh = quadrant_col2im(_kernel_matrix(w).T @ dz, x.shape)
    patches0, idx0, out0 = cache[0]
    w0 = params["conv0.w"]
    f0 = w0.shape[-1]
    dz = np.empty((4, idx0.shape[0], f0), dtype=dtype)
    _k.unpool_relu_pm(np.ascontiguousarray(dh).reshape(f0, -1), out0.reshape(f0, -1), idx0, dz)
    dz = dz.reshape(-1, f0)
    grads["conv0.w"] += (dz.T @ patches0).T.reshape(w0.shape)
    # a BLAS dot sums the tall, narrow dz far faster than a column reduction
    grads["conv0.b"] += np.ones(dz.shape[0], dtype=dtype) @ dz
