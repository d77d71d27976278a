"""Fused element-wise kernels for the encoder (numba).

Each of these replaces several full-array numpy passes (bias add, quadrant
max with argmax, ReLU, transposes, strided patch copies) by a single sweep.
Quadrant order is (0,0), (0,1), (1,0), (1,1); the first maximum wins ties.
"""
from __future__ import annotations

import numba as nb

_JIT = dict(nopython=True, cache=True, nogil=True)


@nb.jit(**_JIT)
def patches(x, out):
    """x (C, N, H, W) -> out (9, C, 4, N, H/2, W/2), zero padding 1."""
    c_, n_, h_, w_ = x.shape
    h2, w2 = h_ // 2, w_ // 2
    for k in range(9):
        dy = k // 3 - 1
        dx = k % 3 - 1
        for c in range(c_):
            for q in range(4):
                qy = q // 2
                qx = q % 2
                for n in range(n_):
                    for i in range(h2):
                        y = 2 * i + qy + dy
                        inside = 0 <= y < h_
                        for j in range(w2):
                            xx = 2 * j + qx + dx
                            if inside and 0 <= xx < w_:
                                out[k, c, q, n, i, j] = x[c, n, y, xx]
                            else:
                                out[k, c, q, n, i, j] = 0.0


@nb.jit(**_JIT)
def col2im(d, out):
    """Adjoint of :func:`patches`: d (9, C, 4, N, H/2, W/2) -> out (C, N, H, W), overwritten."""
    c_, n_, h_, w_ = out.shape
    h2, w2 = h_ // 2, w_ // 2
    out[:] = 0.0
    for k in range(9):
        dy = k // 3 - 1
        dx = k % 3 - 1
        for c in range(c_):
            for q in range(4):
                qy = q // 2
                qx = q % 2
                for n in range(n_):
                    for i in range(h2):
                        y = 2 * i + qy + dy
                        if y < 0 or y >= h_:
                            continue
                        for j in range(w2):
                            xx = 2 * j + qx + dx
                            if 0 <= xx < w_:
                                out[c, n, y, xx] += d[k, c, q, n, i, j]


@nb.jit(**_JIT)
def pool_relu_cm(z, b, h, idx):
    """z (F, 4, M) + bias -> h = relu(max over quadrants) (F, M), idx (F, M)."""
    f_, _, m_ = z.shape
    for f in range(f_):
        bf = b[f]
        for i in range(m_):
            best = z[f, 0, i]
            arg = 0
            for q in range(1, 4):
                v = z[f, q, i]
                if v > best:
                    best = v
                    arg = q
            best += bf
            h[f, i] = best if best > 0 else 0.0
            idx[f, i] = arg


@nb.jit(**_JIT)
def pool_relu_pm(z, b, h, idx):
    """Pixel-major variant: z (4, M, F) + bias -> h (F, M) transposed, idx (M, F)."""
    _, m_, f_ = z.shape
    for i in range(m_):
        for f in range(f_):
            best = z[0, i, f]
            arg = 0
            for q in range(1, 4):
                v = z[q, i, f]
                if v > best:
                    best = v
                    arg = q
            best += b[f]
            h[f, i] = best if best > 0 else 0.0
            idx[i, f] = arg


@nb.jit(**_JIT)
def unpool_relu_cm(dh, h, idx, dz):
    """Gradient through relu and pooling: dh, h, idx (F, M) -> dz (F, 4, M)."""
    f_, m_ = dh.shape
    for f in range(f_):
        for q in range(4):
            for i in range(m_):
                if idx[f, i] == q and h[f, i] > 0:
                    dz[f, q, i] = dh[f, i]
                else:
                    dz[f, q, i] = 0.0


@nb.jit(**_JIT)
def unpool_relu_pm(dh, h, idx, dz):
    """Pixel-major variant: dh, h (F, M), idx (M, F) -> dz (4, M, F)."""
    f_, m_ = dh.shape
    for i in range(m_):
        for f in range(f_):
            v = dh[f, i] if h[f, i] > 0 else 0.0
            a = idx[i, f]
            for q in range(4):
                dz[q, i, f] = v if a == q else 0.0
