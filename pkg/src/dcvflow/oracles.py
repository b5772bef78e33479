"""Naive nested-loop reference implementations.

These are the trusted-but-slow counterparts of the optimized kernels in
`ops.py` and the cost-volume builder. They are written as direct loop
transcriptions of the operation definitions and must stay independent of the
optimized code paths they are used to check.
"""

from __future__ import annotations

import math

import numpy as np

from .ops import ConvSpec


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> np.ndarray:
    c_out = spec.out_channels
    h, wd = x.shape[1], x.shape[2]
    oh, ow = spec.out_extents((h, wd))
    (sy, sx), (py, px), (dy, dx) = spec.stride, spec.padding, spec.dilation
    ky, kx = spec.kernel
    out = np.zeros((c_out, oh, ow), dtype=np.float64)
    for co in range(c_out):
        for y in range(oh):
            for xx in range(ow):
                acc = float(b[co])
                for ci in range(spec.in_channels):
                    for a in range(ky):
                        iy = y * sy - py + a * dy
                        if iy < 0 or iy >= h:
                            continue
                        for bb in range(kx):
                            ix = xx * sx - px + bb * dx
                            if ix < 0 or ix >= wd:
                                continue
                            acc += float(x[ci, iy, ix]) * float(w[co, ci, a, bb])
                out[co, y, xx] = acc
    return out


def conv3d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> np.ndarray:
    c_out = spec.out_channels
    dd, h, wd = x.shape[1], x.shape[2], x.shape[3]
    od, oh, ow = spec.out_extents((dd, h, wd))
    (sz, sy, sx), (pz, py, px), (dz, dy, dx) = spec.stride, spec.padding, spec.dilation
    kz, ky, kx = spec.kernel
    out = np.zeros((c_out, od, oh, ow), dtype=np.float64)
    for co in range(c_out):
        for z in range(od):
            for y in range(oh):
                for xx in range(ow):
                    acc = float(b[co])
                    for ci in range(spec.in_channels):
                        for a in range(kz):
                            iz = z * sz - pz + a * dz
                            if iz < 0 or iz >= dd:
                                continue
                            for e in range(ky):
                                iy = y * sy - py + e * dy
                                if iy < 0 or iy >= h:
                                    continue
                                for f in range(kx):
                                    ix = xx * sx - px + f * dx
                                    if ix < 0 or ix >= wd:
                                        continue
                                    acc += float(x[ci, iz, iy, ix]) * float(w[co, ci, a, e, f])
                    out[co, z, y, xx] = acc
    return out


def conv_transpose3d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec,
                           out_extents: tuple[int, int, int]) -> np.ndarray:
    """Direct scatter form: each input cell stamps the kernel into the output."""
    c_in, c_out = spec.in_channels, spec.out_channels
    (sz, sy, sx), (pz, py, px), (dz, dy, dx) = spec.stride, spec.padding, spec.dilation
    kz, ky, kx = spec.kernel
    od, oh, ow = out_extents
    out = np.zeros((c_out, od, oh, ow), dtype=np.float64)
    for ci in range(c_in):
        for z in range(x.shape[1]):
            for y in range(x.shape[2]):
                for xx in range(x.shape[3]):
                    v = float(x[ci, z, y, xx])
                    for co in range(c_out):
                        for a in range(kz):
                            oz = z * sz - pz + a * dz
                            if oz < 0 or oz >= od:
                                continue
                            for e in range(ky):
                                oy = y * sy - py + e * dy
                                if oy < 0 or oy >= oh:
                                    continue
                                for f in range(kx):
                                    ox = xx * sx - px + f * dx
                                    if ox < 0 or ox >= ow:
                                        continue
                                    out[co, oz, oy, ox] += v * float(w[ci, co, a, e, f])
    for co in range(c_out):
        out[co] += float(b[co])
    return out


def instance_norm2d_naive(x: np.ndarray, gain: np.ndarray, shift: np.ndarray,
                          eps: float = 1e-5) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for ci in range(c):
        total = 0.0
        for y in range(h):
            for xx in range(w):
                total += float(x[ci, y, xx])
        mean = total / (h * w)
        acc = 0.0
        for y in range(h):
            for xx in range(w):
                d = float(x[ci, y, xx]) - mean
                acc += d * d
        var = acc / (h * w)
        inv = 1.0 / math.sqrt(var + eps)
        for y in range(h):
            for xx in range(w):
                out[ci, y, xx] = float(gain[ci]) * (float(x[ci, y, xx]) - mean) * inv + float(shift[ci])
    return out


def softmax_naive(x: np.ndarray, axis: int) -> np.ndarray:
    axis = axis % x.ndim
    moved = np.moveaxis(x, axis, -1)
    out = np.zeros_like(moved, dtype=np.float64)
    flat = moved.reshape(-1, moved.shape[-1])
    oflat = out.reshape(-1, moved.shape[-1])
    for r in range(flat.shape[0]):
        row = flat[r]
        m = float(row[0])
        for v in row:
            if float(v) > m:
                m = float(v)
        total = 0.0
        for j, v in enumerate(row):
            e = math.exp(float(v) - m)
            oflat[r, j] = e
            total += e
        for j in range(row.shape[0]):
            oflat[r, j] /= total
    return np.moveaxis(out, -1, axis)


def spatial_subsample_naive(x: np.ndarray, factor: int) -> np.ndarray:
    h, w = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    out = np.zeros((*lead, h // factor, w // factor), dtype=np.float64)
    for idx in np.ndindex(*lead):
        for y in range(h // factor):
            for xx in range(w // factor):
                acc = 0.0
                for a in range(factor):
                    for bb in range(factor):
                        acc += float(x[idx + (y * factor + a, xx * factor + bb)])
                out[idx + (y, xx)] = acc / (factor * factor)
    return out


def l2norm_channels_naive(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    c = x.shape[0]
    out = np.zeros_like(x, dtype=np.float64)
    for pos in np.ndindex(*x.shape[1:]):
        acc = 0.0
        for ci in range(c):
            v = float(x[(ci,) + pos])
            acc += v * v
        n = math.sqrt(acc)
        denom = n if n > eps else eps
        for ci in range(c):
            out[(ci,) + pos] = float(x[(ci,) + pos]) / denom
    return out


def build_cost_volume_naive(f1: np.ndarray, f2: np.ndarray, spec) -> np.ndarray:
    """Five nested loops over (vertical offset, horizontal offset, y, x, sub-vector).

    Matches the optimized builder bit-for-bit in 64-bit mode: both normalize
    each contiguous sub-vector, reduce products along the contiguous axis with
    the same summation primitive, and clamp to [-1, 1].
    """
    c_sub = spec.subvectors
    k, d = spec.radius, spec.dilation
    side = 2 * k + 1
    c_feat, h, w = f1.shape
    sub_len = c_feat // c_sub
    vol = np.zeros((c_sub, side, side, h, w), dtype=np.float64)
    for jv in range(side):
        dy = d * (jv - k)
        for iu in range(side):
            dx = d * (iu - k)
            for y in range(h):
                y2 = y + dy
                if y2 < 0 or y2 >= h:
                    continue
                for x in range(w):
                    x2 = x + dx
                    if x2 < 0 or x2 >= w:
                        continue
                    for c in range(c_sub):
                        u = f1[c * sub_len:(c + 1) * sub_len, y, x]
                        v = f2[c * sub_len:(c + 1) * sub_len, y2, x2]
                        nu = np.sqrt((u * u).sum())
                        nv = np.sqrt((v * v).sum())
                        un = u / (nu if nu != 0.0 else 1.0)
                        vn = v / (nv if nv != 0.0 else 1.0)
                        s = (un * vn).sum()
                        s = np.minimum(np.maximum(s, -1.0), 1.0)
                        vol[c, jv, iu, y, x] = s
    return vol
