"""Differentiable numerical kernels.

Every kernel computes in float64 (regardless of storage precision), returns a
fresh `Tensor`, and registers a hand-written backward closure on the active
`GradTape`. Naive reference implementations live in `oracles.py`; the two are
kept strictly independent so the test suite can compare them.

Convolution is cross-correlation (no kernel flip) with zero padding, the
convention of the vision stacks this model family builds on.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import config
from .tensor import ShapeError, Tensor, active_tape


def _as_tuple(v, n: int, name: str) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    t = tuple(int(x) for x in v)
    if len(t) != n:
        raise ShapeError(f"{name} must have {n} entries, got {len(t)}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2D/3D convolution: kernel, stride, padding, dilation, channels."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...] | int = 1
    padding: tuple[int, ...] | int = 0
    dilation: tuple[int, ...] | int = 1

    def __post_init__(self):
        nd = len(self.kernel)
        object.__setattr__(self, "kernel", _as_tuple(self.kernel, nd, "kernel"))
        object.__setattr__(self, "stride", _as_tuple(self.stride, nd, "stride"))
        object.__setattr__(self, "padding", _as_tuple(self.padding, nd, "padding"))
        object.__setattr__(self, "dilation", _as_tuple(self.dilation, nd, "dilation"))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        for a in range(nd):
            if self.kernel[a] < 1:
                raise ShapeError(f"kernel extent must be >= 1 on spatial axis {a}")
            if self.stride[a] < 1:
                raise ShapeError(f"stride must be >= 1 on spatial axis {a}")
            if self.dilation[a] < 1:
                raise ShapeError(f"dilation must be >= 1 on spatial axis {a}")
            if self.padding[a] < 0:
                raise ShapeError(f"padding must be >= 0 on spatial axis {a}")

    @property
    def ndim(self) -> int:
        return len(self.kernel)

    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def out_extents(self, in_extents: tuple[int, ...]) -> tuple[int, ...]:
        """Output extents: floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1."""
        out = []
        for a, n in enumerate(in_extents):
            span = n + 2 * self.padding[a] - self.dilation[a] * (self.kernel[a] - 1) - 1
            if span < 0:
                raise ShapeError(
                    f"kernel does not fit input on spatial axis {a}: "
                    f"extent {n} with padding {self.padding[a]}"
                )
            out.append(span // self.stride[a] + 1)
        return tuple(out)

    def transpose_extents(self, in_extents: tuple[int, ...]) -> tuple[int, ...]:
        """Default output extents of the matching transposed convolution."""
        return tuple(
            (n - 1) * self.stride[a] - 2 * self.padding[a] + self.dilation[a] * (self.kernel[a] - 1) + 1
            for a, n in enumerate(in_extents)
        )


def _maybe_record(out: Tensor, inputs: tuple[Tensor, ...], make_backward) -> None:
    tape = active_tape()
    if tape is None:
        return
    needs = tuple(tape.needs_grad(t) for t in inputs)
    if any(needs):
        tape.record(out, inputs, make_backward(needs))


# ---------------------------------------------------------------------------
# convolution machinery (shared by conv2d / conv3d / conv_transpose3d)
# ---------------------------------------------------------------------------


def _patch_view(xp: np.ndarray, spec: ConvSpec, out_ext: tuple[int, ...]) -> np.ndarray:
    """Strided view of shape (C, *kernel, *out_ext) over the padded input."""
    nd = spec.ndim
    sp = xp.strides[1:]
    shape = (xp.shape[0], *spec.kernel, *out_ext)
    strides = (
        xp.strides[0],
        *[sp[a] * spec.dilation[a] for a in range(nd)],
        *[sp[a] * spec.stride[a] for a in range(nd)],
    )
    return np.lib.stride_tricks.as_strided(xp, shape, strides)


def _chunk_ranges(out_ext: tuple[int, ...], per_pos_bytes: int):
    """Split the leading output axis so each chunk's im2col buffer stays bounded."""
    tail = int(np.prod(out_ext[1:], dtype=np.int64)) if len(out_ext) > 1 else 1
    row_bytes = per_pos_bytes * tail
    step = max(1, config.max_cols_bytes() // max(1, row_bytes))
    for start in range(0, out_ext[0], step):
        yield start, min(out_ext[0], start + step)


def _col2im_add(buf: np.ndarray, patches: np.ndarray, spec: ConvSpec, lead_start: int) -> None:
    """Scatter-add patch gradients back into the padded buffer.

    Sequential over kernel offsets in a fixed order, so overlapping taps
    accumulate deterministically.
    """
    nd = spec.ndim
    out_chunk = patches.shape[1 + nd:]
    for km in itertools.product(*[range(k) for k in spec.kernel]):
        idx = [slice(None)]
        for a in range(nd):
            start = km[a] * spec.dilation[a]
            if a == 0:
                start += lead_start * spec.stride[0]
            idx.append(slice(start, start + out_chunk[a] * spec.stride[a], spec.stride[a]))
        buf[tuple(idx)] += patches[(slice(None), *km)]


def _pad_input(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    return np.pad(x, ((0, 0), *[(p, p) for p in spec.padding]))


def _chunk_cols(view: np.ndarray, nd: int, d0: int, d1: int) -> np.ndarray:
    sel = (Ellipsis, slice(d0, d1)) + (slice(None),) * (nd - 1)
    chunk = view[sel]
    k_rows = int(np.prod(chunk.shape[: 1 + nd], dtype=np.int64))
    return chunk.reshape(k_rows, -1)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec):
    nd = spec.ndim
    xp = _pad_input(x, spec)
    out_ext = spec.out_extents(x.shape[1:])
    for a, e in enumerate(out_ext):
        if e < 1:
            raise ShapeError(f"output extent {e} < 1 on spatial axis {a}")
    view = _patch_view(xp, spec, out_ext)
    k_rows = spec.in_channels * int(np.prod(spec.kernel, dtype=np.int64))
    w_mat = w.reshape(spec.out_channels, k_rows)
    tail = int(np.prod(out_ext[1:], dtype=np.int64)) if nd > 1 else 1
    total = out_ext[0] * tail
    out = np.empty((spec.out_channels, total), dtype=np.float64)
    for d0, d1 in _chunk_ranges(out_ext, k_rows * 8):
        cols = _chunk_cols(view, nd, d0, d1)
        out[:, d0 * tail : d1 * tail] = w_mat @ cols
    out += b[:, None]
    return out.reshape(spec.out_channels, *out_ext), xp, out_ext


def _conv_backward(g: np.ndarray, xp: np.ndarray, w: np.ndarray, spec: ConvSpec,
                   out_ext: tuple[int, ...], x_shape: tuple[int, ...], needs):
    need_x, need_w, need_b = needs
    nd = spec.ndim
    k_rows = spec.in_channels * int(np.prod(spec.kernel, dtype=np.int64))
    w_mat = w.reshape(spec.out_channels, k_rows)
    tail = int(np.prod(out_ext[1:], dtype=np.int64)) if nd > 1 else 1
    g_mat = g.reshape(spec.out_channels, -1)

    grad_x = grad_w = grad_b = None
    if need_b:
        grad_b = g_mat.sum(axis=1)
    if need_w:
        grad_w = np.zeros((spec.out_channels, k_rows), dtype=np.float64)
    if need_x:
        grad_xp = np.zeros_like(xp)
    view = _patch_view(xp, spec, out_ext) if need_w else None
    for d0, d1 in _chunk_ranges(out_ext, k_rows * 8):
        g_chunk = g_mat[:, d0 * tail : d1 * tail]
        if need_w:
            cols = _chunk_cols(view, nd, d0, d1)
            grad_w += g_chunk @ cols.T
        if need_x:
            gcols = w_mat.T @ g_chunk
            patches = gcols.reshape(spec.in_channels, *spec.kernel, d1 - d0, *out_ext[1:])
            _col2im_add(grad_xp, patches, spec, d0)
    if need_x:
        inner = tuple(slice(p, p + x_shape[1 + a]) for a, p in enumerate(spec.padding))
        grad_x = grad_xp[(slice(None), *inner)].copy()
    if need_w:
        grad_w = grad_w.reshape(spec.weight_shape())
    return grad_x, grad_w, grad_b


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec, nd: int, op: str):
    if x.ndim != nd + 1:
        raise ShapeError(f"{op} expects a {nd + 1}-D input (channels first), got rank {x.ndim}")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(
            f"{op}: input channel axis has {x.shape[0]} channels, spec expects {spec.in_channels}"
        )
    if w.shape != spec.weight_shape():
        raise ShapeError(f"{op}: weight shape {w.shape} != expected {spec.weight_shape()}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"{op}: bias shape {b.shape} != ({spec.out_channels},)")


def _conv_nd(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec, nd: int, op: str) -> Tensor:
    _check_conv_args(x, w, b, spec, nd, op)
    x64, w64, b64 = x.f64(), w.f64(), b.f64()
    y, xp, out_ext = _conv_forward(x64, w64, b64, spec)
    out = Tensor(y)

    def make_backward(needs):
        def bwd(g):
            return _conv_backward(g, xp, w64, spec, out_ext, x64.shape, needs)

        return bwd

    _maybe_record(out, (x, w, b), make_backward)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> Tensor:
    """2D cross-correlation over a (C, H, W) input."""
    return _conv_nd(x, w, b, spec, 2, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> Tensor:
    """3D cross-correlation over a (C, D, H, W) input."""
    return _conv_nd(x, w, b, spec, 3, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec,
                     out_extents: tuple[int, ...] | None = None) -> Tensor:
    """Transposed 3D convolution: the exact adjoint of `conv3d` with shared weights.

    `spec` carries the transpose's own channel ordering (in_channels = the
    input's channels); the weight layout is (in_channels, out_channels, *k).
    `out_extents` selects among the stride-ambiguous output sizes; the default
    is (n-1)*stride - 2*pad + dilation*(k-1) + 1.
    """
    nd = 3
    if x.ndim != nd + 1:
        raise ShapeError(f"conv_transpose3d expects a 4-D input, got rank {x.ndim}")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(
            f"conv_transpose3d: input channel axis has {x.shape[0]} channels, "
            f"spec expects {spec.in_channels}"
        )
    w_shape = (spec.in_channels, spec.out_channels, *spec.kernel)
    if w.shape != w_shape:
        raise ShapeError(f"conv_transpose3d: weight shape {w.shape} != expected {w_shape}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"conv_transpose3d: bias shape {b.shape} != ({spec.out_channels},)")

    in_ext = x.shape[1:]
    if out_extents is None:
        out_extents = spec.transpose_extents(in_ext)
    out_extents = tuple(int(e) for e in out_extents)
    # The paired forward conv must map out_extents back onto the input grid.
    fwd_spec = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel,
                        spec.stride, spec.padding, spec.dilation)
    if fwd_spec.out_extents(out_extents) != tuple(in_ext):
        raise ShapeError(
            f"conv_transpose3d: requested output extents {out_extents} are inconsistent "
            f"with input extents {tuple(in_ext)} under stride {spec.stride}"
        )

    x64, w64, b64 = x.f64(), w.f64(), b.f64()
    k_rows = spec.out_channels * int(np.prod(spec.kernel, dtype=np.int64))
    w_mat = w64.reshape(spec.in_channels, k_rows)
    tail = int(np.prod(in_ext[1:], dtype=np.int64))
    x_mat = x64.reshape(spec.in_channels, -1)
    buf = np.zeros(
        (spec.out_channels, *[out_extents[a] + 2 * spec.padding[a] for a in range(nd)]),
        dtype=np.float64,
    )
    for d0, d1 in _chunk_ranges(tuple(in_ext), k_rows * 8):
        cols = w_mat.T @ x_mat[:, d0 * tail : d1 * tail]
        patches = cols.reshape(spec.out_channels, *spec.kernel, d1 - d0, *in_ext[1:])
        _col2im_add(buf, patches, fwd_spec, d0)
    inner = tuple(slice(p, p + out_extents[a]) for a, p in enumerate(spec.padding))
    y = buf[(slice(None), *inner)].copy()
    y += b64.reshape(-1, *[1] * nd)
    out = Tensor(y)

    def make_backward(needs):
        need_x, need_w, need_b = needs

        def bwd(g):
            gp = _pad_input(g, fwd_spec)
            view = _patch_view(gp, fwd_spec, tuple(in_ext))
            grad_x = grad_w = grad_b = None
            if need_b:
                grad_b = g.reshape(spec.out_channels, -1).sum(axis=1)
            if need_w:
                grad_w = np.zeros((spec.in_channels, k_rows), dtype=np.float64)
            if need_x:
                grad_x = np.empty_like(x_mat)
            for d0, d1 in _chunk_ranges(tuple(in_ext), k_rows * 8):
                cols = _chunk_cols(view, nd, d0, d1)
                if need_x:
                    grad_x[:, d0 * tail : d1 * tail] = w_mat @ cols
                if need_w:
                    grad_w += x_mat[:, d0 * tail : d1 * tail] @ cols.T
            if need_x:
                grad_x = grad_x.reshape(x64.shape)
            if need_w:
                grad_w = grad_w.reshape(w_shape)
            return grad_x, grad_w, grad_b

        return bwd

    _maybe_record(out, (x, w, b), make_backward)
    return out


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------


def instance_norm2d(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the H*W plane of a (C, H, W) tensor."""
    if x.ndim != 3:
        raise ShapeError(f"instance_norm2d expects (C, H, W), got rank {x.ndim}")
    c = x.shape[0]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"instance_norm2d: gain/shift must have shape ({c},)")
    x64 = x.f64()
    m = x64.mean(axis=(1, 2), keepdims=True)
    xc = x64 - m
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    g64 = gain.f64()
    y = g64[:, None, None] * xhat + shift.f64()[:, None, None]
    out = Tensor(y)

    def make_backward(needs):
        need_x, need_gain, need_shift = needs

        def bwd(g):
            grad_x = grad_gain = grad_shift = None
            if need_shift:
                grad_shift = g.sum(axis=(1, 2))
            if need_gain:
                grad_gain = (g * xhat).sum(axis=(1, 2))
            if need_x:
                gh = g * g64[:, None, None]
                grad_x = inv_std * (
                    gh
                    - gh.mean(axis=(1, 2), keepdims=True)
                    - xhat * (gh * xhat).mean(axis=(1, 2), keepdims=True)
                )
            return grad_x, grad_gain, grad_shift

        return bwd

    _maybe_record(out, (x, gain, shift), make_backward)
    return out


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    x64 = x.f64()
    pos = x64 >= 0
    out = Tensor(np.where(pos, x64, slope * x64))

    def make_backward(needs):
        def bwd(g):
            return (np.where(pos, g, slope * g),)

        return bwd

    _maybe_record(out, (x,), make_backward)
    return out


def softmax(x: Tensor, axis: int) -> Tensor:
    """Exp-normalization along `axis` with max-subtraction for stability."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    x64 = x.f64()
    m = x64.max(axis=axis, keepdims=True)
    e = np.exp(x64 - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def make_backward(needs):
        def bwd(g):
            return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

        return bwd

    _maybe_record(out, (x,), make_backward)
    return out


def spatial_subsample(x: Tensor, factor: int) -> Tensor:
    """Average-pool over non-overlapping factor x factor blocks of the last two axes."""
    if factor < 1:
        raise ShapeError("subsample factor must be >= 1")
    if x.ndim < 2:
        raise ShapeError("spatial_subsample expects at least 2 axes")
    h, w = x.shape[-2], x.shape[-1]
    if h % factor or w % factor:
        ax = -2 if h % factor else -1
        raise ShapeError(
            f"spatial extent {x.shape[ax]} on axis {x.ndim + ax} not divisible by factor {factor}"
        )
    if factor == 1:
        out = Tensor(x.f64().copy())

        def make_backward_id(needs):
            return lambda g: (g.copy(),)

        _maybe_record(out, (x,), make_backward_id)
        return out
    x64 = x.f64()
    lead = x.shape[:-2]
    blocks = x64.reshape(*lead, h // factor, factor, w // factor, factor)
    y = blocks.mean(axis=(-3, -1))
    out = Tensor(y)

    def make_backward(needs):
        def bwd(g):
            gx = np.broadcast_to(
                g[..., :, None, :, None] / (factor * factor), blocks.shape
            ).reshape(x64.shape)
            return (gx.copy(),)

        return bwd

    _maybe_record(out, (x,), make_backward)
    return out


def l2norm_channels(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize each position's channel vector (axis 0) by max(||v||, eps)."""
    x64 = x.f64()
    n = np.sqrt((x64 * x64).sum(axis=0, keepdims=True))
    denom = np.maximum(n, eps)
    y = x64 / denom
    out = Tensor(y)

    def make_backward(needs):
        def bwd(g):
            dot = (y * g).sum(axis=0, keepdims=True)
            gx = np.where(n > eps, (g - y * dot) / denom, g / eps)
            return (gx,)

        return bwd

    _maybe_record(out, (x,), make_backward)
    return out


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.f64() + b.f64())

    def make_backward(needs):
        def bwd(g):
            return (g.copy() if needs[0] else None, g.copy() if needs[1] else None)

        return bwd

    _maybe_record(out, (a, b), make_backward)
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([p.f64() for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def make_backward(needs):
        def bwd(g):
            grads = []
            offset = 0
            for sz, need in zip(sizes, needs):
                sel = [slice(None)] * g.ndim
                sel[axis] = slice(offset, offset + sz)
                grads.append(g[tuple(sel)].copy() if need else None)
                offset += sz
            return tuple(grads)

        return bwd

    _maybe_record(out, tuple(parts), make_backward)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.f64().reshape(shape))

    def make_backward(needs):
        def bwd(g):
            return (g.reshape(x.shape).copy(),)

        return bwd

    _maybe_record(out, (x,), make_backward)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.f64() * c)

    def make_backward(needs):
        def bwd(g):
            return (g * c,)

        return bwd

    _maybe_record(out, (x,), make_backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.f64().sum()))

    def make_backward(needs):
        def bwd(g):
            return (np.full(x.shape, float(g), dtype=np.float64),)

        return bwd

    _maybe_record(out, (x,), make_backward)
    return out


# ---------------------------------------------------------------------------
# flow-specific ops
# ---------------------------------------------------------------------------


def entropy_over_axis(omega: Tensor, axis: int = 0, eps: float = 1e-12) -> Tensor:
    """Shannon entropy -sum(w * ln(w + eps)) reduced along `axis`, in nats."""
    w64 = omega.f64()
    logw = np.log(w64 + eps)
    out = Tensor(-(w64 * logw).sum(axis=axis))

    def make_backward(needs):
        def bwd(g):
            ge = np.expand_dims(g, axis)
            return (-ge * (logw + w64 / (w64 + eps)),)

        return bwd

    _maybe_record(out, (omega,), make_backward)
    return out


def flows_from_weights(omega: Tensor, tables: np.ndarray) -> Tensor:
    """Per-dilation expected displacement.

    omega: (D, D', H, W) normalized weights; tables: (D, D', 2) constant
    displacement coordinates in input-image pixels. Returns (D, 2, H, W).
    """
    if omega.ndim != 4 or tables.ndim != 3 or omega.shape[:2] != tables.shape[:2]:
        raise ShapeError(
            f"flows_from_weights: omega {omega.shape} and tables {tables.shape} disagree"
        )
    w64 = omega.f64()
    t64 = tables.astype(np.float64, copy=False)
    out = Tensor(np.einsum("dihw,dic->dchw", w64, t64, optimize=True))

    def make_backward(needs):
        def bwd(g):
            return (np.einsum("dchw,dic->dihw", g, t64, optimize=True),)

        return bwd

    _maybe_record(out, (omega,), make_backward)
    return out


def convex_blend(alpha: Tensor, flows: Tensor) -> Tensor:
    """Fuse hypotheses: sum_d alpha[d] * flows[d]. alpha (D,H,W), flows (D,2,H,W)."""
    if alpha.ndim != 3 or flows.ndim != 4 or alpha.shape[0] != flows.shape[0] \
            or alpha.shape[1:] != flows.shape[2:]:
        raise ShapeError(f"convex_blend: alpha {alpha.shape} and flows {flows.shape} disagree")
    a64, f64v = alpha.f64(), flows.f64()
    out = Tensor(np.einsum("dhw,dchw->chw", a64, f64v, optimize=True))

    def make_backward(needs):
        def bwd(g):
            ga = np.einsum("chw,dchw->dhw", g, f64v, optimize=True) if needs[0] else None
            gf = a64[:, None] * g[None] if needs[1] else None
            return ga, gf

        return bwd

    _maybe_record(out, (alpha, flows), make_backward)
    return out


def convex_combine(values: Tensor, weights: Tensor) -> Tensor:
    """Upsample by convex combination of each coarse cell's 3x3 neighborhood.

    values: (C, h, w); weights: (9, f, f, h, w), normalized over the first
    axis. Neighbor n = (dy+1)*3 + (dx+1), dy/dx in {-1,0,1}. The neighborhood
    is gathered with edge clamping so a constant field upsamples exactly and
    outputs stay inside the per-pixel neighborhood hull. Returns (C, h*f, w*f).
    """
    if values.ndim != 3 or weights.ndim != 5 or weights.shape[0] != 9:
        raise ShapeError(
            f"convex_combine: values {values.shape} and weights {weights.shape} malformed"
        )
    c, h, w = values.shape
    f = weights.shape[1]
    if weights.shape != (9, f, f, h, w):
        raise ShapeError(f"convex_combine: weights {weights.shape} != (9, {f}, {f}, {h}, {w})")
    v64, w64 = values.f64(), weights.f64()
    vpad = np.pad(v64, ((0, 0), (1, 1), (1, 1)), mode="edge")
    nb = np.stack([
        vpad[:, dy:dy + h, dx:dx + w]
        for dy in range(3)
        for dx in range(3)
    ])  # (9, C, h, w)
    blk = np.einsum("nabyx,ncyx->cyaxb", w64, nb, optimize=True)
    out = Tensor(blk.reshape(c, h * f, w * f))

    def make_backward(needs):
        need_v, need_w = needs

        def bwd(g):
            gblk = g.reshape(c, h, f, w, f)
            grad_w = grad_v = None
            if need_w:
                grad_w = np.einsum("cyaxb,ncyx->nabyx", gblk, nb, optimize=True)
            if need_v:
                gnb = np.einsum("cyaxb,nabyx->ncyx", gblk, w64, optimize=True)
                gpad = np.zeros_like(vpad)
                n = 0
                for dy in range(3):
                    for dx in range(3):
                        gpad[:, dy:dy + h, dx:dx + w] += gnb[n]
                        n += 1
                grad_v = gpad[:, 1:-1, 1:-1].copy()
                grad_v[:, 0, :] += gpad[:, 0, 1:-1]
                grad_v[:, -1, :] += gpad[:, -1, 1:-1]
                grad_v[:, :, 0] += gpad[:, 1:-1, 0]
                grad_v[:, :, -1] += gpad[:, 1:-1, -1]
                grad_v[:, 0, 0] += gpad[:, 0, 0]
                grad_v[:, 0, -1] += gpad[:, 0, -1]
                grad_v[:, -1, 0] += gpad[:, -1, 0]
                grad_v[:, -1, -1] += gpad[:, -1, -1]
            return grad_v, grad_w

        return bwd

    _maybe_record(out, (values, weights), make_backward)
    return out


def l1_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over valid pixels and both flow channels."""
    t64 = np.asarray(target, dtype=np.float64)
    if pred.shape != t64.shape:
        raise ShapeError(f"l1_loss: pred {pred.shape} != target {t64.shape}")
    diff = pred.f64() - t64
    if mask is not None:
        if mask.shape != pred.shape[1:]:
            raise ShapeError(f"l1_loss: mask {mask.shape} != spatial {pred.shape[1:]}")
        m = mask.astype(bool)
        count = int(m.sum()) * pred.shape[0]
        if count == 0:
            raise ShapeError("l1_loss: mask excludes every pixel")
        diff = diff * m
    else:
        count = diff.size
    out = Tensor(np.asarray(np.abs(diff).sum() / count))

    def make_backward(needs):
        def bwd(g):
            gp = np.sign(diff) * (float(g) / count)
            return (gp,)

        return bwd

    _maybe_record(out, (pred,), make_backward)
    return out
