"""Dilated cost volumes.

A cost volume holds, for every feature-grid position of the first image, the
sub-vector cosine similarities against a (2k+1)^2 grid of candidate positions
in the second image, spaced `dilation` cells apart. With features at stride
`s`, the candidate grid covers displacements of s*d*{-k..k} input-image
pixels per axis, so a handful of dilations spans everything from sub-pixel
motion to displacements of hundreds of pixels in one shot.

Displacement ordering is row-major with the vertical offset outer; the
stacked volume's collapsed displacement axis and `displacement_table` use the
same ordering so interpolation weights line up end to end.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import _maybe_record  # package-internal recording helper
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class CostVolumeSpec:
    """One (stride, dilation) sampling configuration."""

    stride: int
    dilation: int
    radius: int = 4
    subvectors: int = 4

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1:
            raise ShapeError("stride and dilation must be >= 1")
        if self.radius < 0:
            raise ShapeError("radius must be >= 0")
        if self.subvectors < 1:
            raise ShapeError("subvectors must be >= 1")

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def displacement_step(self) -> int:
        """Pixel spacing between neighboring candidates over the input images."""
        return self.stride * self.dilation

    def label(self) -> str:
        return f"s{self.stride}d{self.dilation}"


# The seven volumes the model consumes: one fine stride-2 volume plus six
# dilations at stride 8, reaching displacements of +-672 px with radius 4.
CANONICAL_SPECS: tuple[CostVolumeSpec, ...] = (
    CostVolumeSpec(2, 1),
    CostVolumeSpec(8, 1),
    CostVolumeSpec(8, 3),
    CostVolumeSpec(8, 5),
    CostVolumeSpec(8, 9),
    CostVolumeSpec(8, 13),
    CostVolumeSpec(8, 21),
)

STACK_CHANNELS = sum(s.subvectors for s in CANONICAL_SPECS)        # 28
STACK_DEPTH = CANONICAL_SPECS[0].side ** 2                         # 81


def displacement_table(spec: CostVolumeSpec) -> np.ndarray:
    """All candidate displacements in input-image pixels, shape (side^2, 2).

    Row t holds (u, v) with u horizontal and v vertical; rows are ordered
    row-major with v outer: t = (j_v)*side + (i_u), u = s*d*(i_u - k).
    """
    k = spec.radius
    offs = np.arange(-k, k + 1, dtype=np.int64) * spec.displacement_step
    u = np.tile(offs, spec.side)
    v = np.repeat(offs, spec.side)
    return np.stack([u, v], axis=1)


def similarity(v1: np.ndarray, v2: np.ndarray, subvectors: int) -> np.ndarray:
    """Cosine similarity of each of the `subvectors` contiguous sub-vector pairs."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape or v1.ndim != 1:
        raise ShapeError(f"similarity: vectors must be 1-D and equal length, got {v1.shape}, {v2.shape}")
    if v1.shape[0] % subvectors:
        raise ShapeError(f"similarity: length {v1.shape[0]} not divisible by {subvectors}")
    sub = v1.shape[0] // subvectors
    out = np.zeros(subvectors, dtype=np.float64)
    for c in range(subvectors):
        a = v1[c * sub:(c + 1) * sub]
        b = v2[c * sub:(c + 1) * sub]
        na = np.sqrt((a * a).sum())
        nb = np.sqrt((b * b).sum())
        if na == 0.0 or nb == 0.0:
            continue
        out[c] = np.minimum(np.maximum(((a / na) * (b / nb)).sum(), -1.0), 1.0)
    return out


@dataclass
class CostVolume:
    """Similarity volume for one spec: data (C, side, side, h, w).

    Axis 1 indexes the vertical candidate offset, axis 2 the horizontal one.
    Out-of-bounds candidates hold exactly 0.
    """

    spec: CostVolumeSpec
    data: Tensor

    def __post_init__(self):
        expected = (self.spec.subvectors, self.spec.side, self.spec.side)
        if self.data.ndim != 5 or self.data.shape[:3] != expected:
            raise ShapeError(f"cost volume shape {self.data.shape} != (C, side, side, h, w) for {self.spec}")


@dataclass
class CostVolumeStack:
    """Concatenated multi-dilation volume, shape (C', side^2, H', W')."""

    data: Tensor
    specs: tuple[CostVolumeSpec, ...]

    def displacement_tables(self) -> np.ndarray:
        """(D, side^2, 2) float64, aligned with the collapsed displacement axis."""
        return np.stack([displacement_table(s).astype(np.float64) for s in self.specs])


def _normalized_subvectors(x: np.ndarray, subvectors: int):
    """(C_feat, h, w) -> contiguous (h, w, C, L) with each sub-vector L2-normalized.

    Zero sub-vectors normalize to zero. Also returns the per-sub-vector norms
    (h, w, C, 1) for the backward pass.
    """
    c_feat, h, w = x.shape
    sub = c_feat // subvectors
    xt = np.ascontiguousarray(x.reshape(subvectors, sub, h, w).transpose(2, 3, 0, 1))
    n = np.sqrt((xt * xt).sum(axis=-1, keepdims=True))
    xn = xt / np.where(n == 0.0, 1.0, n)
    return xn, n


def build_cost_volume(f1: Tensor, f2: Tensor, spec: CostVolumeSpec) -> CostVolume:
    """Build the similarity volume between two feature maps.

    data[c, j, i, y, x] compares f1's position (x, y) against f2's position
    (x + d*(i-k), y + d*(j-k)) (feature-grid cells); candidates falling outside
    f2 contribute exactly 0 in every sub-vector channel. Values are clamped to
    [-1, 1]; the clamp is treated as identity in the backward pass.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"build_cost_volume: feature shapes {f1.shape} != {f2.shape}")
    if f1.ndim != 3:
        raise ShapeError(f"build_cost_volume: expected (C, h, w) features, got rank {f1.ndim}")
    if f1.shape[0] % spec.subvectors:
        raise ShapeError(
            f"build_cost_volume: {f1.shape[0]} channels not divisible by {spec.subvectors} sub-vectors"
        )
    c_sub, k, d, side = spec.subvectors, spec.radius, spec.dilation, spec.side
    x1, x2 = f1.f64(), f2.f64()
    _, h, w = x1.shape
    f1n, n1 = _normalized_subvectors(x1, c_sub)
    f2n, n2 = _normalized_subvectors(x2, c_sub)

    vol = np.zeros((c_sub, side, side, h, w), dtype=np.float64)
    ranges = []
    for jv in range(side):
        dy = d * (jv - k)
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        for iu in range(side):
            dx = d * (iu - k)
            xs0, xs1 = max(0, -dx), min(w, w - dx)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            ranges.append((jv, iu, dy, dx, ys0, ys1, xs0, xs1))
            a = f1n[ys0:ys1, xs0:xs1]
            b = f2n[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
            plane = (a * b).sum(axis=-1)
            np.clip(plane, -1.0, 1.0, out=plane)
            vol[:, jv, iu, ys0:ys1, xs0:xs1] = plane.transpose(2, 0, 1)

    out = Tensor(vol)

    def make_backward(needs):
        need1, need2 = needs

        def bwd(g):
            g1n = np.zeros_like(f1n) if need1 else None
            g2n = np.zeros_like(f2n) if need2 else None
            for jv, iu, dy, dx, ys0, ys1, xs0, xs1 in ranges:
                gp = g[:, jv, iu, ys0:ys1, xs0:xs1].transpose(1, 2, 0)[..., None]
                if need1:
                    g1n[ys0:ys1, xs0:xs1] += gp * f2n[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
                if need2:
                    g2n[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx] += gp * f1n[ys0:ys1, xs0:xs1]

            def through_norm(gn, xn, n):
                dot = (xn * gn).sum(axis=-1, keepdims=True)
                gx = np.where(n > 0.0, (gn - xn * dot) / np.where(n == 0.0, 1.0, n), 0.0)
                # back to (C_feat, h, w)
                hh, ww, cs, sub = gx.shape
                return gx.transpose(2, 3, 0, 1).reshape(cs * sub, hh, ww)

            return (
                through_norm(g1n, f1n, n1) if need1 else None,
                through_norm(g2n, f2n, n2) if need2 else None,
            )

        return bwd

    _maybe_record(out, (f1, f2), make_backward)
    return CostVolume(spec=spec, data=out)


def assemble_stack(volumes: list[CostVolume]) -> CostVolumeStack:
    """Concatenate the seven canonical volumes into the decoder's input stack.

    The stride-2 volume is spatially average-pooled by 4 to the stride-8 grid,
    the volumes are concatenated along the sub-vector channel axis in
    canonical order, and the two displacement axes are collapsed row-major
    (vertical outer) into a single depth axis of side^2 entries.
    """
    specs = tuple(v.spec for v in volumes)
    if specs != CANONICAL_SPECS:
        expected = ", ".join(s.label() for s in CANONICAL_SPECS)
        got = ", ".join(s.label() for s in specs)
        raise ShapeError(f"assemble_stack: expected volumes [{expected}] in order, got [{got}]")
    side = CANONICAL_SPECS[0].side
    fine = volumes[0].data
    pooled = ops.spatial_subsample(fine, 4)
    parts = [pooled] + [v.data for v in volumes[1:]]
    base = parts[0].shape[1:]
    for p, s in zip(parts, specs):
        if p.shape[1:] != base:
            raise ShapeError(
                f"assemble_stack: volume {s.label()} has grid {p.shape[1:]}, expected {base}"
            )
    stacked = ops.concat(parts, axis=0)
    c_total = stacked.shape[0]
    h, w = stacked.shape[3], stacked.shape[4]
    data = ops.reshape(stacked, (c_total, side * side, h, w))
    return CostVolumeStack(data=data, specs=specs)


def spec_from_label(label: str) -> CostVolumeSpec:
    """Parse a spec label like 's8d21' into one of the canonical specs."""
    for s in CANONICAL_SPECS:
        if s.label() == label:
            return s
    valid = ", ".join(s.label() for s in CANONICAL_SPECS)
    raise ValueError(f"unknown cost-volume spec {label!r}; valid specs: {valid}")


# --- debug dump format: magic "DCV1", shape as 5 little-endian u32, f64 LE ---

DUMP_MAGIC = b"DCV1"


def write_volume_dump(path: str, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 5:
        raise ShapeError(f"volume dump requires a rank-5 array, got rank {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<5I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_volume_dump(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DUMP_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {DUMP_MAGIC!r}")
        shape = struct.unpack("<5I", fh.read(20))
        payload = fh.read()
    count = int(np.prod(shape))
    data = np.frombuffer(payload, dtype="<f8", count=count)
    if data.size != count:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(shape).copy()
