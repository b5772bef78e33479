"""Cost-volume filtering and flow synthesis.

The stacked cost volume is filtered by a 3D U-Net (ASPP bottleneck) into
per-dilation logits over the collapsed displacement axis. Softmax turns those
into interpolation weights; each dilation's expected displacement is a flow
hypothesis, always inside the convex hull of its candidate set. A small 2D
CNN looks at the hypotheses and their weight entropies, softmax-fuses them
into a coarse flow, and two cascaded convex-upsampling stages (4x then 2x)
bring it to input resolution. Flow values are in input-image pixels at every
stage, so no magnitude rescaling happens anywhere.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .cost_volume import (
    CANONICAL_SPECS,
    STACK_CHANNELS,
    STACK_DEPTH,
    CostVolumeStack,
    build_cost_volume,
    assemble_stack,
)
from .encoder import LRELU_SLOPE, ImagePair, encode
from .ops import ConvSpec
from .tensor import ShapeError, Tensor

D_HYPOTHESES = len(CANONICAL_SPECS)            # 7
UNET_WIDTHS = (32, 64, 96)
ASPP_BRANCH_WIDTH = 48
ASPP_DILATIONS = (2, 4, 8)
FUSION_WIDTHS = (64, 64, 32)
FUSION_IN_CHANNELS = 3 * D_HYPOTHESES          # (u, v, entropy) per dilation
UPSAMPLE_HEAD_WIDTH = 96
UP2_GUIDE_WIDTH = 32
ENTROPY_EPS = 1e-12


@dataclass
class HypothesisSet:
    """Per-dilation interpolation weights, flow hypotheses, and entropies.

    omega: (D, side^2, H', W') softmax over the displacement axis;
    flows: (D, 2, H', W') in input-image pixels; entropy: (D, H', W') nats.
    """

    omega: Tensor
    flows: Tensor
    entropy: Tensor


@dataclass
class FusionOutput:
    """Fusion weights over hypotheses plus the coarse and full-resolution flow."""

    alpha: Tensor
    flow_coarse: Tensor
    flow_full: Tensor


def _conv3(x, params, prefix, spec):
    return ops.conv3d(x, params[prefix + ".weight"], params[prefix + ".bias"], spec)


def _conv2(x, params, prefix, spec):
    return ops.conv2d(x, params[prefix + ".weight"], params[prefix + ".bias"], spec)


def aspp(x: Tensor, params, dilations: tuple[int, ...] = ASPP_DILATIONS) -> Tensor:
    """Parallel dilated 3D branches plus a pointwise branch, concatenated and projected.

    Branch convolutions are linear; the single activation sits after the
    projection. Dilation applies to the spatial axes only (the depth axis
    keeps dilation 1). Shape-preserving.
    """
    c = x.shape[0]
    parts = [_conv3(x, params, "unet.aspp.point", ConvSpec(c, ASPP_BRANCH_WIDTH, (1, 1, 1)))]
    for r in dilations:
        spec = ConvSpec(c, ASPP_BRANCH_WIDTH, (3, 3, 3), 1, (1, r, r), (1, r, r))
        parts.append(_conv3(x, params, f"unet.aspp.d{r}", spec))
    merged = ops.concat(parts, axis=0)
    projected = _conv3(merged, params, "unet.aspp.project",
                       ConvSpec(ASPP_BRANCH_WIDTH * (1 + len(dilations)), c, (1, 1, 1)))
    return ops.leaky_relu(projected, LRELU_SLOPE)


def unet3d(stack: CostVolumeStack, params) -> Tensor:
    """Filter the cost-volume stack into (D, side^2, H', W') interpolation logits."""
    x = stack.data
    if x.ndim != 4 or x.shape[0] != STACK_CHANNELS or x.shape[1] != STACK_DEPTH:
        raise ShapeError(
            f"unet3d: stack shape {x.shape} != ({STACK_CHANNELS}, {STACK_DEPTH}, H', W')"
        )
    w0, w1, w2 = UNET_WIDTHS
    x0 = ops.leaky_relu(_conv3(x, params, "unet.stem",
                               ConvSpec(STACK_CHANNELS, w0, (3, 3, 3), 1, 1)), LRELU_SLOPE)
    x1 = ops.leaky_relu(_conv3(x0, params, "unet.down1",
                               ConvSpec(w0, w1, (3, 3, 3), 2, 1)), LRELU_SLOPE)
    x2 = ops.leaky_relu(_conv3(x1, params, "unet.down2",
                               ConvSpec(w1, w2, (3, 3, 3), 2, 1)), LRELU_SLOPE)
    xb = aspp(x2, params)
    u1 = ops.conv_transpose3d(xb, params["unet.up1.weight"], params["unet.up1.bias"],
                              ConvSpec(w2, w1, (3, 3, 3), 2, 1), out_extents=x1.shape[1:])
    u1 = ops.leaky_relu(u1, LRELU_SLOPE)
    u1 = ops.leaky_relu(_conv3(ops.concat([u1, x1], axis=0), params, "unet.fuse1",
                               ConvSpec(2 * w1, w1, (3, 3, 3), 1, 1)), LRELU_SLOPE)
    u0 = ops.conv_transpose3d(u1, params["unet.up2.weight"], params["unet.up2.bias"],
                              ConvSpec(w1, w0, (3, 3, 3), 2, 1), out_extents=x0.shape[1:])
    u0 = ops.leaky_relu(u0, LRELU_SLOPE)
    u0 = ops.leaky_relu(_conv3(ops.concat([u0, x0], axis=0), params, "unet.fuse0",
                               ConvSpec(2 * w0, w0, (3, 3, 3), 1, 1)), LRELU_SLOPE)
    return _conv3(u0, params, "unet.head", ConvSpec(w0, D_HYPOTHESES, (1, 1, 1)))


def interpolation_weights(logits: Tensor) -> Tensor:
    """Softmax over the displacement axis, independently per dilation and position."""
    return ops.softmax(logits, axis=1)


def flow_hypotheses(omega: Tensor, stack: CostVolumeStack) -> Tensor:
    """Expected displacement per dilation: flows[d] = sum_i omega[d, i] * table_d[i]."""
    return ops.flows_from_weights(omega, stack.displacement_tables())


def entropy_map(omega: Tensor) -> Tensor:
    """Entropy of the interpolation weights per (dilation, position), in nats."""
    return ops.entropy_over_axis(omega, axis=1, eps=ENTROPY_EPS)


def fuse(hyps: HypothesisSet, params):
    """Blend the D hypotheses with learned per-pixel weights.

    The fusion CNN reads, per dilation, the two flow channels and the weight
    entropy (3*D channels total) and emits D logits; alpha is their softmax
    and the coarse flow the alpha-weighted hypothesis blend. Also returns the
    penultimate 32-channel features, which guide the 4x upsampling head.
    """
    d, _, h, w = hyps.flows.shape
    if d != D_HYPOTHESES:
        raise ShapeError(f"fuse: expected {D_HYPOTHESES} hypotheses, got {d}")
    ent = ops.reshape(hyps.entropy, (d, 1, h, w))
    merged = ops.reshape(ops.concat([hyps.flows, ent], axis=1), (3 * d, h, w))
    w0, w1, w2 = FUSION_WIDTHS
    y = ops.leaky_relu(_conv2(merged, params, "fusion.c0",
                              ConvSpec(3 * d, w0, (3, 3), 1, 1)), LRELU_SLOPE)
    y = ops.leaky_relu(_conv2(y, params, "fusion.c1", ConvSpec(w0, w1, (3, 3), 1, 1)), LRELU_SLOPE)
    feat = ops.leaky_relu(_conv2(y, params, "fusion.c2", ConvSpec(w1, w2, (3, 3), 1, 1)), LRELU_SLOPE)
    logits = _conv2(feat, params, "fusion.c3", ConvSpec(w2, d, (3, 3), 1, 1))
    alpha = ops.softmax(logits, axis=0)
    flow_coarse = ops.convex_blend(alpha, hyps.flows)
    return alpha, flow_coarse, feat


def convex_upsample(flow: Tensor, guide: Tensor, factor: int, params, prefix: str) -> Tensor:
    """Upsample a flow field by a factor of 2 or 4 via learned convex combinations.

    A weight head on `guide` predicts factor^2 * 9 logits per coarse cell;
    softmax over the 9 neighbors makes every fine pixel a convex combination
    of its coarse 3x3 neighborhood. Displacements are already in input-image
    pixels, so values pass through unscaled.
    """
    if factor not in (2, 4):
        raise ValueError(f"convex_upsample: factor must be 2 or 4, got {factor}")
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"convex_upsample: flow must be (2, h, w), got {flow.shape}")
    g_ch = guide.shape[0]
    h, w = flow.shape[1:]
    y = ops.leaky_relu(_conv2(guide, params, prefix + ".head",
                              ConvSpec(g_ch, UPSAMPLE_HEAD_WIDTH, (3, 3), 1, 1)), LRELU_SLOPE)
    logits = _conv2(y, params, prefix + ".mask",
                    ConvSpec(UPSAMPLE_HEAD_WIDTH, 9 * factor * factor, (1, 1)))
    weights = ops.softmax(ops.reshape(logits, (9, factor, factor, h, w)), axis=0)
    return ops.convex_combine(flow, weights)


def forward(pair: ImagePair, params):
    """Full pipeline: images -> pyramid -> volumes -> hypotheses -> fused, upsampled flow.

    Returns (FusionOutput, HypothesisSet, timings) where timings is a phase ->
    milliseconds breakdown over encode / cost_volume / decoder / upsample.
    """
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    p1 = encode(pair.first, params)
    p2 = encode(pair.second, params)
    t1 = time.perf_counter()
    timings["encode"] = (t1 - t0) * 1e3

    volumes = [build_cost_volume(p1.f_s2, p2.f_s2, CANONICAL_SPECS[0])]
    for spec in CANONICAL_SPECS[1:]:
        volumes.append(build_cost_volume(p1.f_s8, p2.f_s8, spec))
    stack = assemble_stack(volumes)
    t2 = time.perf_counter()
    timings["cost_volume"] = (t2 - t1) * 1e3

    logits = unet3d(stack, params)
    omega = interpolation_weights(logits)
    flows = flow_hypotheses(omega, stack)
    ent = entropy_map(omega)
    hyps = HypothesisSet(omega=omega, flows=flows, entropy=ent)
    alpha, flow_coarse, fusion_feat = fuse(hyps, params)
    t3 = time.perf_counter()
    timings["decoder"] = (t3 - t2) * 1e3

    guide4 = ops.concat([fusion_feat, flow_coarse], axis=0)
    flow_mid = convex_upsample(flow_coarse, guide4, 4, params, "up4")
    g = ops.leaky_relu(_conv2(flow_mid, params, "up2.g0",
                              ConvSpec(2, UP2_GUIDE_WIDTH, (3, 3), 1, 1)), LRELU_SLOPE)
    g = ops.leaky_relu(_conv2(g, params, "up2.g1",
                              ConvSpec(UP2_GUIDE_WIDTH, UP2_GUIDE_WIDTH, (3, 3), 1, 1)), LRELU_SLOPE)
    flow_full = convex_upsample(flow_mid, g, 2, params, "up2")
    t4 = time.perf_counter()
    timings["upsample"] = (t4 - t3) * 1e3

    out = FusionOutput(alpha=alpha, flow_coarse=flow_coarse, flow_full=flow_full)
    return out, hyps, timings


def hypothesis_bounds() -> np.ndarray:
    """Componentwise bound s*d*k on |flow| for each canonical hypothesis, shape (D,)."""
    return np.array([s.displacement_step * s.radius for s in CANONICAL_SPECS], dtype=np.float64)


def param_shapes() -> dict[str, tuple[int, ...]]:
    """Name -> shape for every decoder-side parameter."""
    w0, w1, w2 = UNET_WIDTHS
    shapes: dict[str, tuple[int, ...]] = {
        "unet.stem.weight": (w0, STACK_CHANNELS, 3, 3, 3),
        "unet.stem.bias": (w0,),
        "unet.down1.weight": (w1, w0, 3, 3, 3),
        "unet.down1.bias": (w1,),
        "unet.down2.weight": (w2, w1, 3, 3, 3),
        "unet.down2.bias": (w2,),
        "unet.aspp.point.weight": (ASPP_BRANCH_WIDTH, w2, 1, 1, 1),
        "unet.aspp.point.bias": (ASPP_BRANCH_WIDTH,),
        "unet.aspp.project.weight": (w2, ASPP_BRANCH_WIDTH * (1 + len(ASPP_DILATIONS)), 1, 1, 1),
        "unet.aspp.project.bias": (w2,),
        # transposed convs store weights as (in, out, *k)
        "unet.up1.weight": (w2, w1, 3, 3, 3),
        "unet.up1.bias": (w1,),
        "unet.fuse1.weight": (w1, 2 * w1, 3, 3, 3),
        "unet.fuse1.bias": (w1,),
        "unet.up2.weight": (w1, w0, 3, 3, 3),
        "unet.up2.bias": (w0,),
        "unet.fuse0.weight": (w0, 2 * w0, 3, 3, 3),
        "unet.fuse0.bias": (w0,),
        "unet.head.weight": (D_HYPOTHESES, w0, 1, 1, 1),
        "unet.head.bias": (D_HYPOTHESES,),
    }
    for r in ASPP_DILATIONS:
        shapes[f"unet.aspp.d{r}.weight"] = (ASPP_BRANCH_WIDTH, w2, 3, 3, 3)
        shapes[f"unet.aspp.d{r}.bias"] = (ASPP_BRANCH_WIDTH,)
    f0, f1, f2 = FUSION_WIDTHS
    shapes.update({
        "fusion.c0.weight": (f0, FUSION_IN_CHANNELS, 3, 3),
        "fusion.c0.bias": (f0,),
        "fusion.c1.weight": (f1, f0, 3, 3),
        "fusion.c1.bias": (f1,),
        "fusion.c2.weight": (f2, f1, 3, 3),
        "fusion.c2.bias": (f2,),
        "fusion.c3.weight": (D_HYPOTHESES, f2, 3, 3),
        "fusion.c3.bias": (D_HYPOTHESES,),
        "up4.head.weight": (UPSAMPLE_HEAD_WIDTH, f2 + 2, 3, 3),
        "up4.head.bias": (UPSAMPLE_HEAD_WIDTH,),
        "up4.mask.weight": (9 * 16, UPSAMPLE_HEAD_WIDTH, 1, 1),
        "up4.mask.bias": (9 * 16,),
        "up2.g0.weight": (UP2_GUIDE_WIDTH, 2, 3, 3),
        "up2.g0.bias": (UP2_GUIDE_WIDTH,),
        "up2.g1.weight": (UP2_GUIDE_WIDTH, UP2_GUIDE_WIDTH, 3, 3),
        "up2.g1.bias": (UP2_GUIDE_WIDTH,),
        "up2.head.weight": (UPSAMPLE_HEAD_WIDTH, UP2_GUIDE_WIDTH, 3, 3),
        "up2.head.bias": (UPSAMPLE_HEAD_WIDTH,),
        "up2.mask.weight": (9 * 4, UPSAMPLE_HEAD_WIDTH, 1, 1),
        "up2.mask.bias": (9 * 4,),
    })
    return shapes
