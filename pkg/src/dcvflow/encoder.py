"""Image feature encoder.

A single lightweight residual CNN applied to both input images, producing
L2-normalized feature maps at stride 2 (128 channels, for the fine cost
volume) and stride 8 (256 channels, for the dilated volumes). Instance
normalization in every residual block; leaky ReLU slope 0.1 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ops
from .ops import ConvSpec
from .tensor import ShapeError, Tensor

STEM_WIDTH = 64
STAGE_WIDTHS = (64, 96, 128)
OUT_CHANNELS_S2 = 128
OUT_CHANNELS_S8 = 256
L2_EPS = 1e-8
LRELU_SLOPE = 0.1


@dataclass
class ImagePair:
    """Two (3, H, W) images with values in [-1, 1]; H and W divisible by 8."""

    first: Tensor
    second: Tensor

    def __post_init__(self):
        for label, img in (("first", self.first), ("second", self.second)):
            if img.ndim != 3 or img.shape[0] != 3:
                raise ShapeError(f"{label} image must be (3, H, W), got {img.shape}")
        if self.first.shape != self.second.shape:
            raise ShapeError(
                f"image shapes differ: {self.first.shape} vs {self.second.shape}"
            )
        _, h, w = self.first.shape
        if h % 8 or w % 8:
            raise ShapeError(f"image extents must be divisible by 8, got {h}x{w}")

    @property
    def height(self) -> int:
        return self.first.shape[1]

    @property
    def width(self) -> int:
        return self.first.shape[2]


@dataclass
class FeaturePyramid:
    """Encoder outputs: f_s2 (128, H/2, W/2) and f_s8 (256, H/8, W/8), L2-normed."""

    f_s2: Tensor
    f_s8: Tensor


def _conv(x: Tensor, params, prefix: str, spec: ConvSpec) -> Tensor:
    return ops.conv2d(x, params[prefix + ".weight"], params[prefix + ".bias"], spec)


def _norm(x: Tensor, params, prefix: str) -> Tensor:
    return ops.instance_norm2d(x, params[prefix + ".gain"], params[prefix + ".shift"])


def _residual_block(x: Tensor, params, prefix: str, c_in: int, c_out: int, stride: int) -> Tensor:
    y = _conv(x, params, prefix + ".conv1", ConvSpec(c_in, c_out, (3, 3), stride, 1))
    y = ops.leaky_relu(_norm(y, params, prefix + ".norm1"), LRELU_SLOPE)
    y = _conv(y, params, prefix + ".conv2", ConvSpec(c_out, c_out, (3, 3), 1, 1))
    y = _norm(y, params, prefix + ".norm2")
    if stride == 1 and c_in == c_out:
        skip = x
    else:
        skip = _conv(x, params, prefix + ".skip.conv", ConvSpec(c_in, c_out, (1, 1), stride, 0))
        skip = _norm(skip, params, prefix + ".skip.norm")
    return ops.leaky_relu(ops.add(y, skip), LRELU_SLOPE)


def encode(image: Tensor, params) -> FeaturePyramid:
    """Extract the stride-2/stride-8 feature pyramid of one image."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"encode expects a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    if h % 8 or w % 8:
        raise ShapeError(f"encode: image extents must be divisible by 8, got {h}x{w}")

    x = _conv(image, params, "encoder.stem.conv", ConvSpec(3, STEM_WIDTH, (7, 7), 2, 3))
    x = ops.leaky_relu(_norm(x, params, "encoder.stem.norm"), LRELU_SLOPE)

    widths = (STEM_WIDTH, *STAGE_WIDTHS)
    for stage, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        stride = 1 if stage == 1 else 2
        x = _residual_block(x, params, f"encoder.s{stage}.b0", c_in, c_out, stride)
        x = _residual_block(x, params, f"encoder.s{stage}.b1", c_out, c_out, 1)
        if stage == 1:
            s2 = _conv(x, params, "encoder.head2",
                       ConvSpec(STAGE_WIDTHS[0], OUT_CHANNELS_S2, (1, 1)))
    s8 = _conv(x, params, "encoder.head8",
               ConvSpec(STAGE_WIDTHS[2], OUT_CHANNELS_S8, (1, 1)))

    return FeaturePyramid(
        f_s2=ops.l2norm_channels(s2, L2_EPS),
        f_s8=ops.l2norm_channels(s8, L2_EPS),
    )


l2norm_channels = ops.l2norm_channels


def param_shapes() -> dict[str, tuple[int, ...]]:
    """Name -> shape for every encoder parameter."""
    shapes: dict[str, tuple[int, ...]] = {
        "encoder.stem.conv.weight": (STEM_WIDTH, 3, 7, 7),
        "encoder.stem.conv.bias": (STEM_WIDTH,),
        "encoder.stem.norm.gain": (STEM_WIDTH,),
        "encoder.stem.norm.shift": (STEM_WIDTH,),
    }
    widths = (STEM_WIDTH, *STAGE_WIDTHS)
    for stage, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        stride = 1 if stage == 1 else 2
        for b, (ci, st) in enumerate(((c_in, stride), (c_out, 1))):
            p = f"encoder.s{stage}.b{b}"
            shapes[p + ".conv1.weight"] = (c_out, ci, 3, 3)
            shapes[p + ".conv1.bias"] = (c_out,)
            shapes[p + ".norm1.gain"] = (c_out,)
            shapes[p + ".norm1.shift"] = (c_out,)
            shapes[p + ".conv2.weight"] = (c_out, c_out, 3, 3)
            shapes[p + ".conv2.bias"] = (c_out,)
            shapes[p + ".norm2.gain"] = (c_out,)
            shapes[p + ".norm2.shift"] = (c_out,)
            if not (st == 1 and ci == c_out):
                shapes[p + ".skip.conv.weight"] = (c_out, ci, 1, 1)
                shapes[p + ".skip.conv.bias"] = (c_out,)
                shapes[p + ".skip.norm.gain"] = (c_out,)
                shapes[p + ".skip.norm.shift"] = (c_out,)
    shapes["encoder.head2.weight"] = (OUT_CHANNELS_S2, STAGE_WIDTHS[0], 1, 1)
    shapes["encoder.head2.bias"] = (OUT_CHANNELS_S2,)
    shapes["encoder.head8.weight"] = (OUT_CHANNELS_S8, STAGE_WIDTHS[2], 1, 1)
    shapes["encoder.head8.bias"] = (OUT_CHANNELS_S8,)
    return shapes
