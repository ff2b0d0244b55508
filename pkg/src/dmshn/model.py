"""The multi-scale hierarchical network: pyramid, forward graph, variants.

One network runs three encoder/decoder pairs over a 3-level bilinear image
pyramid, coarsest first. Each decoder emits a 3-channel residual image that
is upsampled and added to the next finer pyramid level before encoding, and
each encoder's features are summed with the upsampled features of the level
below (the "level residual" connections the ablation flag removes). The
stacked variant feeds one network's full-resolution output through a second
network with its own weights.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import BadDimensions, ShapeMismatch
from .layers import (
    Conv2dLayer,
    ConvT2dLayer,
    ResidualBlock,
    conv2d,
    conv_transpose2d,
    downsample2x,
    residual_block,
    resize_bilinear,
    upsample2x,
)
from .tensor import Rng, Tensor

DEFAULT_CHANNELS = (32, 64, 128)
PYRAMID_LEVELS = 3
OUT_CHANNELS = 3


class EncoderNet:
    """stem conv + three levels of two residual blocks, 4x total downscale."""

    def __init__(self, channels, in_ch: int = 3, rng: Rng | None = None):
        c1, c2, c3 = channels
        self.in_ch = in_ch
        self.stem = Conv2dLayer(in_ch, c1, rng=rng)
        self.level1 = [ResidualBlock(c1, rng=rng), ResidualBlock(c1, rng=rng)]
        self.down1 = Conv2dLayer(c1, c2, stride=2, rng=rng)
        self.level2 = [ResidualBlock(c2, rng=rng), ResidualBlock(c2, rng=rng)]
        self.down2 = Conv2dLayer(c2, c3, stride=2, rng=rng)
        self.level3 = [ResidualBlock(c3, rng=rng), ResidualBlock(c3, rng=rng)]

    def forward(self, x: Tensor) -> Tensor:
        x = conv2d(x, self.stem)
        for block in self.level1:
            x = residual_block(x, block)
        x = conv2d(x, self.down1)
        for block in self.level2:
            x = residual_block(x, block)
        x = conv2d(x, self.down2)
        for block in self.level3:
            x = residual_block(x, block)
        return x

    def named_params(self, prefix: str):
        yield from self.stem.named_params(prefix + ".stem")
        for i, b in enumerate(self.level1):
            yield from b.named_params(f"{prefix}.level1.{i}")
        yield from self.down1.named_params(prefix + ".down1")
        for i, b in enumerate(self.level2):
            yield from b.named_params(f"{prefix}.level2.{i}")
        yield from self.down2.named_params(prefix + ".down2")
        for i, b in enumerate(self.level3):
            yield from b.named_params(f"{prefix}.level3.{i}")


class DecoderNet:
    """Mirror of the encoder; transposed convs restore resolution, 3-ch head."""

    def __init__(self, channels, convt_kernel: int = 4, rng: Rng | None = None):
        c1, c2, c3 = channels
        self.level3 = [ResidualBlock(c3, rng=rng), ResidualBlock(c3, rng=rng)]
        self.up1 = ConvT2dLayer(c3, c2, kernel=convt_kernel, rng=rng)
        self.level2 = [ResidualBlock(c2, rng=rng), ResidualBlock(c2, rng=rng)]
        self.up2 = ConvT2dLayer(c2, c1, kernel=convt_kernel, rng=rng)
        self.level1 = [ResidualBlock(c1, rng=rng), ResidualBlock(c1, rng=rng)]
        self.head = Conv2dLayer(c1, OUT_CHANNELS, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.level3:
            x = residual_block(x, block)
        x = conv_transpose2d(x, self.up1)
        for block in self.level2:
            x = residual_block(x, block)
        x = conv_transpose2d(x, self.up2)
        for block in self.level1:
            x = residual_block(x, block)
        return conv2d(x, self.head)

    def named_params(self, prefix: str):
        for i, b in enumerate(self.level3):
            yield from b.named_params(f"{prefix}.level3.{i}")
        yield from self.up1.named_params(prefix + ".up1")
        for i, b in enumerate(self.level2):
            yield from b.named_params(f"{prefix}.level2.{i}")
        yield from self.up2.named_params(prefix + ".up2")
        for i, b in enumerate(self.level1):
            yield from b.named_params(f"{prefix}.level1.{i}")
        yield from self.head.named_params(prefix + ".head")


class DmshnParams:
    """All learnable weights of one network: 3 encoders + 3 decoders.

    Levels share architecture but never weights. `use_level_residuals`
    toggles the encoder-feature aggregation adds; `depth_input` widens every
    encoder stem to accept a 4th (depth) channel.
    """

    def __init__(self, channels=DEFAULT_CHANNELS, use_level_residuals: bool = True,
                 depth_input: bool = False, convt_kernel: int = 4,
                 rng: Rng | None = None):
        self.channels = tuple(channels)
        self.use_level_residuals = use_level_residuals
        self.depth_input = depth_input
        self.convt_kernel = convt_kernel
        in_ch = 4 if depth_input else 3
        self.in_ch = in_ch
        self.encoders = [EncoderNet(channels, in_ch, rng) for _ in range(PYRAMID_LEVELS)]
        self.decoders = [DecoderNet(channels, convt_kernel, rng) for _ in range(PYRAMID_LEVELS)]

    def named_params(self, prefix: str = ""):
        for i in range(PYRAMID_LEVELS):
            yield from self.encoders[i].named_params(f"{prefix}enc{i + 1}")
            yield from self.decoders[i].named_params(f"{prefix}dec{i + 1}")

    def config(self) -> dict:
        return {
            "channels": list(self.channels),
            "use_level_residuals": self.use_level_residuals,
            "depth_input": self.depth_input,
            "convt_kernel": self.convt_kernel,
        }


@dataclass
class PyramidInput:
    """Three image levels; each is an exact 2x downsample of the previous."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != PYRAMID_LEVELS:
            raise BadDimensions(f"pyramid needs {PYRAMID_LEVELS} levels")


def build_pyramid(image: Tensor) -> PyramidInput:
    """Bilinear 3-level pyramid; level-0 dims must be divisible by 16."""
    n, c, h, w = image.shape
    if h % 16 or w % 16:
        raise BadDimensions(f"pyramid input dims must be divisible by 16; got {h}x{w}")
    l2 = downsample2x(image)
    l3 = downsample2x(l2)
    return PyramidInput([image, l2, l3])


def attach_depth(p: PyramidInput, depth: Tensor) -> PyramidInput:
    """Concatenate a [0,1] depth map, resized per level, as a 4th channel."""
    n, c, h, w = depth.shape
    if c != 1:
        raise ShapeMismatch(f"depth map must have 1 channel; got {c}")
    if (n, h, w) != (p.levels[0].shape[0],) + p.levels[0].shape[2:]:
        raise ShapeMismatch(
            f"depth {depth.shape} does not match pyramid level 0 {p.levels[0].shape}")
    out = []
    for level in p.levels:
        d = resize_bilinear(depth, level.shape[2], level.shape[3])
        out.append(T.concat_channels([level, d]))
    return PyramidInput(out)


def dmshn_forward(p: PyramidInput, params: DmshnParams, clamp_output: bool = False) -> Tensor:
    """Coarse-to-fine forward pass; output spatial dims equal level 0's.

    clamp_output pins the prediction to [0, 1] and belongs to inference only;
    the training loss path always sees the raw decoder output.
    """
    i1, i2, i3 = p.levels
    expected = 4 if params.depth_input else 3
    if i1.shape[1] != expected:
        raise ShapeMismatch(
            f"pyramid has {i1.shape[1]} channels, model expects {expected}")
    enc, dec = params.encoders, params.decoders

    f3 = enc[2].forward(i3)
    res3 = dec[2].forward(f3)

    g2 = enc[1].forward(T.add(i2, upsample2x(res3)))
    f2 = T.add(g2, upsample2x(f3)) if params.use_level_residuals else g2
    res2 = dec[1].forward(f2)

    g1 = enc[0].forward(T.add(i1, upsample2x(res2)))
    f1 = T.add(g1, upsample2x(f2)) if params.use_level_residuals else g1
    out = dec[0].forward(f1)
    return T.clamp01(out) if clamp_output else out


def stacked_forward(p: PyramidInput, net1: DmshnParams, net2: DmshnParams,
                    clamp_output: bool = False) -> Tensor:
    """Two networks composed end-to-end; the handoff is the raw net1 output."""
    mid = dmshn_forward(p, net1)
    return dmshn_forward(build_pyramid(mid), net2, clamp_output=clamp_output)


def count_params(params: DmshnParams) -> int:
    """Exact number of learnable scalars."""
    return sum(t.data.size for _, t in params.named_params())
