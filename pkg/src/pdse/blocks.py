"""Attention and deformable-sampling blocks used on the final pyramid.

The composite block keeps its input and output channel counts equal so it can
sit on a residual connection: a 1x1 entry bottleneck halves the width, a 3x3
deformable convolution adapts the sampling grid to the local geometry, a 1x1
exit restores the width, and the result is gated by channel (squeeze/excite)
and spatial attention before being added back to the input.

Initialization is chosen so a fresh block is a near-identity: the offset
predictor and both attention gate layers start at exact zeros, which pins the
offsets to the regular grid and both gates to 0.5.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .nn import Conv2d, Linear, Module, Parameter
from .tensor import ShapeError, Tensor


class SqueezeExcitation(Module):
    """Channel attention: squeeze to per-channel means, excite, reweight.

    The excitation path is ``sigmoid(W2 @ relu(W1 @ squeeze))`` with
    W1: (C/r, C) and W2: (C, C/r), no biases. W2 starts at zero so the
    initial gate is exactly 0.5 for every channel.
    """

    def __init__(self, channels: int, ratio: int, rng):
        super().__init__()
        if channels % ratio != 0:
            raise ShapeError(f"squeeze-excitation: ratio {ratio} does not divide {channels} channels")
        self.channels = channels
        self.ratio = ratio
        hidden = channels // ratio
        self.w1 = Linear(channels, hidden, rng, bias=False, init="he")
        self.w2 = Linear(hidden, channels, rng, bias=False, init="zeros")

    def squeeze(self, x: Tensor) -> Tensor:
        return F.global_avg_pool(x)

    def excitation(self, x: Tensor) -> Tensor:
        return self.w2(self.w1(self.squeeze(x)).relu()).sigmoid()

    def forward(self, x: Tensor, excitation: Tensor | None = None) -> Tensor:
        """Reweight channels; ``excitation`` (N,C) overrides the learned gate
        when supplied (analysis/testing seam)."""
        if x.shape[1] != self.channels:
            raise ShapeError(f"squeeze-excitation: input has {x.shape[1]} channels, block expects {self.channels}")
        e = self.excitation(x) if excitation is None else excitation
        n, c = e.shape
        return x * e.reshape(n, c, 1, 1)


class LocalAttention(Module):
    """Spatial gate: sigmoid of a 1x1 conv to a single channel, broadcast
    over channels. Zero-initialized, so the initial gate is uniformly 0.5."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.conv = Conv2d(channels, 1, 1, rng, init="zeros", bias=True)

    def forward(self, x: Tensor) -> Tensor:
        return x * self.conv(x).sigmoid()


class DeformableConv2d(Module):
    """3x3 convolution sampling at positions displaced by predicted offsets.

    A sibling 3x3 conv predicts 2*3*3 = 18 offset channels per output
    position (delta-y, delta-x per kernel tap, row-major taps). The offset
    predictor is initialized to exact zeros, so a fresh layer reproduces a
    plain zero-padded conv2d with the same kernel.
    """

    KERNEL = 3

    def __init__(self, in_channels: int, out_channels: int, rng, stride: int = 1,
                 padding: int = 1, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        k = self.KERNEL
        fan_in = in_channels * k * k
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, k, k)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.offset_conv = Conv2d(in_channels, 2 * k * k, k, rng, stride=stride,
                                  padding=padding, init="zeros", bias=True)
        if self.offset_conv.out_channels != 2 * k * k:
            raise ShapeError(f"deformable conv: offset predictor must emit {2 * k * k} channels")

    def forward(self, x: Tensor) -> Tensor:
        offsets = self.offset_conv(x)
        return F.deform_conv2d(x, self.weight, offsets, self.bias,
                               stride=self.stride, padding=self.padding)


class DSEBlock(Module):
    """Residual deformable squeeze-and-excitation block (shape preserving).

    forward: ``out = x + local(se(exit(deform(relu(entry(x))))))`` where
    entry/exit are the 1x1 bottleneck pair (C -> C/2 -> C). Channel attention
    is applied first, the spatial gate second, folding local detail into the
    globally reweighted map. With every non-residual weight zeroed the block
    is the exact identity.
    """

    def __init__(self, channels: int, rng, se_ratio: int = 16):
        super().__init__()
        if channels % 2 != 0:
            raise ShapeError(f"dse block: channel count {channels} must be even for the C/2 bottleneck")
        mid = channels // 2
        self.channels = channels
        self.entry = Conv2d(channels, mid, 1, rng, init="he", bias=True)
        self.deform = DeformableConv2d(mid, mid, rng, stride=1, padding=1, bias=True)
        self.exit = Conv2d(mid, channels, 1, rng, init="he", bias=True)
        self.se = SqueezeExcitation(channels, se_ratio, rng)
        self.local = LocalAttention(channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"dse block: input has {x.shape[1]} channels, block expects {self.channels}")
        f = self.exit(self.deform(self.entry(x).relu()))
        return x + self.local(self.se(f))
