"""Full detector assembly: residual backbone, pyramid stages, and heads.

The forward wiring is::

    backbone -> top-down pyramid -> [bottom-up agg -> top-down refresh ->
    bottom-up agg] -> [per-level DSE] -> shared class/box subnets

with the bracketed stages controlled by ``use_panet`` / ``use_dse``. Every
augmentation conv in the aggregation stages starts at exact zeros, so at
initialization the aggregation path is an identity and toggling it changes
nothing until training moves those weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import functional as F
from .blocks import DSEBlock
from .nn import BatchNorm2d, Conv2d, Module, ModuleDict, ModuleList, cast_input, rng_for
from .tensor import ShapeError, Tensor

LEVELS = ("p3", "p4", "p5", "p6", "p7")
LEVEL_STRIDES = {"p3": 8, "p4": 16, "p5": 32, "p6": 64, "p7": 128}
NUM_CLASSES = 9


@dataclass
class ModelConfig:
    """Architecture toggles and hyperparameters.

    Defaults are desk scale (trains on CPU in minutes); a deeper 50-layer
    bottleneck backbone is expressible via ``backbone_blocks=(3, 4, 6, 3)``,
    ``backbone_block="bottleneck"``, ``backbone_width=64``.
    """

    use_panet: bool = True
    use_dse: bool = True
    backbone_blocks: tuple = (2, 2, 2, 2)
    backbone_width: int = 16
    backbone_block: str = "basic"          # "basic" | "bottleneck"
    include_low_level: bool = True
    pyramid_width: int = 64
    num_classes: int = NUM_CLASSES
    anchor_scales: tuple = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
    anchor_ratios: tuple = (0.5, 1.0, 2.0)  # height / width
    anchor_base_sizes: tuple = (16, 32, 64, 128, 256)  # per level p3..p7
    se_ratio: int = 16
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    head_depth: int = 4
    head_width: int | None = None
    dse_levels: tuple = LEVELS
    prior_probability: float = 0.01

    def __post_init__(self):
        self.backbone_blocks = tuple(self.backbone_blocks)
        self.anchor_scales = tuple(self.anchor_scales)
        self.anchor_ratios = tuple(self.anchor_ratios)
        self.anchor_base_sizes = tuple(self.anchor_base_sizes)
        self.dse_levels = tuple(self.dse_levels)
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes is fixed at {NUM_CLASSES} for the lesion taxonomy")
        if not self.anchor_scales or not self.anchor_ratios:
            raise ValueError("anchor scales and ratios must be non-empty")
        if len(self.anchor_base_sizes) != len(LEVELS):
            raise ValueError(f"anchor_base_sizes needs one entry per level {LEVELS}")
        if len(self.backbone_blocks) != 4:
            raise ValueError("backbone_blocks needs one count per stage (4 stages)")
        if self.backbone_block not in ("basic", "bottleneck"):
            raise ValueError(f"unknown backbone_block {self.backbone_block!r}")
        if self.pyramid_width % 2 != 0:
            raise ValueError("pyramid_width must be even (DSE bottleneck halves it)")
        if self.use_dse and self.pyramid_width % self.se_ratio != 0:
            raise ValueError(f"se_ratio {self.se_ratio} must divide pyramid_width {self.pyramid_width}")
        for lvl in self.dse_levels:
            if lvl not in LEVELS:
                raise ValueError(f"unknown pyramid level {lvl!r}")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class HeadOutputs:
    """Per-level raw head maps: class logits N x (A*9) x H x W and box
    deltas N x (A*4) x H x W, spatially congruent per level."""

    class_logits: dict
    box_deltas: dict

    def levels(self):
        return [lvl for lvl in LEVELS if lvl in self.class_logits]


def _check_input_size(h: int, w: int) -> None:
    if h % 128 != 0 or w % 128 != 0:
        raise ShapeError(f"input size {h}x{w} must be divisible by 128 so the coarsest level is non-degenerate")


class BasicBlock(Module):
    def __init__(self, in_ch, out_ch, rng, stride=1):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=stride, bias=False)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = None

    def shortcut(self, x):
        return self.proj_bn(self.proj(x)) if self.proj is not None else x

    def forward(self, x):
        y = self.bn1(self.conv1(x)).relu()
        y = self.bn2(self.conv2(y))
        return (y + self.shortcut(x)).relu()


class BottleneckBlock(Module):
    EXPANSION = 4

    def __init__(self, in_ch, width, rng, stride=1):
        super().__init__()
        out_ch = width * self.EXPANSION
        self.conv1 = Conv2d(in_ch, width, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, rng, stride=stride, padding=1, bias=False)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, out_ch, 1, rng, bias=False)
        self.bn3 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=stride, bias=False)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = None

    def shortcut(self, x):
        return self.proj_bn(self.proj(x)) if self.proj is not None else x

    def forward(self, x):
        y = self.bn1(self.conv1(x)).relu()
        y = self.bn2(self.conv2(y)).relu()
        y = self.bn3(self.conv3(y))
        return (y + self.shortcut(x)).relu()


class ResidualBackbone(Module):
    """Single-channel residual backbone emitting c2..c5 at strides 4/8/16/32
    with doubling channel widths."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        w0 = config.backbone_width
        self.stem = Conv2d(1, w0, 7, rng, stride=2, padding=3, bias=False)
        self.stem_bn = BatchNorm2d(w0)
        basic = config.backbone_block == "basic"
        widths = [w0 * (2 ** i) for i in range(4)]
        self.stage_channels = []
        stages = []
        in_ch = w0
        for si, (blocks, width) in enumerate(zip(config.backbone_blocks, widths)):
            stage = ModuleList()
            for bi in range(blocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                if basic:
                    stage.append(BasicBlock(in_ch, width, rng, stride=stride))
                    in_ch = width
                else:
                    stage.append(BottleneckBlock(in_ch, width, rng, stride=stride))
                    in_ch = width * BottleneckBlock.EXPANSION
            stages.append(stage)
            self.stage_channels.append(in_ch)
        self.stage1, self.stage2, self.stage3, self.stage4 = stages

    def forward(self, x: Tensor) -> dict:
        _check_input_size(x.shape[2], x.shape[3])
        y = F.max_pool2d(self.stem_bn(self.stem(x)).relu(), 3, stride=2, padding=1)
        feats = {}
        for name, stage in (("c2", self.stage1), ("c3", self.stage2), ("c4", self.stage3), ("c5", self.stage4)):
            for block in stage:
                y = block(y)
            feats[name] = y
        return feats


class TopDownPyramid(Module):
    """Lateral 1x1 projections plus top-down upsample-add; p6/p7 by stride-2
    convs descending from p5 (the coarsest merged level)."""

    def __init__(self, in_channels: dict, width: int, rng):
        super().__init__()
        self.lat3 = Conv2d(in_channels["c3"], width, 1, rng, init="xavier")
        self.lat4 = Conv2d(in_channels["c4"], width, 1, rng, init="xavier")
        self.lat5 = Conv2d(in_channels["c5"], width, 1, rng, init="xavier")
        self.out3 = Conv2d(width, width, 3, rng, padding=1, init="xavier")
        self.out4 = Conv2d(width, width, 3, rng, padding=1, init="xavier")
        self.out5 = Conv2d(width, width, 3, rng, padding=1, init="xavier")
        self.down6 = Conv2d(width, width, 3, rng, stride=2, padding=1, init="xavier")
        self.down7 = Conv2d(width, width, 3, rng, stride=2, padding=1, init="xavier")

    def forward(self, feats: dict) -> dict:
        m5 = self.lat5(feats["c5"])
        m4 = self.lat4(feats["c4"]) + F.upsample_nearest2x(m5)
        m3 = self.lat3(feats["c3"]) + F.upsample_nearest2x(m4)
        p5 = self.out5(m5)
        p6 = self.down6(p5)
        return {
            "p3": self.out3(m3),
            "p4": self.out4(m4),
            "p5": p5,
            "p6": p6,
            "p7": self.down7(p6.relu()),
        }


class BottomUpAggregation(Module):
    """Bottom-up path: n3 = p3 (+ projected low-level map), then
    ``n_l = p_l + conv3x3_s2(n_{l-1})``. Aggregation convs are zero-initialized
    so a fresh pass is an exact identity over the pyramid."""

    def __init__(self, width: int, rng, low_level_channels: int | None = None):
        super().__init__()
        self.agg = ModuleDict({
            lvl: Conv2d(width, width, 3, rng, stride=2, padding=1, init="zeros")
            for lvl in LEVELS[1:]
        })
        if low_level_channels is not None:
            self.low_proj = Conv2d(low_level_channels, width, 3, rng, stride=2, padding=1, init="zeros")
        else:
            self.low_proj = None

    def forward(self, pyramid: dict, low_level: Tensor | None = None) -> dict:
        if self.low_proj is not None and low_level is None:
            raise ShapeError("bottom-up aggregation: configured for a low-level map but none was provided")
        n = pyramid["p3"]
        if self.low_proj is not None:
            n = n + self.low_proj(low_level)
        out = {"p3": n}
        for lvl in LEVELS[1:]:
            n = pyramid[lvl] + self.agg[lvl](n)
            out[lvl] = n
        return out


class TopDownRefresh(Module):
    """Second top-down pass between pyramid columns: residual zero-initialized
    1x1 conv over the upsampled coarser level, identity at initialization."""

    def __init__(self, width: int, rng):
        super().__init__()
        self.mix = ModuleDict({
            lvl: Conv2d(width, width, 1, rng, init="zeros")
            for lvl in LEVELS[:-1]
        })

    def forward(self, pyramid: dict) -> dict:
        out = {"p7": pyramid["p7"]}
        for lvl, upper in zip(reversed(LEVELS[:-1]), reversed(LEVELS[1:])):
            out[lvl] = pyramid[lvl] + self.mix[lvl](F.upsample_nearest2x(out[upper]))
        return {lvl: out[lvl] for lvl in LEVELS}


class DetectionHead(Module):
    """Shared-weight subnet: ``depth`` 3x3 convs + ReLU, then an output conv.

    The class head's output bias starts at -log((1-pi)/pi) so a fresh model
    predicts foreground probability ~= pi everywhere.
    """

    def __init__(self, width: int, depth: int, out_channels: int, rng, out_bias: float = 0.0):
        super().__init__()
        self.convs = ModuleList(
            Conv2d(width, width, 3, rng, padding=1, init="he")
            for _ in range(depth)
        )
        self.out = Conv2d(width, out_channels, 3, rng, padding=1,
                          init=("normal", 0.001), bias_init=out_bias)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = conv(x).relu()
        return self.out(x)


class PDSENet(Module):
    """The full detector. Construction is deterministic given (config, seed);
    each component group draws from its own seeded stream so toggling one
    group never shifts the initialization of another."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        w = config.pyramid_width
        a = config.anchors_per_cell
        self.backbone = ResidualBackbone(config, rng_for(seed, "backbone"))
        ch = dict(zip(("c2", "c3", "c4", "c5"), self.backbone.stage_channels))
        self.fpn = TopDownPyramid(ch, w, rng_for(seed, "fpn"))
        if config.use_panet:
            low = ch["c2"] if config.include_low_level else None
            self.pa1 = BottomUpAggregation(w, rng_for(seed, "pa1"), low_level_channels=low)
            self.refresh = TopDownRefresh(w, rng_for(seed, "refresh"))
            self.pa2 = BottomUpAggregation(w, rng_for(seed, "pa2"))
        if config.use_dse:
            rng = rng_for(seed, "dse")
            self.dse = ModuleDict({
                lvl: DSEBlock(w, rng, se_ratio=config.se_ratio) for lvl in config.dse_levels
            })
        head_rng = rng_for(seed, "heads")
        head_w = config.head_width or w
        if head_w != w:
            raise ValueError("head_width must equal pyramid_width (shared maps feed the heads directly)")
        prior = config.prior_probability
        self.class_head = DetectionHead(w, config.head_depth, a * config.num_classes, head_rng,
                                        out_bias=-math.log((1.0 - prior) / prior))
        self.box_head = DetectionHead(w, config.head_depth, a * 4, head_rng)

    def pyramid(self, image: Tensor) -> dict:
        """Feature pyramid after all configured couplings (before the heads)."""
        feats = self.backbone(image)
        pyr = self.fpn(feats)
        if self.config.use_panet:
            low = feats["c2"] if self.config.include_low_level else None
            pyr = self.pa1(pyr, low)
            pyr = self.refresh(pyr)
            pyr = self.pa2(pyr)
        if self.config.use_dse:
            pyr = {lvl: (self.dse[lvl](t) if lvl in self.dse else t) for lvl, t in pyr.items()}
        return pyr

    def forward(self, image) -> HeadOutputs:
        image = cast_input(image)
        if image.ndim != 4 or image.shape[1] != 1:
            raise ShapeError(f"model input must be N x 1 x H x W, got {image.shape}")
        pyr = self.pyramid(image)
        cls = {lvl: self.class_head(pyr[lvl]) for lvl in LEVELS}
        box = {lvl: self.box_head(pyr[lvl]) for lvl in LEVELS}
        return HeadOutputs(class_logits=cls, box_deltas=box)


def flatten_outputs(outputs: HeadOutputs, num_classes: int, anchors_per_cell: int):
    """Concatenate per-level maps into (N, K, num_classes) / (N, K, 4) tensors.

    Row order matches anchor generation: levels p3..p7, within a level
    row-major cells, within a cell the anchor index.
    """
    cls_parts, box_parts = [], []
    for lvl in outputs.levels():
        c = outputs.class_logits[lvl]
        b = outputs.box_deltas[lvl]
        n, _, h, w = c.shape
        a = anchors_per_cell
        cls_parts.append(
            c.reshape(n, a, num_classes, h, w).transpose(0, 3, 4, 1, 2).reshape(n, h * w * a, num_classes)
        )
        box_parts.append(
            b.reshape(n, a, 4, h, w).transpose(0, 3, 4, 1, 2).reshape(n, h * w * a, 4)
        )
    return F.concat(cls_parts, axis=1), F.concat(box_parts, axis=1)
