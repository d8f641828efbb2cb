"""Small trainable convolutional feature extractor with a two-scale pyramid merge.

Stem (stride 2) + three residual stages (strides 2, 2, 1). The stride-4 and
stride-8 stages feed lateral 1x1 projections, top-down upsample-and-add, and
3x3 smoothing convolutions, producing C-channel maps at strides 4 and 8.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .masks import BACKBONE_STRIDE, FeaturePyramid, Frame


def _conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = _conv3x3(cin, cout, stride)
        self.conv2 = _conv3x3(cout, cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        identity = x if self.skip is None else self.skip(x)
        out = self.conv2(F.relu(self.conv1(x)))
        return F.relu(out + identity)


class ConvPyramid(nn.Module):
    """Backbone producing FeaturePyramid(f4, f8) with C channels at both scales."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.channels = channels
        w0 = max(channels // 2, 8)
        self.stem = _conv3x3(3, w0, stride=2)
        self.stage1 = nn.Sequential(ResidualBlock(w0, w0, stride=2), ResidualBlock(w0, w0))
        self.stage2 = nn.Sequential(ResidualBlock(w0, channels, stride=2), ResidualBlock(channels, channels))
        self.stage3 = nn.Sequential(ResidualBlock(channels, channels), ResidualBlock(channels, channels))
        self.lateral4 = nn.Conv2d(w0, channels, 1)
        self.lateral8 = nn.Conv2d(channels, channels, 1)
        self.smooth4 = _conv3x3(channels, channels)
        self.smooth8 = _conv3x3(channels, channels)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, frame: Frame) -> FeaturePyramid:
        h, w = frame.height, frame.width
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ValueError(f"input {h}x{w} not divisible by stride {BACKBONE_STRIDE}")
        x = frame.image.permute(2, 0, 1).unsqueeze(0)
        x = F.relu(self.stem(x))
        c4 = self.stage1(x)
        c8 = self.stage3(self.stage2(c4))
        p8 = self.lateral8(c8)
        p4 = self.lateral4(c4) + F.interpolate(p8, scale_factor=2, mode="bilinear", align_corners=False)
        f4 = self.smooth4(p4)
        f8 = self.smooth8(p8)
        return FeaturePyramid(f4[0].permute(1, 2, 0), f8[0].permute(1, 2, 0))
