"""Reference 2D encoder-decoder segmentation backbone.

A compact U-Net: `depth` encoder stages of two 3x3 conv+BN+ReLU followed by
2x max-pooling, a bottleneck, and a mirrored decoder with skip connections.
The forward pass returns both the full-resolution decoder feature map (the
input to the context block) and the sigmoid probability map from a 1x1 head.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .errors import InputError


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, bn_momentum: float = 0.1):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2),
            nn.BatchNorm2d(out_ch, momentum=bn_momentum),
            nn.ReLU(inplace=True),
        )


class DoubleConv(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, bn_momentum: float = 0.1):
        super().__init__(
            ConvBNReLU(in_ch, out_ch, bn_momentum=bn_momentum),
            ConvBNReLU(out_ch, out_ch, bn_momentum=bn_momentum),
        )


class MiniUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ch = [config.base_channels * 2**i for i in range(config.depth + 1)]
        m = config.bn_momentum

        self.encoders = nn.ModuleList()
        in_ch = config.in_channels
        for c in ch[:-1]:
            self.encoders.append(DoubleConv(in_ch, c, m))
            in_ch = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = DoubleConv(ch[-2], ch[-1], m)

        self.upsamples = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for c_low, c_high in zip(ch[:0:-1], ch[-2::-1]):
            # c_low: channels arriving from below, c_high: skip channels at this level
            self.upsamples.append(nn.ConvTranspose2d(c_low, c_high, 2, stride=2))
            self.decoders.append(DoubleConv(2 * c_high, c_high, m))

        self.head = nn.Conv2d(config.base_channels, 1, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: [n, in_channels, h, w] -> (features [n, base, h, w], prob [n, 1, h, w])."""
        if x.ndim != 4:
            raise InputError(f"expected a [n, c, h, w] batch, got {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise InputError(
                f"expected {self.config.in_channels} input channel(s), got {x.shape[1]}"
            )
        factor = self.config.downsample_factor
        if x.shape[2] % factor or x.shape[3] % factor:
            raise InputError(
                f"height and width must be divisible by {factor} "
                f"(depth {self.config.depth}), got {tuple(x.shape[2:])}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamples, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        features = x
        prob = torch.sigmoid(self.head(features))
        return features, prob


def build_backbone(config: ModelConfig, seed: int = 0) -> MiniUNet:
    """Construct with deterministic initialization for a given seed."""
    torch.manual_seed(seed)
    return MiniUNet(config)
