"""
ResNet backbone: a 7x7x7 stride-2 head without max-pooling, then three
residual blocks. Block 1 downsamples by 2; blocks 2 and 3 keep the
resolution and widen the receptive field with dilation, so the output is
exactly 1/4 of the input per axis.
"""

import torch.nn.functional as F
from torch import nn

from synergic.errors import ConfigError
from synergic.network.base import ConvGN
from synergic.network.config import SPATIAL_REDUCTION


class ResidualBlock(nn.Module):
    """Two 3x3x3 convolutions with a 1x1x1 projection shortcut"""

    def __init__(self, in_channels, out_channels, stride, dilation, groups, final=False):
        super().__init__()
        self.conv1 = ConvGN(in_channels, out_channels, 3, stride, dilation, dilation, groups, relu=True)
        self.conv2 = ConvGN(out_channels, out_channels, 3, 1, dilation, dilation, groups, relu=False)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = ConvGN(in_channels, out_channels, 1, stride, 0, 1, groups, relu=False)
        else:
            self.shortcut = nn.Identity()
        # The last block ends in group norm only; SegNet and FNet apply the ReLU.
        self.final = final

    def forward(self, x):
        out = self.conv2(self.conv1(x)) + self.shortcut(x)
        return out if self.final else F.relu(out)


class ResNetBackbone(nn.Module):

    def __init__(self, config):
        super().__init__()
        head, c1, c2, c3 = config.channels
        d1, d2, d3 = config.dilations
        g = config.groups
        self.head = ConvGN(config.in_channels, head, 7, stride=2, padding=3, groups=g, relu=True)
        self.block1 = ResidualBlock(head, c1, stride=2, dilation=d1, groups=g)
        self.block2 = ResidualBlock(c1, c2, stride=1, dilation=d2, groups=g)
        self.block3 = ResidualBlock(c2, c3, stride=1, dilation=d3, groups=g, final=True)

    def forward(self, x):
        if any(n % SPATIAL_REDUCTION for n in x.shape[-3:]):
            raise ConfigError(f"input spatial shape {tuple(x.shape[-3:])} is not divisible by {SPATIAL_REDUCTION}")
        return self.block3(self.block2(self.block1(self.head(x))))
