import math

from torch import nn


def group_count(channels, groups):
    """Largest group count <= ``groups`` that divides ``channels``"""
    return math.gcd(channels, groups)


class ConvGN(nn.Sequential):
    """3D convolution followed by group normalization and an optional ReLU"""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, dilation=1,
                 groups=8, relu=True):
        layers = [
            nn.Conv3d(in_channels, out_channels, kernel_size, stride=stride, padding=padding,
                      dilation=dilation, bias=False),
            nn.GroupNorm(group_count(out_channels, groups), out_channels),
        ]
        if relu:
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)
