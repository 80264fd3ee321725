"""
SegNet: lightweight decoder on the backbone features. No skip connections
and no upsampling; the logit map keeps the backbone resolution.
"""

import torch.nn.functional as F
from torch import nn

from synergic.network.base import ConvGN


class SegNet(nn.Module):

    def __init__(self, in_channels, widths=(32, 16), groups=8):
        super().__init__()
        w1, w2 = widths
        self.reduce = nn.Sequential(
            ConvGN(in_channels, w1, 3, padding=1, groups=groups, relu=True),
            ConvGN(w1, w2, 3, padding=1, groups=groups, relu=True),
        )
        self.out = nn.Conv3d(w2, 1, kernel_size=1)

    def forward(self, features):
        """[B, K, L, W, H] backbone features -> [B, L, W, H] logits"""
        return self.out(self.reduce(F.relu(features))).squeeze(1)
