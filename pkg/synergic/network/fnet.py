"""FNet: fuse segmentation-specific structure into the backbone features by addition."""

import torch.nn.functional as F
from torch import nn

from synergic.network.base import ConvGN


class FNet(nn.Module):

    def __init__(self, out_channels, groups=8):
        super().__init__()
        self.conv = ConvGN(1, out_channels, 3, padding=1, groups=groups, relu=False)

    def forward(self, features, seg_logits):
        return F.relu(features + self.conv(seg_logits.unsqueeze(1)))
