"""RNet (malignancy score regression) and CNet (benign-malignant classification) heads."""

from torch import nn


def global_average_pool(features):
    """[B, K, L, W, H] -> [B, K] spatial mean per channel"""
    return features.mean(dim=(2, 3, 4))


class RNet(nn.Module):
    """One output neuron, no activation"""

    def __init__(self, in_features):
        super().__init__()
        self.fc = nn.Linear(in_features, 1)

    def forward(self, pooled):
        return self.fc(pooled).squeeze(-1)


class CNet(nn.Module):
    """One output neuron; the sigmoid is applied by the caller"""

    def __init__(self, in_features):
        super().__init__()
        self.fc = nn.Linear(in_features, 1)

    @property
    def weight(self):
        return self.fc.weight[0]

    @property
    def bias(self):
        return self.fc.bias[0]

    def forward(self, pooled):
        return self.fc(pooled).squeeze(-1)
