import logging
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from synergic.errors import ConfigError, ManifestIOError
from synergic.network.backbone import ResNetBackbone
from synergic.network.config import BackboneConfig
from synergic.network.fnet import FNet
from synergic.network.heads import CNet, RNet, global_average_pool
from synergic.network.segnet import SegNet

logger = logging.getLogger(__name__)


@dataclass
class ModelOutputs:
    backbone_features: torch.Tensor  # [B, K, L, W, H] before fusion
    features: torch.Tensor  # [B, K, L, W, H] fused, post-ReLU
    pooled: torch.Tensor  # [B, K]
    seg_logits: torch.Tensor  # [B, L, W, H]
    reg_score: torch.Tensor  # [B]
    cls_logit: torch.Tensor  # [B]
    cnet_weights: torch.Tensor  # [K]
    cnet_bias: torch.Tensor  # scalar

    @property
    def seg_prob(self):
        return torch.sigmoid(self.seg_logits)

    @property
    def cls_prob(self):
        return torch.sigmoid(self.cls_logit)


class SynergicModel(nn.Module):
    """
    Multi-task nodule network: shared backbone, SegNet decoder, FNet fusion
    and the RNet/CNet heads on globally pooled fused features.
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = (config or BackboneConfig()).check()
        k = self.config.feature_channels
        self.backbone = ResNetBackbone(self.config)
        self.segnet = SegNet(k, self.config.seg_channels, self.config.groups)
        self.fnet = FNet(k, self.config.groups) if self.config.use_fnet else None
        self.rnet = RNet(k)
        self.cnet = CNet(k)

    def backbone_forward(self, patch):
        return self.backbone(patch)

    def segnet_forward(self, features):
        return self.segnet(features)

    def fnet_fuse(self, features, seg_logits):
        if self.fnet is None:
            return F.relu(features)
        return self.fnet(features, seg_logits)

    def heads_forward(self, fused):
        """Returns (reg_score, cls_logit, pooled, cnet weights, cnet bias)"""
        pooled = global_average_pool(fused)
        return self.rnet(pooled), self.cnet(pooled), pooled, self.cnet.weight, self.cnet.bias

    def forward(self, patch):
        if patch.dim() != 5 or patch.shape[1] != self.config.in_channels:
            raise ConfigError(f"expected [B, {self.config.in_channels}, D, H, W] input, got {tuple(patch.shape)}")
        features = self.backbone_forward(patch)
        seg_logits = self.segnet_forward(features)
        fused = self.fnet_fuse(features, seg_logits)
        reg_score, cls_logit, pooled, weights, bias = self.heads_forward(fused)
        return ModelOutputs(
            backbone_features=features,
            features=fused,
            pooled=pooled,
            seg_logits=seg_logits,
            reg_score=reg_score,
            cls_logit=cls_logit,
            cnet_weights=weights,
            cnet_bias=bias,
        )


def count_parameters(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def patch_tensor(patches, device="cpu", dtype=torch.float32):
    """Stack NodulePatch objects (or raw arrays) into a [B, 2, D, H, W] tensor"""
    arrays = [np.asarray(p if isinstance(p, np.ndarray) else p.data) for p in patches]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ConfigError(f"cannot batch patches of differing shapes {sorted(shapes)}")
    return torch.from_numpy(np.stack(arrays).astype(np.float32)).to(device=device, dtype=dtype)


def mask_tensor(masks, device="cpu", dtype=torch.float32):
    return torch.from_numpy(np.stack([np.asarray(m, dtype=np.float32) for m in masks])).to(device=device, dtype=dtype)


def save_checkpoint(model, path, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "config": model.config.model_dump(mode="json"),
            "state_dict": model.state_dict(),
            "extra": extra,
        },
        path,
    )
    logger.info("[Model] checkpoint saved to %s", path)
    return path


def load_checkpoint(path, map_location="cpu"):
    """Returns (model, extra) with the model in eval mode"""
    try:
        payload = torch.load(Path(path), map_location=map_location, weights_only=True)
        model = SynergicModel(BackboneConfig(**payload["config"]))
        model.load_state_dict(payload["state_dict"])
    except (OSError, RuntimeError, KeyError, pickle.UnpicklingError) as e:
        raise ManifestIOError(path, f"unreadable checkpoint: {e}") from e
    model.eval()
    return model, payload.get("extra", {})
