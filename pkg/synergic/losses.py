"""
Loss terms of the synergic objective and the online CAM machinery.

All functions take torch tensors (python floats are accepted and promoted)
and stay differentiable end to end: gradients reach the CNet weights, the
fused features and the SegNet probabilities used as soft SEM weights.
"""

from dataclasses import dataclass
from enum import Enum

import torch
from pydantic import BaseModel, ConfigDict, Field

from synergic.errors import LossError

DICE_EPSILON = 1e-5
PROB_CLAMP = 1e-7
WEIGHT_GUARD = 1e-12


class LossMode(str, Enum):
    NDL_OVER_BKG = 'ndl_over_bkg'
    BKG_OVER_NDL = 'bkg_over_ndl'


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    gamma: float = Field(1.0, ge=0)
    delta: float = 0.5
    threshold: float = Field(0.5, gt=0, lt=1)
    mode: LossMode = LossMode.NDL_OVER_BKG
    adaptive: bool = True
    epsilon: float = Field(DICE_EPSILON, gt=0)


@dataclass
class CamResult:
    raw_cam: torch.Tensor  # [B, L, W, H]
    cam_c: torch.Tensor  # [B, L, W, H] in [0, 1]
    avg_ndl: torch.Tensor  # [B]
    avg_bkg: torch.Tensor  # [B]
    predicted: torch.Tensor  # [B] class c, 1 = malignant
    prob: torch.Tensor  # [B]


@dataclass
class LossBreakdown:
    total: torch.Tensor
    cls: torch.Tensor
    csl: torch.Tensor
    ad_csl: torch.Tensor
    seg: torch.Tensor
    reg: torch.Tensor
    avg_ndl: torch.Tensor
    avg_bkg: torch.Tensor
    prob: torch.Tensor

    def as_row(self):
        """Plain floats for the CSV training log"""
        return {
            name: float(getattr(self, name).detach().mean())
            for name in ('total', 'cls', 'csl', 'ad_csl', 'seg', 'reg', 'avg_ndl', 'avg_bkg', 'prob')
        }


def _tensor(value, like=None):
    if isinstance(value, torch.Tensor):
        return value
    if like is not None:
        return torch.as_tensor(value, dtype=like.dtype, device=like.device)
    return torch.as_tensor(value, dtype=torch.get_default_dtype())


def dice_loss(seg_prob, target, epsilon=DICE_EPSILON):
    seg_prob = _tensor(seg_prob)
    target = _tensor(target, like=seg_prob)
    if seg_prob.shape != target.shape:
        raise LossError(f"dice shape mismatch {tuple(seg_prob.shape)} vs {tuple(target.shape)}")
    intersection = (seg_prob * target).sum()
    return 1 - (2 * intersection + epsilon) / (seg_prob.sum() + target.sum() + epsilon)


def mse_loss(reg_score, target):
    reg_score = _tensor(reg_score)
    return ((reg_score - _tensor(target, like=reg_score)) ** 2).mean()


def bce_loss(prob, target):
    prob = _tensor(prob).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    target = _tensor(target, like=prob)
    return -(target * torch.log(prob) + (1 - target) * torch.log(1 - prob)).mean()


def _minmax(cam):
    """Per-sample min-max to [0, 1]; a constant map becomes zeros with zero gradient"""
    flat = cam.flatten(1)
    lo = flat.min(dim=1).values.view(-1, *[1] * (cam.dim() - 1))
    hi = flat.max(dim=1).values.view(-1, *[1] * (cam.dim() - 1))
    span = hi - lo
    scaled = (cam - lo) / span.clamp_min(WEIGHT_GUARD)
    return torch.where(span > 0, scaled, torch.zeros_like(cam))


def avg_cam(cam_c, sem):
    """Soft-weighted CAM means inside (SEM) and outside (1 - SEM) the nodule"""
    cam_c = _tensor(cam_c)
    sem = _tensor(sem, like=cam_c)
    if cam_c.shape != sem.shape:
        raise LossError(f"CAM/SEM shape mismatch {tuple(cam_c.shape)} vs {tuple(sem.shape)}")
    dims = tuple(range(-min(cam_c.dim(), 3), 0))
    avg_ndl = (cam_c * sem).sum(dim=dims) / sem.sum(dim=dims).clamp_min(WEIGHT_GUARD)
    avg_bkg = (cam_c * (1 - sem)).sum(dim=dims) / (1 - sem).sum(dim=dims).clamp_min(WEIGHT_GUARD)
    return avg_ndl, avg_bkg


def compute_cam(outputs, threshold=0.5):
    """
    Class activation map for the predicted class of every sample.

    The raw map is the bias-free weighted channel sum; it is scaled by
    (P - threshold), which flips it for benign predictions, then min-max
    normalized per sample. SEM is SegNet's own probability map.
    """
    raw_cam = torch.einsum('k,bklwh->blwh', outputs.cnet_weights, outputs.features)
    prob = outputs.cls_prob
    scale = (prob - threshold).view(-1, 1, 1, 1)
    cam_c = _minmax(scale * raw_cam)
    avg_ndl, avg_bkg = avg_cam(cam_c, outputs.seg_prob)
    return CamResult(
        raw_cam=raw_cam,
        cam_c=cam_c,
        avg_ndl=avg_ndl,
        avg_bkg=avg_bkg,
        predicted=(prob >= threshold).long(),
        prob=prob,
    )


def csl(avg_ndl, avg_bkg, delta=0.5, mode=LossMode.NDL_OVER_BKG):
    avg_ndl = _tensor(avg_ndl)
    avg_bkg = _tensor(avg_bkg, like=avg_ndl)
    if LossMode(mode) is LossMode.NDL_OVER_BKG:
        return torch.clamp(avg_bkg - avg_ndl + delta, min=0)
    return torch.clamp(avg_ndl - avg_bkg + delta, min=0)


def ad_csl(prob, threshold, csl_value):
    prob = _tensor(prob)
    return 2 * torch.abs(prob - threshold) * _tensor(csl_value, like=prob)


def total_loss(sure_terms, unsure_terms, weights):
    """sure_terms = (cls, csl-or-ad_csl), unsure_terms = (seg, reg)"""
    cls, csl_term = sure_terms
    seg, reg = unsure_terms
    return cls + weights.alpha * csl_term + weights.beta * seg + weights.gamma * reg


class SynergicLoss(torch.nn.Module):
    """
    Total objective on one sure/unsure batch. Segmentation and regression are
    supervised on the unsure stream only; classification and the CAM-SEM
    constraint on the sure stream only.
    """

    def __init__(self, weights=None):
        super().__init__()
        self.weights = weights or LossWeights()

    def forward(self, sure_outputs, sure_labels, unsure_outputs, unsure_masks, unsure_scores):
        w = self.weights
        labels = _tensor(sure_labels, like=sure_outputs.cls_prob)
        cls = bce_loss(sure_outputs.cls_prob, labels)

        cam = compute_cam(sure_outputs, w.threshold)
        csl_value = csl(cam.avg_ndl, cam.avg_bkg, w.delta, w.mode)
        ad_value = ad_csl(cam.prob, w.threshold, csl_value)
        csl_term = ad_value.mean() if w.adaptive else csl_value.mean()

        masks = _tensor(unsure_masks, like=unsure_outputs.seg_prob)
        seg_prob = unsure_outputs.seg_prob
        if seg_prob.shape != masks.shape:
            raise LossError(f"mask shape {tuple(masks.shape)} does not match SegNet output {tuple(seg_prob.shape)}")
        seg = torch.stack([dice_loss(p, m, w.epsilon) for p, m in zip(seg_prob, masks)]).mean()
        reg = mse_loss(unsure_outputs.reg_score, _tensor(unsure_scores, like=unsure_outputs.reg_score))

        return LossBreakdown(
            total=total_loss((cls, csl_term), (seg, reg), w),
            cls=cls,
            csl=csl_value.mean(),
            ad_csl=ad_value.mean(),
            seg=seg,
            reg=reg,
            avg_ndl=cam.avg_ndl.detach(),
            avg_bkg=cam.avg_bkg.detach(),
            prob=cam.prob.detach(),
        )
