"""
Metric suite, per-sample inference over sure data, attention statistics
and CAM overlay export.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from matplotlib import pyplot as plt
from pydantic import BaseModel, ConfigDict
from scipy.stats import rankdata
from skimage.measure import find_contours
from sklearn.metrics import confusion_matrix

from synergic.errors import EvaluationError
from synergic.losses import compute_cam
from synergic.network.model import patch_tensor

logger = logging.getLogger(__name__)

CAM_ALPHA = 0.5
CONTOUR_LEVEL = 0.5
CONTOUR_RGB = (0.0, 1.0, 0.0)
ATTENTION_MARGIN = 0.2
STD_KIND = 'population'

METRIC_FIELDS = ('sensitivity', 'specificity', 'precision', 'precision_b', 'accuracy', 'auc', 'f1')


class MetricReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    sensitivity: float
    specificity: float
    precision: float
    precision_b: float
    accuracy: float
    auc: float | None
    f1: float
    threshold: float
    n: int
    confusion: tuple[int, int, int, int]  # tp, fp, tn, fn
    zero_division: tuple[str, ...] = ()


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def rank_auc(probs, labels):
    """Mann-Whitney statistic; ties count one half"""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(probs)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metrics(probs, labels, threshold=0.5):
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if len(probs) != len(labels):
        raise EvaluationError(f"{len(probs)} scores for {len(labels)} labels")
    if len(probs) == 0:
        raise EvaluationError("no samples to score")
    if not np.isin(labels, (0, 1)).all():
        raise EvaluationError("labels must be 0 or 1")

    predicted = (probs >= threshold).astype(int)
    tn, fp, fn, tp = (int(v) for v in confusion_matrix(labels, predicted, labels=[0, 1]).ravel())

    flags = []
    sensitivity = _ratio(tp, tp + fn, 'sensitivity', flags)
    specificity = _ratio(tn, tn + fp, 'specificity', flags)
    precision = _ratio(tp, tp + fp, 'precision', flags)
    precision_b = _ratio(tn, tn + fn, 'precision_b', flags)
    f1 = _ratio(2 * precision * sensitivity, precision + sensitivity, 'f1', flags)
    auc = rank_auc(probs, labels)
    if auc is None:
        logger.warning("[Evaluation] single-class labels; AUC reported as absent")

    return MetricReport(
        sensitivity=sensitivity,
        specificity=specificity,
        precision=precision,
        precision_b=precision_b,
        accuracy=(tp + tn) / len(labels),
        auc=auc,
        f1=f1,
        threshold=threshold,
        n=len(labels),
        confusion=(tp, fp, tn, fn),
        zero_division=tuple(flags),
    )


def aggregate_reports(reports):
    """Mean and population standard deviation of every metric across folds"""
    if not reports:
        raise EvaluationError("no reports to aggregate")
    summary = {'folds': len(reports), 'std': STD_KIND}
    for name in METRIC_FIELDS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not values:
            summary[name] = None
            continue
        summary[name] = {'mean': float(np.mean(values)), 'std': float(np.std(values, ddof=0))}
    return summary


# ─── Inference ───────────────────────────────────────────────────────────────

@dataclass
class Predictions:
    nodule_ids: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    cls_prob: list = field(default_factory=list)
    reg_score: list = field(default_factory=list)
    avg_ndl: list = field(default_factory=list)
    avg_bkg: list = field(default_factory=list)


@torch.no_grad()
def iter_outputs(model, samples, device='cpu'):
    """Yield (sample, outputs) one sample at a time in eval mode"""
    model.eval()
    for sample in samples:
        yield sample, model(patch_tensor([sample.patch], device=device, dtype=next(model.parameters()).dtype))


def predict(model, samples, device='cpu', threshold=0.5, cam_dir=None):
    """Run every sure sample through the model; optionally export CAM overlays"""
    predictions = Predictions()
    for sample, outputs in iter_outputs(model, samples, device):
        cam = compute_cam(outputs, threshold)
        prob = float(outputs.cls_prob[0])
        predictions.nodule_ids.append(sample.nodule_id)
        predictions.labels.append(int(sample.label))
        predictions.cls_prob.append(prob)
        predictions.reg_score.append(float(outputs.reg_score[0]))
        predictions.avg_ndl.append(float(cam.avg_ndl[0]))
        predictions.avg_bkg.append(float(cam.avg_bkg[0]))
        if cam_dir is not None:
            export_cam_overlay(
                sample.patch, cam.cam_c[0].cpu().numpy(), outputs.seg_prob[0].cpu().numpy(),
                int(prob >= threshold), cam_dir, sample.nodule_id, label=sample.label,
            )
    return predictions


def attention_summary(pairs, margin=ATTENTION_MARGIN):
    """
    Fraction of samples whose CAM favours the nodule over the background by at
    least ``margin`` and the fraction favouring the background by that much.
    ``pairs`` are (avg_ndl, avg_bkg) tuples.
    """
    gaps = np.array([float(ndl) - float(bkg) for ndl, bkg in pairs], dtype=np.float64)
    if gaps.size == 0:
        return {'n': 0, 'margin': margin, 'ndl_over_bkg': 0.0, 'bkg_over_ndl': 0.0, 'mean_gap': 0.0}
    return {
        'n': int(gaps.size),
        'margin': margin,
        'ndl_over_bkg': float(np.mean(gaps >= margin)),
        'bkg_over_ndl': float(np.mean(-gaps >= margin)),
        'mean_gap': float(gaps.mean()),
    }


def evaluate_model(model, samples, device='cpu', threshold=0.5, cam_dir=None):
    """Returns (MetricReport, attention summary, Predictions)"""
    predictions = predict(model, samples, device, threshold, cam_dir)
    report = compute_metrics(predictions.cls_prob, predictions.labels, threshold)
    attention = attention_summary(zip(predictions.avg_ndl, predictions.avg_bkg))
    logger.info("[Evaluation] n=%d acc=%.4f auc=%s", report.n, report.accuracy,
                'n/a' if report.auc is None else f"{report.auc:.4f}")
    return report, attention, predictions


def write_metrics(path, report, attention=None, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {'report': report.model_dump(mode='json'), 'attention': attention, **extra}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding='utf-8')
    return path


# ─── CAM overlays ────────────────────────────────────────────────────────────

def _upsample(slice2d, shape):
    """Nearest-neighbour upsampling of a feature-resolution slice to the patch slice shape"""
    fy = shape[0] // slice2d.shape[0]
    fx = shape[1] // slice2d.shape[1]
    return np.repeat(np.repeat(slice2d, fy, axis=0), fx, axis=1)[:shape[0], :shape[1]]


def overlay_image(patch, cam_c, seg_prob):
    """
    RGB image of the central axial lung-window slice with the CAM heat map
    blended in proportion to its value and the SEM 0.5 isocontour in green.

    Returns:
        tuple[np.ndarray, bool]: (H x W x 3 image, contour drawn)
    """
    depth = patch.spatial_shape[0]
    base = np.asarray(patch.lung_window[depth // 2], dtype=np.float64)
    z = min(depth // 2 * cam_c.shape[0] // depth, cam_c.shape[0] - 1)
    heat = _upsample(np.asarray(cam_c[z], dtype=np.float64), base.shape)
    sem = _upsample(np.asarray(seg_prob[z], dtype=np.float64), base.shape)

    gray = np.repeat(base[..., None], 3, axis=2)
    colored = colormaps['jet'](heat)[..., :3]
    weight = (CAM_ALPHA * heat)[..., None]
    image = (1 - weight) * gray + weight * colored

    contours = find_contours(np.pad(sem, 1), CONTOUR_LEVEL)
    for contour in contours:
        rows = np.clip(np.round(contour[:, 0] - 1).astype(int), 0, base.shape[0] - 1)
        cols = np.clip(np.round(contour[:, 1] - 1).astype(int), 0, base.shape[1] - 1)
        image[rows, cols] = CONTOUR_RGB
    return np.clip(image, 0.0, 1.0), bool(contours)


def overlay_filename(nodule_id, prediction, label=None):
    verdict = 'M' if prediction == 1 else 'B'
    if label is None:
        return f"{nodule_id}_pred-{verdict}.png"
    return f"{nodule_id}_pred-{verdict}_{'correct' if prediction == label else 'wrong'}.png"


def export_cam_overlay(patch, cam_c, seg_prob, prediction, out_dir, nodule_id, label=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image, _ = overlay_image(patch, cam_c, seg_prob)
    path = out_dir / overlay_filename(nodule_id, prediction, label)
    plt.imsave(path, image)
    return path
