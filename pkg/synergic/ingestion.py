"""
Unsure cohort filtering: inter-rater agreement on malignancy scores and
50% consensus segmentation masks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from synergic.data_model import (
    MIN_RATERS, DatasetManifest, read_mask, read_sidecar, validate_manifest, write_mask,
)
from synergic.errors import IngestionError

logger = logging.getLogger(__name__)

DEFAULT_MAD_THRESHOLD = 0.6
SOLID_TEXTURE = 5


@dataclass(frozen=True, eq=False)
class RaterAnnotation:
    """Per-rater malignancy scores and masks of one nodule"""

    scores: tuple
    masks: tuple
    nodule_id: str = ''
    texture_scores: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, 'scores', tuple(int(s) for s in self.scores))
        object.__setattr__(self, 'masks', tuple(self.masks))
        if self.texture_scores is not None:
            object.__setattr__(self, 'texture_scores', tuple(int(t) for t in self.texture_scores))

        if len(self.scores) < MIN_RATERS:
            raise IngestionError(f"{self.nodule_id}: needs at least {MIN_RATERS} raters, got {len(self.scores)}")
        if len(self.scores) != len(self.masks):
            raise IngestionError(f"{self.nodule_id}: {len(self.scores)} scores but {len(self.masks)} masks")
        if any(not 1 <= s <= 5 for s in self.scores):
            raise IngestionError(f"{self.nodule_id}: scores must lie in [1, 5], got {self.scores}")

    @property
    def mean_score(self):
        return sum(self.scores) / len(self.scores)

    @property
    def is_solid(self):
        """True when no texture ratings exist or their average is solid"""
        if not self.texture_scores:
            return True
        return sum(self.texture_scores) / len(self.texture_scores) == SOLID_TEXTURE


@dataclass(frozen=True)
class KeptNodule:
    annotation: RaterAnnotation
    mean_score: float
    mad: float


@dataclass
class FilterReport:
    kept: list = field(default_factory=list)
    discarded_mad: list = field(default_factory=list)
    discarded_texture: list = field(default_factory=list)


def mean_absolute_difference(scores):
    """
    Gini mean absolute difference: average |s_i - s_j| over unordered pairs i < j.

    Integer scores are summed exactly before the single division, so the
    result equals a brute-force pair enumeration bit for bit.
    """
    values = [int(s) for s in scores]
    n = len(values)
    if n < 2:
        raise IngestionError(f"mean absolute difference needs at least 2 scores, got {n}")

    array = np.asarray(values, dtype=np.int64)
    i, j = np.triu_indices(n, k=1)
    total = int(np.abs(array[i] - array[j]).sum())
    return total / len(i)


def filter_unsure(annotations, mad_threshold=DEFAULT_MAD_THRESHOLD, report=None):
    """
    Keep nodules whose rater MAD does not exceed ``mad_threshold``.

    Returns:
        list[KeptNodule]: kept nodules in input order with their average score
    """
    report = report if report is not None else FilterReport()
    for annotation in annotations:
        if not annotation.is_solid:
            report.discarded_texture.append(annotation.nodule_id)
            continue
        mad = mean_absolute_difference(annotation.scores)
        if mad <= mad_threshold:
            report.kept.append(KeptNodule(annotation, annotation.mean_score, mad))
        else:
            report.discarded_mad.append(annotation.nodule_id)
    return report.kept


def consensus_mask(masks, min_votes=2):
    """Voxel is foreground iff at least ``min_votes`` raters marked it"""
    masks = [np.asarray(m) for m in masks]
    if len(masks) < 2:
        raise IngestionError(f"consensus needs at least 2 masks, got {len(masks)}")
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise IngestionError(f"mask shapes differ: {sorted(shapes)}")

    votes = np.sum([m > 0 for m in masks], axis=0)
    return (votes >= min_votes).astype(np.uint8)


def ingest_manifest(manifest, out_dir, mad_threshold=DEFAULT_MAD_THRESHOLD):
    """
    Validate a raw manifest, filter the unsure cohort and write consensus masks.

    Sure entries that pass validation are carried over unchanged. Unsure
    entries that survive the texture and MAD filters gain ``mean_score``
    and ``consensus_mask_path``. Paths in the output manifest are rewritten
    relative to ``out_dir``.

    Returns:
        tuple[DatasetManifest, FilterReport]
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    violations = validate_manifest(manifest)
    rejected = {v.nodule_id for v in violations}
    for violation in violations:
        logger.warning("[Ingestion] dropping %s", violation)

    report = FilterReport()
    kept_entries = []
    for entry in manifest.entries:
        if entry.nodule_id in rejected:
            continue
        volume_path = _relative_to(manifest.resolve(entry.volume_path), out_dir)

        if entry.split_tag == 'sure':
            kept_entries.append(entry.model_copy(update={'volume_path': volume_path}))
            continue

        annotation = RaterAnnotation(
            scores=entry.malignancy_scores,
            masks=[read_mask(manifest.resolve(p)) for p in entry.mask_paths],
            nodule_id=entry.nodule_id,
            texture_scores=entry.texture_scores,
        )
        before = len(report.kept)
        kept = filter_unsure([annotation], mad_threshold, report)
        if len(kept) == before:
            continue

        sidecar = read_sidecar(manifest.resolve(entry.mask_paths[0]))
        mask_path = write_mask(
            out_dir / 'consensus' / f"{entry.nodule_id}_consensus",
            consensus_mask(annotation.masks),
            spacing=sidecar.get('spacing', (1.0, 1.0, 1.0)),
            origin=sidecar.get('origin', (0.0, 0.0, 0.0)),
        )
        kept_entries.append(entry.model_copy(update={
            'volume_path': volume_path,
            'mask_paths': [_relative_to(manifest.resolve(p), out_dir) for p in entry.mask_paths],
            'mean_score': kept[-1].mean_score,
            'consensus_mask_path': str(mask_path.relative_to(out_dir)),
        }))

    logger.info(
        "[Ingestion] kept %d entries; discarded %d by MAD > %.2f, %d non-solid, %d invalid",
        len(kept_entries), len(report.discarded_mad), mad_threshold,
        len(report.discarded_texture), len(rejected),
    )
    filtered = DatasetManifest(kept_entries, out_dir)
    filtered.save(out_dir / 'manifest.jsonl')
    return filtered, report


def _relative_to(path, base):
    path = Path(path).resolve()
    base = Path(base).resolve()
    try:
        return str(path.relative_to(base))
    except ValueError:
        return str(path)
