"""
Procedural sure/unsure phantom datasets with known masks, labels and scores.

Each phantom is a spiculated ellipsoid on a textured parenchyma background.
A latent severity in [0, 1] drives the nodule core intensity and the
spiculation amplitude; sure phantoms derive it from their binary label
(overlap controlled by ``class_separation``), unsure phantoms draw it
uniformly and turn it into quantized rater scores.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from synergic.data_model import (
    DatasetManifest, ManifestEntry, Modality, SureSample, UnsureSample, Volume, write_mask, write_volume,
)
from synergic.preprocess import extract_patch

logger = logging.getLogger(__name__)

PARENCHYMA_HU = -850.0
PARENCHYMA_NOISE_HU = 25.0
NODULE_BASE_HU = -100.0
NODULE_RANGE_HU = 150.0
NODULE_NOISE_HU = 15.0
MAX_SPICULATION = 0.35
SPICULATION_LOBES = 6

_SURE_STREAM = 1
_UNSURE_STREAM = 2
_LABEL_STREAM = 3


class PhantomSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_sure: int = Field(gt=0)
    n_unsure: int = Field(gt=0)
    side: int = Field(default=64, ge=16)
    class_separation: float = Field(default=0.6, ge=0.0, le=1.0)
    seed: int = 0
    spacing: float = Field(default=0.5, gt=0.0)
    n_raters: int = Field(default=4, ge=3)
    rater_noise: float = Field(default=0.3, ge=0.0)


@dataclass(frozen=True)
class NoduleGeometry:
    """Spiculated ellipsoid: unit radius 1 + amplitude*sin(m*theta)*cos(m*phi + phase)"""

    center: tuple
    radii: tuple
    amplitude: float
    lobes: int
    phase: float

    def mask(self, shape):
        grid = np.indices(shape, dtype=np.float64)
        scaled = [(grid[i] - self.center[i]) / self.radii[i] for i in range(3)]
        rho = np.sqrt(scaled[0] ** 2 + scaled[1] ** 2 + scaled[2] ** 2)
        safe = np.maximum(rho, 1e-12)
        theta = np.arccos(np.clip(scaled[0] / safe, -1.0, 1.0))
        phi = np.arctan2(scaled[2], scaled[1])
        boundary = 1.0 + self.amplitude * np.sin(self.lobes * theta) * np.cos(self.lobes * phi + self.phase)
        return (rho <= boundary).astype(np.uint8)

    def shifted(self, offset):
        return NoduleGeometry(
            tuple(float(c - o) for c, o in zip(self.center, offset)),
            self.radii, self.amplitude, self.lobes, self.phase,
        )

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class PhantomCase:
    nodule_id: str
    split_tag: str
    volume: Volume
    geometry: NoduleGeometry
    severity: float
    center_mm: tuple
    diameter_mm: float
    label: int = None
    rater_scores: tuple = ()
    rater_masks: tuple = ()


def severity_for_label(label, separation, rng):
    """Latent severity of a sure phantom; exactly the label when separation is 1"""
    noise = (1.0 - separation) * 0.75 * rng.standard_normal()
    return float(np.clip(0.5 + separation * (label - 0.5) + noise, 0.0, 1.0))


def rater_scores(severity, n_raters, noise, rng):
    """Quantized rater scores clamp(round(1 + 4u + N(0, noise)), 1, 5)"""
    raw = 1.0 + 4.0 * severity + rng.normal(0.0, noise, size=n_raters)
    return tuple(int(s) for s in np.clip(np.round(raw), 1, 5))


def _rng(seed, stream, index):
    return np.random.default_rng([seed, stream, index])


def _render(spec, severity, rng):
    """Volume, geometry and physical centre/diameter for one phantom"""
    margin = spec.side // 4
    size = spec.side + 2 * margin
    extent = spec.side * spec.spacing

    lo = max(1.6, 0.10 * extent)
    hi = max(2.4, 0.18 * extent)
    radii = tuple(float(r) / spec.spacing for r in rng.uniform(lo, hi, size=3))
    jitter = rng.integers(-2, 3, size=3)
    center = tuple(float(size // 2 + j) for j in jitter)
    geometry = NoduleGeometry(
        center=center,
        radii=radii,
        amplitude=MAX_SPICULATION * severity,
        lobes=SPICULATION_LOBES,
        phase=float(rng.uniform(0.0, 2.0 * np.pi)),
    )

    texture = ndimage.gaussian_filter(rng.standard_normal((size,) * 3), sigma=1.0)
    texture /= texture.std() + 1e-12
    voxels = PARENCHYMA_HU + PARENCHYMA_NOISE_HU * texture

    mask = geometry.mask(voxels.shape).astype(bool)
    core = NODULE_BASE_HU + NODULE_RANGE_HU * severity
    voxels[mask] = core + NODULE_NOISE_HU * rng.standard_normal(int(mask.sum()))

    volume = Volume(voxels, (spec.spacing,) * 3)
    center_mm = tuple(c * spec.spacing for c in center)
    diameter_mm = 2.0 * max(radii) * (1.0 + geometry.amplitude) * spec.spacing
    return volume, geometry, mask.astype(np.uint8), center_mm, diameter_mm


def _rater_masks(mask, n_raters, rng):
    masks = []
    for _ in range(n_raters):
        choice = rng.integers(3)
        if choice == 1:
            variant = ndimage.binary_dilation(mask)
        elif choice == 2:
            variant = ndimage.binary_erosion(mask)
            if not variant.any():
                variant = mask
        else:
            variant = mask
        masks.append(np.asarray(variant, dtype=np.uint8))
    return tuple(masks)


def iter_cases(spec):
    """Yield every phantom in a fixed order; each uses its own derived seed"""
    labels = _rng(spec.seed, _LABEL_STREAM, 0).permutation(np.arange(spec.n_sure) % 2)

    for index in range(spec.n_sure):
        rng = _rng(spec.seed, _SURE_STREAM, index)
        label = int(labels[index])
        severity = severity_for_label(label, spec.class_separation, rng)
        volume, geometry, _, center_mm, diameter_mm = _render(spec, severity, rng)
        yield PhantomCase(f"sure-{index:04d}", 'sure', volume, geometry, severity, center_mm, diameter_mm, label=label)

    for index in range(spec.n_unsure):
        rng = _rng(spec.seed, _UNSURE_STREAM, index)
        severity = float(rng.uniform(0.0, 1.0))
        volume, geometry, mask, center_mm, diameter_mm = _render(spec, severity, rng)
        yield PhantomCase(
            f"unsure-{index:04d}", 'unsure', volume, geometry, severity, center_mm, diameter_mm,
            rater_scores=rater_scores(severity, spec.n_raters, spec.rater_noise, rng),
            rater_masks=_rater_masks(mask, spec.n_raters, rng),
        )


def generate(spec):
    """
    Build in-memory samples with cube patches of ``spec.side``.

    Unsure samples carry the exact generating mask and the mean rater score;
    patch metadata records the geometry in patch coordinates and the latent
    severity.

    Returns:
        tuple[list[SureSample], list[UnsureSample]]
    """
    sure, unsure = [], []
    for case in iter_cases(spec):
        exact = case.geometry.mask(case.volume.shape)
        patch, mask = extract_patch(case.volume, case.center_mm, case.diameter_mm, Modality.CUBE64, spec.side, exact)
        start = patch.metadata['crop_start']
        patch = type(patch)(patch.data, patch.modality, patch.side, metadata={
            **patch.metadata,
            'geometry': case.geometry.shifted(start).to_dict(),
            'severity': case.severity,
        })
        if case.split_tag == 'sure':
            sure.append(SureSample(patch, case.label, case.nodule_id))
        else:
            score = sum(case.rater_scores) / len(case.rater_scores)
            unsure.append(UnsureSample(patch, mask, score, case.nodule_id))
    return sure, unsure


def write_dataset(spec, out_dir):
    """Write volumes, per-rater masks and the manifest; returns the manifest"""
    out_dir = Path(out_dir)
    entries = []
    for case in iter_cases(spec):
        volume_path = write_volume(out_dir / 'volumes' / case.nodule_id, case.volume)
        mask_paths = [
            write_mask(out_dir / 'masks' / f"{case.nodule_id}_r{j}", m, case.volume.spacing, case.volume.origin)
            for j, m in enumerate(case.rater_masks)
        ]
        entries.append(ManifestEntry(
            nodule_id=case.nodule_id,
            split_tag=case.split_tag,
            volume_path=str(volume_path.relative_to(out_dir)),
            nodule_center=case.center_mm,
            nodule_diameter=case.diameter_mm,
            malignancy_scores=list(case.rater_scores),
            mask_paths=[str(p.relative_to(out_dir)) for p in mask_paths],
            label=case.label,
        ))

    manifest = DatasetManifest(entries, out_dir)
    manifest.save(out_dir / 'manifest.jsonl')
    logger.info("[Phantom] wrote %d sure and %d unsure phantoms to %s", spec.n_sure, spec.n_unsure, out_dir)
    return manifest
