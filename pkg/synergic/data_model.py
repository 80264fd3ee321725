"""
Core value types shared by every component, and the on-disk dataset format.

Arrays (volumes, masks, patches) are stored as raw little-endian float32
binaries ``<stem>.bin`` next to a JSON sidecar ``<stem>.json`` that carries
shape, spacing, origin and any extra metadata. The dataset manifest is
JSON-lines, one nodule per line, with paths relative to the manifest file.

Spatial arrays are indexed in the same axis order as their ``spacing``
tuple; nothing in the package assumes a particular anatomical order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from synergic.errors import DataModelError, ManifestIOError

MIN_DIAMETER_MM = 3.0
MAX_DIAMETER_MM = 30.0
MIN_AXIS_VOXELS = 8
MIN_RATERS = 3
SCORE_MIN = 1
SCORE_MAX = 5

_DTYPE = '<f4'


class Modality(str, Enum):
    """Patch input modalities"""

    CUBE64 = 'cube64'
    X = 'x'
    X_RESIZE_64 = 'x_resize_64'
    X_PADDING_64 = 'x_padding_64'

    @property
    def is_cubic(self):
        return self is not Modality.X


def _frozen_array(values, dtype):
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def _triple(values, name):
    try:
        triple = tuple(float(v) for v in values)
    except (TypeError, ValueError) as e:
        raise DataModelError(f"{name} must be three numbers: {e}") from e
    if len(triple) != 3:
        raise DataModelError(f"{name} must have three components, got {len(triple)}")
    return triple


def normalized_score(score):
    """Map a malignancy score in [1, 5] affinely onto [0, 1]"""
    score = float(score)
    if not SCORE_MIN <= score <= SCORE_MAX:
        raise DataModelError(f"malignancy score {score} out of [{SCORE_MIN}, {SCORE_MAX}]")
    return (score - SCORE_MIN) / (SCORE_MAX - SCORE_MIN)


@dataclass(frozen=True, eq=False)
class Volume:
    """3D grid of HU values with physical spacing (mm/voxel) and origin (mm)"""

    voxels: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        voxels = _frozen_array(self.voxels, np.float32)
        if voxels.ndim != 3:
            raise DataModelError(f"volume must be 3D, got {voxels.ndim}D")
        if any(n < MIN_AXIS_VOXELS for n in voxels.shape):
            raise DataModelError(f"volume shape {voxels.shape} smaller than {MIN_AXIS_VOXELS} voxels per axis")

        spacing = _triple(self.spacing, 'spacing')
        if any(not s > 0 for s in spacing):
            raise DataModelError(f"nonpositive spacing {spacing}")

        object.__setattr__(self, 'voxels', voxels)
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'origin', _triple(self.origin, 'origin'))

    @property
    def shape(self):
        return self.voxels.shape

    def to_index(self, point_mm):
        """Continuous voxel index of a physical point"""
        point = np.asarray(_triple(point_mm, 'point'))
        return (point - np.asarray(self.origin)) / np.asarray(self.spacing)


@dataclass(frozen=True, eq=False)
class NodulePatch:
    """2-channel normalized cube: channel 0 lung window, channel 1 mediastinal window"""

    data: np.ndarray
    modality: Modality = Modality.CUBE64
    side: int = 64
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        data = _frozen_array(self.data, np.float32)
        modality = Modality(self.modality)
        if data.ndim != 4 or data.shape[0] != 2:
            raise DataModelError(f"patch must be [2, D, H, W], got {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise DataModelError("patch values must lie in [0, 1]")
        if modality.is_cubic and data.shape[1:] != (self.side,) * 3:
            raise DataModelError(f"{modality.value} patch must be {self.side}^3, got {data.shape[1:]}")

        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'modality', modality)
        object.__setattr__(self, 'side', int(self.side))
        object.__setattr__(self, 'metadata', dict(self.metadata))

    @property
    def spatial_shape(self):
        return self.data.shape[1:]

    @property
    def lung_window(self):
        return self.data[0]

    @property
    def mediastinal_window(self):
        return self.data[1]


@dataclass(frozen=True, eq=False)
class UnsureSample:
    """Patch with a rater consensus mask and an average malignancy score"""

    patch: NodulePatch
    seg_mask: np.ndarray
    malignancy_score: float
    nodule_id: str = ''

    def __post_init__(self):
        mask = _frozen_array(self.seg_mask, np.uint8)
        if mask.shape != self.patch.spatial_shape:
            raise DataModelError(f"mask shape {mask.shape} != patch shape {self.patch.spatial_shape}")
        if not np.isin(np.asarray(self.seg_mask), (0, 1)).all():
            raise DataModelError("segmentation mask must be binary")
        if not mask.any():
            raise DataModelError("segmentation mask has no foreground voxel")
        normalized_score(self.malignancy_score)

        object.__setattr__(self, 'seg_mask', mask)
        object.__setattr__(self, 'malignancy_score', float(self.malignancy_score))

    @property
    def normalized_score(self):
        return normalized_score(self.malignancy_score)


@dataclass(frozen=True, eq=False)
class SureSample:
    """Patch with a pathologically confirmed label (0 benign, 1 malignant)"""

    patch: NodulePatch
    label: int
    nodule_id: str = ''

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataModelError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, 'label', int(self.label))


# ─── Manifest ────────────────────────────────────────────────────────────────

class ManifestEntry(BaseModel):
    """One nodule in the dataset manifest"""

    model_config = ConfigDict(frozen=True, extra='forbid')

    nodule_id: str
    split_tag: str  # 'sure' or 'unsure'
    volume_path: str
    nodule_center: tuple[float, float, float]  # mm
    nodule_diameter: float  # mm
    malignancy_scores: list[int] = []
    mask_paths: list[str] = []
    texture_scores: Optional[list[int]] = None
    label: Optional[int] = None
    mean_score: Optional[float] = None
    consensus_mask_path: Optional[str] = None
    patch_path: Optional[str] = None
    patch_mask_path: Optional[str] = None


@dataclass(frozen=True)
class ManifestViolation:
    nodule_id: str
    rule: str

    def __str__(self):
        return f"{self.nodule_id}: {self.rule}"


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered manifest entries plus the directory their paths are relative to"""

    entries: tuple = ()
    root: Path = Path('.')

    def __post_init__(self):
        object.__setattr__(self, 'entries', tuple(self.entries))
        object.__setattr__(self, 'root', Path(self.root))

    def resolve(self, relative):
        return self.root / relative

    def by_tag(self, split_tag):
        return [e for e in self.entries if e.split_tag == split_tag]

    @classmethod
    def load(cls, path):
        """Read a JSON-lines manifest"""
        path = Path(path)
        try:
            lines = path.read_text(encoding='utf-8').splitlines()
        except OSError as e:
            raise ManifestIOError(path, e.strerror or str(e)) from e

        entries = []
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.model_validate_json(line))
            except ValidationError as e:
                raise ManifestIOError(path, f"line {number}: {e.errors()[0]['msg']}") from e
        return cls(entries=entries, root=path.parent)

    def save(self, path):
        """Write as JSON-lines; returns the path"""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                for entry in self.entries:
                    f.write(entry.model_dump_json() + '\n')
        except OSError as e:
            raise ManifestIOError(path, e.strerror or str(e)) from e
        return path


def validate_manifest(manifest, check_files=True):
    """
    Check every entry against the type invariants.

    Args:
        manifest (DatasetManifest): parsed manifest
        check_files (bool): also read each volume sidecar for spacing/shape rules

    Returns:
        list[ManifestViolation]: empty iff every entry is valid
    """
    violations = []
    seen = set()

    for entry in manifest.entries:
        def flag(rule):
            violations.append(ManifestViolation(entry.nodule_id, rule))

        if entry.nodule_id in seen:
            flag("duplicate nodule_id")
        seen.add(entry.nodule_id)

        if not MIN_DIAMETER_MM <= entry.nodule_diameter < MAX_DIAMETER_MM:
            flag(f"diameter out of [{MIN_DIAMETER_MM:g},{MAX_DIAMETER_MM:g})")

        if entry.split_tag == 'sure':
            if entry.label not in (0, 1):
                flag("label not in {0,1}")
        elif entry.split_tag == 'unsure':
            if len(entry.malignancy_scores) < MIN_RATERS:
                flag(f"fewer than {MIN_RATERS} raters")
            if any(not SCORE_MIN <= s <= SCORE_MAX for s in entry.malignancy_scores):
                flag(f"score out of [{SCORE_MIN},{SCORE_MAX}]")
            if len(entry.mask_paths) != len(entry.malignancy_scores):
                flag("mask count differs from rater count")
        else:
            flag(f"unknown split_tag {entry.split_tag!r}")

        if check_files:
            sidecar = read_sidecar(manifest.resolve(entry.volume_path))
            spacing = sidecar.get('spacing') or []
            if len(spacing) != 3 or any(not float(s) > 0 for s in spacing):
                flag("nonpositive spacing")
            if any(n < MIN_AXIS_VOXELS for n in sidecar['shape']):
                flag(f"volume smaller than {MIN_AXIS_VOXELS} voxels per axis")

    return violations


# ─── Binary array files ──────────────────────────────────────────────────────

def _stem(path):
    path = Path(path)
    return path.with_suffix('') if path.suffix in ('.bin', '.json') else path


def read_sidecar(path):
    """Load the JSON sidecar of an array file"""
    sidecar = _stem(path).with_suffix('.json')
    try:
        meta = json.loads(sidecar.read_text(encoding='utf-8'))
    except OSError as e:
        raise ManifestIOError(sidecar, e.strerror or str(e)) from e
    except json.JSONDecodeError as e:
        raise ManifestIOError(sidecar, f"invalid JSON: {e}") from e
    if 'shape' not in meta:
        raise ManifestIOError(sidecar, "sidecar has no 'shape'")
    return meta


def write_array(path, array, **meta):
    """Write ``array`` as float32 binary plus sidecar; returns the .bin path"""
    stem = _stem(path)
    array = np.asarray(array, dtype=_DTYPE)
    sidecar = {'shape': list(array.shape), 'dtype': _DTYPE, **meta}
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        array.tofile(stem.with_suffix('.bin'))
        stem.with_suffix('.json').write_text(json.dumps(sidecar, indent=2), encoding='utf-8')
    except OSError as e:
        raise ManifestIOError(stem, e.strerror or str(e)) from e
    return stem.with_suffix('.bin')


def read_array(path):
    """Read an array file; returns (array, sidecar dict)"""
    stem = _stem(path)
    meta = read_sidecar(stem)
    binary = stem.with_suffix('.bin')
    try:
        flat = np.fromfile(binary, dtype=_DTYPE)
    except OSError as e:
        raise ManifestIOError(binary, e.strerror or str(e)) from e
    expected = int(np.prod(meta['shape']))
    if flat.size != expected:
        raise ManifestIOError(binary, f"holds {flat.size} values, sidecar expects {expected}")
    return flat.reshape(meta['shape']).astype(np.float32), meta


def write_volume(path, volume):
    return write_array(path, volume.voxels, spacing=list(volume.spacing), origin=list(volume.origin))


def read_volume(path):
    voxels, meta = read_array(path)
    try:
        return Volume(voxels, meta['spacing'], meta.get('origin', (0.0, 0.0, 0.0)))
    except KeyError as e:
        raise ManifestIOError(_stem(path).with_suffix('.json'), "sidecar has no 'spacing'") from e


def write_mask(path, mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise DataModelError("mask must be binary")
    return write_array(path, mask, spacing=list(spacing), origin=list(origin))


def read_mask(path):
    mask, _ = read_array(path)
    return (mask > 0.5).astype(np.uint8)


def write_patch(path, patch, mask=None):
    """Write a patch (and optional mask) next to each other; returns (patch_path, mask_path)"""
    stem = _stem(path)
    meta = {k: v for k, v in patch.metadata.items() if _jsonable(v)}
    patch_path = write_array(stem, patch.data, modality=patch.modality.value, side=patch.side, metadata=meta)
    mask_path = None
    if mask is not None:
        mask_path = write_mask(stem.with_name(stem.name + '_mask'), mask)
    return patch_path, mask_path


def read_patch(path):
    data, meta = read_array(path)
    return NodulePatch(data, Modality(meta['modality']), meta['side'], meta.get('metadata', {}))


def _jsonable(value):
    try:
        json.dumps(value)
    except TypeError:
        return False
    return True


def load_samples(manifest):
    """
    Build samples from a preprocessed manifest.

    Returns:
        tuple[list[SureSample], list[UnsureSample]]
    """
    sure, unsure = [], []
    for entry in manifest.entries:
        if entry.patch_path is None:
            raise DataModelError(f"{entry.nodule_id}: no patch file; preprocess the manifest first")
        patch = read_patch(manifest.resolve(entry.patch_path))

        if entry.split_tag == 'sure':
            sure.append(SureSample(patch, entry.label, entry.nodule_id))
        elif entry.split_tag == 'unsure':
            if entry.patch_mask_path is None:
                raise DataModelError(f"{entry.nodule_id}: unsure entry has no patch mask")
            score = entry.mean_score
            if score is None:
                score = sum(entry.malignancy_scores) / len(entry.malignancy_scores)
            mask = read_mask(manifest.resolve(entry.patch_mask_path))
            unsure.append(UnsureSample(patch, mask, score, entry.nodule_id))
    return sure, unsure
