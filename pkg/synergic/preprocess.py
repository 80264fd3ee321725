"""
CT preprocessing: robust lung masking, HU windowing, isotropic resampling,
patch extraction in the four input modalities, and joint augmentation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import filters, measure, morphology

from synergic.data_model import (
    DatasetManifest, Modality, NodulePatch, Volume, read_mask, read_volume, write_patch,
)
from synergic.errors import PreprocessError
from synergic.ingestion import consensus_mask

logger = logging.getLogger(__name__)

OTSU_BINS = 256
OTSU_RANGE = (-1024.0, 1024.0)
DEFAULT_MIN_COMPONENT = 64
DEFAULT_CLOSING_RADIUS = 5
# Height drop from centre to rim of the closing element; below 0.5 so the
# 0.5 threshold after closing keeps every voxel of the input mask.
CLOSING_DEPTH = 0.25


@dataclass(frozen=True)
class WindowSpec:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise PreprocessError(f"window lower bound {self.lo} must be below upper bound {self.hi}")


LUNG_WINDOW = WindowSpec(-1000.0, 400.0)
MEDIASTINAL_WINDOW = WindowSpec(-160.0, 240.0)


def window_normalize(volume, window):
    """Clip HU to the window, then map it linearly onto [0, 1]"""
    values = volume.voxels if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    scaled = (np.asarray(values, dtype=np.float64) - window.lo) / (window.hi - window.lo)
    return np.clip(scaled, 0.0, 1.0).astype(np.float32)


# ─── Lung mask ───────────────────────────────────────────────────────────────

def nonflat_ball(radius, depth=CLOSING_DEPTH):
    """Ball footprint with a quadratic height profile (0 at centre, -depth at rim)"""
    footprint = morphology.ball(radius).astype(bool)
    grid = np.indices(footprint.shape) - radius
    heights = -depth * (grid ** 2).sum(axis=0) / float(radius ** 2)
    return footprint, np.where(footprint, heights, 0.0)


def _largest_component(binary):
    labels = measure.label(binary, connectivity=1)
    if labels.max() == 0:
        raise PreprocessError("degenerate histogram: no tissue component")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == sizes.argmax()


def _drop_small_components(binary, min_size):
    labels = measure.label(binary, connectivity=1)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]


def lung_mask(volume, min_component=DEFAULT_MIN_COMPONENT, closing_radius=DEFAULT_CLOSING_RADIUS):
    """
    Robust lung mask F.

    Otsu binarization, largest connected component A, hole filling B,
    coarse lungs C = B - A, small-component removal D, grey closing of D
    with a non-flat ball E, and E thresholded at 0.5. The closing recovers
    juxta-pleural nodules that the coarse mask carves out of the lung wall.
    """
    voxels = volume.voxels
    counts, edges = np.histogram(np.clip(voxels, *OTSU_RANGE), bins=OTSU_BINS, range=OTSU_RANGE)
    if np.count_nonzero(counts) < 2:
        raise PreprocessError("degenerate histogram: volume has no air/tissue contrast")
    centers = (edges[:-1] + edges[1:]) / 2.0
    threshold = filters.threshold_otsu(hist=(counts, centers))

    body = _largest_component(voxels > threshold)
    filled = ndimage.binary_fill_holes(body)
    coarse = filled & ~body
    denoised = _drop_small_components(coarse, min_component)
    if not denoised.any():
        raise PreprocessError("degenerate histogram: no lung cavity found")

    footprint, heights = nonflat_ball(closing_radius)
    closed = ndimage.grey_closing(denoised.astype(np.float64), footprint=footprint, structure=heights)
    mask = (closed > 0.5).astype(np.uint8)
    if not mask.any():
        raise PreprocessError("degenerate histogram: no lung cavity found")

    logger.debug(
        "[LungMask] otsu=%.1f HU body=%d coarse=%d denoised=%d closed=%d",
        threshold, body.sum(), coarse.sum(), denoised.sum(), mask.sum(),
    )
    return mask


def apply_lung_mask(volume, mask, fill_hu=0.0):
    """Raw CT times F; ``fill_hu`` replaces the zeroed exterior if given"""
    voxels = np.where(np.asarray(mask) > 0, volume.voxels, fill_hu)
    return Volume(voxels, volume.spacing, volume.origin)


# ─── Resampling ──────────────────────────────────────────────────────────────

def _resample_array(array, spacing, target, order):
    spacing = np.asarray(spacing, dtype=np.float64)
    if np.allclose(spacing, target, rtol=0.0, atol=1e-12):
        return np.array(array, copy=True)
    output_shape = tuple(max(1, int(round(n * s / target))) for n, s in zip(array.shape, spacing))
    return ndimage.affine_transform(
        np.asarray(array, dtype=np.float64), target / spacing,
        output_shape=output_shape, order=order, mode='nearest',
    )


def resample_isotropic(volume, target=0.5):
    """Cubic-spline resampling to ``target`` mm/voxel; sample i sits at origin + i*target"""
    if not target > 0:
        raise PreprocessError(f"target spacing must be positive, got {target}")
    voxels = _resample_array(volume.voxels, volume.spacing, target, order=3)
    return Volume(voxels, (target,) * 3, volume.origin)


def resample_mask(mask, spacing, target=0.5):
    """Nearest-neighbour counterpart of resample_isotropic for binary masks"""
    if not target > 0:
        raise PreprocessError(f"target spacing must be positive, got {target}")
    resampled = _resample_array(np.asarray(mask, dtype=np.float64), spacing, target, order=0)
    return (resampled > 0.5).astype(np.uint8)


# ─── Patch extraction ────────────────────────────────────────────────────────

def _crop(array, start, size, fill):
    """Crop ``size`` voxels from ``start``; out-of-bounds voxels take ``fill``"""
    out = np.full(size, fill, dtype=np.float64)
    src, dst = [], []
    for s, n, limit in zip(start, size, array.shape):
        lo, hi = max(s, 0), min(s + n, limit)
        if hi <= lo:
            return out, True
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = array[tuple(src)]
    clipped = any(s < 0 or s + n > limit for s, n, limit in zip(start, size, array.shape))
    return out, clipped


def _pad_to(array, side):
    """Symmetric zero padding (or central cropping) of every axis to ``side``"""
    slices, pads = [], []
    for n in array.shape:
        if n >= side:
            lo = (n - side) // 2
            slices.append(slice(lo, lo + side))
            pads.append((0, 0))
        else:
            before = (side - n) // 2
            slices.append(slice(None))
            pads.append((before, side - n - before))
    return np.pad(array[tuple(slices)], pads, mode='constant')


def _resize_to(array, side, order):
    factors = [side / n for n in array.shape]
    resized = ndimage.zoom(array, factors, order=order, mode='nearest')
    if resized.shape != (side,) * 3:
        resized = _pad_to(resized, side)
    return resized


def extract_patch(volume, center, diameter, modality=Modality.CUBE64, side=64, mask=None, stride_align=1):
    """
    Cut a 2-channel patch around a nodule.

    Args:
        volume (Volume): resampled volume in HU
        center: nodule centre in mm
        diameter (float): nodule diameter in mm
        modality (Modality): cube64, x, x_resize_64 or x_padding_64
        side (int): cube side for the fixed-size modalities
        mask: optional binary array aligned with ``volume``, transported with the patch
        stride_align (int): round the tight ``x`` crop up to a multiple of this

    Returns:
        tuple[NodulePatch, np.ndarray | None]
    """
    modality = Modality(modality)
    if modality is Modality.CUBE64:
        size = (side,) * 3
    else:
        size = tuple(max(1, math.ceil(diameter / s - 1e-9)) for s in volume.spacing)
        if stride_align > 1:
            size = tuple(stride_align * math.ceil(n / stride_align) for n in size)

    start = tuple(int(c) for c in np.round(volume.to_index(center)) - np.asarray(size) // 2)
    hu, clipped = _crop(volume.voxels, start, size, fill=np.nan)
    channels = np.stack([
        np.nan_to_num(window_normalize(hu, LUNG_WINDOW), nan=0.0),
        np.nan_to_num(window_normalize(hu, MEDIASTINAL_WINDOW), nan=0.0),
    ])
    crop_mask = None
    if mask is not None:
        crop_mask, _ = _crop(np.asarray(mask), start, size, fill=0)

    if modality is Modality.X_RESIZE_64:
        channels = np.clip(np.stack([_resize_to(c, side, order=3) for c in channels]), 0.0, 1.0)
        if crop_mask is not None:
            crop_mask = _resize_to(crop_mask, side, order=0)
    elif modality is Modality.X_PADDING_64:
        channels = np.stack([_pad_to(c, side) for c in channels])
        if crop_mask is not None:
            crop_mask = _pad_to(crop_mask, side)

    if clipped:
        logger.debug("[Preprocess] crop at %s size %s exceeds volume %s; zero padded", start, size, volume.shape)

    patch = NodulePatch(
        channels,
        modality,
        side if modality.is_cubic else max(size),
        metadata={'out_of_bounds': bool(clipped), 'crop_start': list(start), 'crop_size': list(size)},
    )
    if crop_mask is not None:
        crop_mask = (crop_mask > 0.5).astype(np.uint8)
    return patch, crop_mask


# ─── Augmentation ────────────────────────────────────────────────────────────

_ROTATION_PLANES = ((0, 1), (0, 2), (1, 2))


def augment(patch, mask=None, seed=0):
    """
    Random flips over the three axes, a rotation by a multiple of 90 degrees
    in one axis plane, and an axis permutation; applied identically to every
    patch channel and to the mask. Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    flips = rng.random(3) < 0.5
    turns = int(rng.integers(4))
    plane = _ROTATION_PLANES[int(rng.integers(len(_ROTATION_PLANES)))]
    permutation = rng.permutation(3)

    def transform(array, offset):
        for axis, flip in enumerate(flips):
            if flip:
                array = np.flip(array, axis + offset)
        array = np.rot90(array, turns, axes=(plane[0] + offset, plane[1] + offset))
        array = np.transpose(array, list(range(offset)) + [int(p) + offset for p in permutation])
        return np.ascontiguousarray(array)

    augmented = NodulePatch(
        transform(patch.data, 1), patch.modality, patch.side,
        metadata={**patch.metadata, 'augment_seed': int(seed)},
    )
    return augmented, (None if mask is None else transform(np.asarray(mask), 0))


# ─── Dataset driver ──────────────────────────────────────────────────────────

def preprocess_manifest(manifest, out_dir, modality=Modality.CUBE64, side=64, spacing=0.5,
                        use_lung_mask=False, stride_align=None):
    """
    Turn every manifest entry into a patch file (plus a mask file for unsure
    entries) and write the updated manifest into ``out_dir``.
    """
    out_dir = Path(out_dir)
    modality = Modality(modality)
    if stride_align is None:
        stride_align = 4 if modality is Modality.X else 1

    entries = []
    for entry in manifest.entries:
        raw = read_volume(manifest.resolve(entry.volume_path))
        volume = resample_isotropic(raw, spacing)
        if use_lung_mask:
            try:
                volume = apply_lung_mask(volume, lung_mask(volume))
            except PreprocessError as e:
                logger.warning("[Preprocess] %s: lung mask skipped (%s)", entry.nodule_id, e)

        mask = None
        if entry.split_tag == 'unsure':
            if entry.consensus_mask_path:
                raw_mask = read_mask(manifest.resolve(entry.consensus_mask_path))
            else:
                raw_mask = consensus_mask([read_mask(manifest.resolve(p)) for p in entry.mask_paths])
            mask = resample_mask(raw_mask, raw.spacing, spacing)

        patch, patch_mask = extract_patch(
            volume, entry.nodule_center, entry.nodule_diameter, modality, side, mask, stride_align,
        )
        if patch_mask is not None and not patch_mask.any():
            logger.warning("[Preprocess] %s: mask empty after cropping; skipped", entry.nodule_id)
            continue

        patch_path, mask_path = write_patch(out_dir / 'patches' / entry.nodule_id, patch, patch_mask)
        entries.append(entry.model_copy(update={
            'volume_path': str(manifest.resolve(entry.volume_path).resolve()),
            'mask_paths': [str(manifest.resolve(p).resolve()) for p in entry.mask_paths],
            'consensus_mask_path': (str(manifest.resolve(entry.consensus_mask_path).resolve())
                                    if entry.consensus_mask_path else None),
            'patch_path': str(patch_path.relative_to(out_dir)),
            'patch_mask_path': str(mask_path.relative_to(out_dir)) if mask_path else None,
        }))

    logger.info("[Preprocess] wrote %d %s patches (side %d) to %s", len(entries), modality.value, side, out_dir)
    processed = DatasetManifest(entries, out_dir)
    processed.save(out_dir / 'manifest.jsonl')
    return processed
