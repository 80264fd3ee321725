"""
Background preparation of training pairs.

A daemon worker draws, augments and stacks (sure, unsure) pairs and hands
them to the optimizer thread through a bounded queue. Every random draw for
an epoch is made up front from one generator seeded by (seed, epoch), so the
sequence does not depend on thread timing.
"""

import logging
import queue
import threading
from dataclasses import dataclass

import numpy as np

from synergic.errors import TrainingError
from synergic.preprocess import augment

logger = logging.getLogger(__name__)

MASK_STRIDE = 4
_DONE = object()


def downsample_mask(mask, factor=MASK_STRIDE):
    """Zero-order reduction of a binary mask: keep every ``factor``-th voxel per axis"""
    mask = np.asarray(mask)
    if any(n % factor for n in mask.shape):
        raise TrainingError(f"mask shape {mask.shape} is not divisible by {factor}")
    return np.ascontiguousarray(mask[::factor, ::factor, ::factor] > 0).astype(np.float32)


@dataclass(frozen=True)
class TrainingBatch:
    epoch: int
    iteration: int
    sure_ids: tuple
    unsure_ids: tuple
    sure_patches: np.ndarray  # [B, 2, D, H, W]
    sure_labels: np.ndarray  # [B]
    unsure_patches: np.ndarray  # [B, 2, D, H, W]
    unsure_masks: np.ndarray  # [B, D/4, H/4, W/4]
    unsure_scores: np.ndarray  # [B], normalized to [0, 1]


@dataclass(frozen=True)
class _Draw:
    sure: tuple
    unsure: tuple
    sure_seeds: tuple
    unsure_seeds: tuple


class SamplePrefetcher:
    """
    Produces one epoch of training batches at a time. Sure samples are
    visited once per epoch in shuffled order; unsure samples are drawn
    uniformly with replacement.
    """

    def __init__(self, sure, unsure, seed=0, depth=4, batch_size=1, augment_samples=True):
        if not sure or not unsure:
            raise TrainingError("training needs non-empty sure and unsure streams")
        if batch_size > 1 and len({s.patch.spatial_shape for s in list(sure) + list(unsure)}) > 1:
            raise TrainingError("batch_size > 1 needs patches of one shape")
        self.sure = list(sure)
        self.unsure = list(unsure)
        self.seed = seed
        self.depth = depth
        self.batch_size = batch_size
        self.augment_samples = augment_samples
        self._stop = threading.Event()
        self._thread = None

    def iterations_per_epoch(self):
        return -(-len(self.sure) // self.batch_size)

    def plan(self, epoch):
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.sure))
        draws = []
        for start in range(0, len(order), self.batch_size):
            sure_idx = order[start:start + self.batch_size]
            unsure_idx = rng.integers(len(self.unsure), size=len(sure_idx))
            seeds = rng.integers(2**31, size=2 * len(sure_idx))
            draws.append(_Draw(
                tuple(int(i) for i in sure_idx),
                tuple(int(i) for i in unsure_idx),
                tuple(int(s) for s in seeds[:len(sure_idx)]),
                tuple(int(s) for s in seeds[len(sure_idx):]),
            ))
        return draws

    def _prepare(self, epoch, iteration, draw):
        sure_patches, labels, unsure_patches, masks, scores = [], [], [], [], []
        for index, seed in zip(draw.sure, draw.sure_seeds):
            sample = self.sure[index]
            patch = augment(sample.patch, seed=seed)[0] if self.augment_samples else sample.patch
            sure_patches.append(patch.data)
            labels.append(sample.label)
        for index, seed in zip(draw.unsure, draw.unsure_seeds):
            sample = self.unsure[index]
            if self.augment_samples:
                patch, mask = augment(sample.patch, sample.seg_mask, seed=seed)
            else:
                patch, mask = sample.patch, sample.seg_mask
            unsure_patches.append(patch.data)
            masks.append(downsample_mask(mask))
            scores.append(sample.normalized_score)
        return TrainingBatch(
            epoch=epoch,
            iteration=iteration,
            sure_ids=tuple(self.sure[i].nodule_id for i in draw.sure),
            unsure_ids=tuple(self.unsure[i].nodule_id for i in draw.unsure),
            sure_patches=np.stack(sure_patches),
            sure_labels=np.asarray(labels, dtype=np.float32),
            unsure_patches=np.stack(unsure_patches),
            unsure_masks=np.stack(masks),
            unsure_scores=np.asarray(scores, dtype=np.float32),
        )

    def _put(self, out, item):
        while not self._stop.is_set():
            try:
                out.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self, epoch, out):
        try:
            for iteration, draw in enumerate(self.plan(epoch)):
                if not self._put(out, self._prepare(epoch, iteration, draw)):
                    return
        except Exception as e:
            self._put(out, e)
        finally:
            self._put(out, _DONE)

    def epoch(self, epoch):
        """Iterate the batches of one epoch; worker errors are re-raised here"""
        self._stop.clear()
        out = queue.Queue(maxsize=self.depth)
        self._thread = threading.Thread(target=self._produce, args=(epoch, out), daemon=True)
        self._thread.start()
        try:
            while True:
                item = out.get()
                if item is _DONE:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.stop()

    def stop(self):
        """Ask the worker to finish and wait for it"""
        self._stop.set()
        thread, self._thread = self._thread, None
        if thread is not None:
            thread.join()
