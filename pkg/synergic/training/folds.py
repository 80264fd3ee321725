import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.model_selection import StratifiedKFold, train_test_split

from synergic.errors import TrainingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldSplit:
    index: int
    train: tuple
    val: tuple
    test: tuple

    def ids(self):
        return {
            'train': [s.nodule_id for s in self.train],
            'val': [s.nodule_id for s in self.val],
            'test': [s.nodule_id for s in self.test],
        }


def make_folds(sure, k=5, seed=0, val_fraction=0.2):
    """
    Stratified k-fold test splits; the rest of each fold is split again,
    stratified, into train and validation.
    """
    if k < 2:
        raise TrainingError(f"k must be at least 2, got {k}")
    if len(sure) < k:
        raise TrainingError(f"{len(sure)} sure samples cannot fill {k} folds")
    labels = np.array([s.label for s in sure])
    counts = np.bincount(labels, minlength=2)
    if counts.min() < k:
        raise TrainingError(f"stratification impossible: class counts {counts.tolist()} for k={k}")

    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    folds = []
    for index, (rest, test) in enumerate(splitter.split(np.zeros(len(sure)), labels)):
        try:
            train, val = train_test_split(
                rest, test_size=val_fraction, stratify=labels[rest], random_state=seed + index,
            )
        except ValueError as e:
            raise TrainingError(f"stratification impossible: {e}") from e
        folds.append(FoldSplit(
            index=index,
            train=tuple(sure[i] for i in sorted(train)),
            val=tuple(sure[i] for i in sorted(val)),
            test=tuple(sure[i] for i in sorted(test)),
        ))
        logger.debug("[Folds] fold %d: %d train / %d val / %d test", index, len(train), len(val), len(test))
    return folds


def write_folds(folds, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({str(f.index): f.ids() for f in folds}, indent=2), encoding='utf-8')
    return path
