from .config import VARIANT_TABLE, ModelVariant, RunConfig
from .engine import FoldResult, TrainingEngine, cross_validate, seed_everything, train_fold
from .folds import FoldSplit, make_folds, write_folds
from .prefetch import SamplePrefetcher, TrainingBatch, downsample_mask

__all__ = [
    'FoldResult',
    'FoldSplit',
    'ModelVariant',
    'RunConfig',
    'SamplePrefetcher',
    'TrainingBatch',
    'TrainingEngine',
    'VARIANT_TABLE',
    'cross_validate',
    'downsample_mask',
    'make_folds',
    'seed_everything',
    'train_fold',
    'write_folds',
]
