"""
Training Engine: paired sure/unsure optimization, checkpoint selection on
validation BCE and the k-fold cross-validation driver.

Each iteration forwards one augmented sure batch and one augmented unsure
batch through the shared model, assembles the total loss and takes one Adam
step. An epoch visits every training sure sample once.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from synergic.errors import TrainingDivergedError, TrainingError
from synergic.evaluation import aggregate_reports, compute_metrics, evaluate_model, predict, write_metrics
from synergic.losses import SynergicLoss, bce_loss
from synergic.network.model import SynergicModel, load_checkpoint, mask_tensor, patch_tensor, save_checkpoint
from synergic.retrieval import build_database, save_database
from synergic.training.folds import make_folds, write_folds
from synergic.training.prefetch import SamplePrefetcher

logger = logging.getLogger(__name__)

LOG_COLUMNS = [
    'fold', 'epoch', 'iter', 'phase', 'sure_id', 'unsure_id',
    'total', 'cls', 'csl', 'ad_csl', 'seg', 'reg', 'avg_ndl', 'avg_bkg', 'prob',
    'train_bce', 'val_bce', 'val_auc', 'val_acc',
]


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class FoldResult:
    fold: int
    checkpoint: Path
    log_path: Path
    best_epoch: int
    best_val_bce: float
    final_val_bce: float


class TrainingEngine:
    """Trains one model on one fold's training streams"""

    def __init__(self, config, out_dir, fold=0):
        self.config = config
        self.out_dir = Path(out_dir)
        self.fold = fold
        self.device = torch.device(config.device)
        self.weights = config.loss_weights()
        self.rows = []

        seed_everything(config.seed + fold)
        self.model = SynergicModel(config.backbone()).to(self.device)
        self.criterion = SynergicLoss(self.weights)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=config.lr, betas=config.adam_betas, eps=config.adam_eps,
        )

    @property
    def checkpoint_path(self):
        return self.out_dir / 'best.ckpt'

    @property
    def log_path(self):
        return self.out_dir / 'log.csv'

    def step(self, batch):
        self.model.train()
        sure_out = self.model(patch_tensor(batch.sure_patches, self.device))
        unsure_out = self.model(patch_tensor(batch.unsure_patches, self.device))
        breakdown = self.criterion(
            sure_out,
            torch.from_numpy(batch.sure_labels).to(self.device),
            unsure_out,
            mask_tensor(batch.unsure_masks, self.device),
            torch.from_numpy(batch.unsure_scores).to(self.device),
        )
        if not torch.isfinite(breakdown.total):
            snapshot = self._snapshot(batch)
            raise TrainingDivergedError(
                f"non-finite loss at epoch {batch.epoch} iteration {batch.iteration}", snapshot,
            )

        self.optimizer.zero_grad()
        breakdown.total.backward()
        self.optimizer.step()
        return breakdown

    def _snapshot(self, batch):
        path = self.out_dir / 'diverged.pt'
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            'state_dict': self.model.state_dict(),
            'epoch': batch.epoch,
            'iteration': batch.iteration,
            'sure_ids': list(batch.sure_ids),
            'unsure_ids': list(batch.unsure_ids),
        }, path)
        logger.error("[TrainingEngine] loss diverged; snapshot written to %s", path)
        return path

    def validate(self, val_sure):
        predictions = predict(self.model, val_sure, self.device, self.weights.threshold)
        labels = np.asarray(predictions.labels, dtype=np.float64)
        val_bce = float(bce_loss(torch.tensor(predictions.cls_prob, dtype=torch.float64), torch.from_numpy(labels)))
        report = compute_metrics(predictions.cls_prob, predictions.labels, self.weights.threshold)
        return val_bce, report

    def train(self, train_sure, train_unsure, val_sure):
        if not val_sure:
            raise TrainingError("validation set is empty")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        prefetcher = SamplePrefetcher(
            train_sure, train_unsure, seed=self.config.seed + self.fold,
            depth=self.config.prefetch_depth, batch_size=self.config.batch_size,
        )
        logger.info("[TrainingEngine] fold %d: %d sure / %d unsure / %d val, %d iterations per epoch",
                    self.fold, len(train_sure), len(train_unsure), len(val_sure),
                    prefetcher.iterations_per_epoch())

        best_epoch, best_bce, val_bce = -1, math.inf, math.inf
        for epoch in range(self.config.max_epochs):
            cls_losses = []
            for batch in prefetcher.epoch(epoch):
                breakdown = self.step(batch)
                row = breakdown.as_row()
                cls_losses.append(row['cls'])
                self.rows.append({
                    'fold': self.fold, 'epoch': epoch, 'iter': batch.iteration, 'phase': 'train',
                    'sure_id': '|'.join(batch.sure_ids), 'unsure_id': '|'.join(batch.unsure_ids),
                    **row,
                })

            val_bce, report = self.validate(val_sure)
            train_bce = float(np.mean(cls_losses))
            self.rows.append({
                'fold': self.fold, 'epoch': epoch, 'iter': len(cls_losses), 'phase': 'epoch',
                'train_bce': train_bce, 'val_bce': val_bce,
                'val_auc': report.auc, 'val_acc': report.accuracy,
            })
            self.write_log()
            logger.info("[TrainingEngine] fold %d epoch %d train_bce=%.4f val_bce=%.4f val_acc=%.4f",
                        self.fold, epoch, train_bce, val_bce, report.accuracy)

            if val_bce < best_bce:
                best_epoch, best_bce = epoch, val_bce
                save_checkpoint(self.model, self.checkpoint_path, epoch=epoch, val_bce=val_bce, fold=self.fold,
                                threshold=self.weights.threshold)

        if best_epoch < 0:
            raise TrainingError(f"fold {self.fold}: validation BCE never became finite")
        return FoldResult(
            fold=self.fold,
            checkpoint=self.checkpoint_path,
            log_path=self.log_path,
            best_epoch=best_epoch,
            best_val_bce=best_bce,
            final_val_bce=val_bce,
        )

    def write_log(self):
        pd.DataFrame(self.rows, columns=LOG_COLUMNS).to_csv(self.log_path, index=False, float_format='%.8g')
        return self.log_path


def train_fold(train_sure, train_unsure, val_sure, config, out_dir, fold=0):
    return TrainingEngine(config, out_dir, fold).train(train_sure, train_unsure, val_sure)


def cross_validate(sure, unsure, config, out_dir, patch_paths=None):
    """
    Run every fold and write the fold assignment, per-fold checkpoint,
    metrics and retrieval database, plus the aggregate over folds.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = make_folds(sure, config.folds, config.seed, config.val_fraction)
    write_folds(folds, out_dir / 'folds.json')

    reports, attentions, results = [], [], []
    for split in folds:
        fold_dir = out_dir / f"fold_{split.index}"
        result = train_fold(list(split.train), unsure, list(split.val), config, fold_dir, split.index)
        model, _ = load_checkpoint(result.checkpoint, map_location=config.device)

        report, attention, _ = evaluate_model(model, list(split.test), config.device, config.loss_weights().threshold)
        write_metrics(fold_dir / 'metrics.json', report, attention,
                      fold=split.index, best_epoch=result.best_epoch, best_val_bce=result.best_val_bce)
        save_database(build_database(model, list(split.train) + list(split.val), config.device, patch_paths),
                      fold_dir / 'db.jsonl')

        reports.append(report)
        attentions.append(attention)
        results.append(result)

    summary = {
        'aggregate': aggregate_reports(reports),
        'folds': [r.model_dump(mode='json') for r in reports],
        'attention': attentions,
    }
    (out_dir / 'metrics.json').write_text(json.dumps(summary, indent=2, sort_keys=True), encoding='utf-8')
    logger.info("[TrainingEngine] cross-validation finished: %d folds, mean acc %.4f",
                len(reports), summary['aggregate']['accuracy']['mean'])
    return summary, results
