"""
Phantom-scale behaviour of the full model. These runs take tens of minutes
on CPU and are deselected by default; run with ``pytest -m slow``.
"""

import json

import numpy as np
import pandas as pd
import pytest

from synergic.losses import LossMode, LossWeights
from synergic.network import load_checkpoint
from synergic.phantom import PhantomSpec, generate
from synergic.retrieval import RetrievalMode, build_database, evaluate_diagnosis, load_database
from synergic.training import RunConfig, cross_validate, train_fold

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def _phantoms(seed, n_sure=160, n_unsure=240, separation=0.6):
    return generate(PhantomSpec(n_sure=n_sure, n_unsure=n_unsure, side=32, class_separation=separation, seed=seed))


def _cross_validate(seed, out_dir, **overrides):
    sure, unsure = _phantoms(seed)
    config = RunConfig(side=32, max_epochs=30, seed=seed, device='cpu', **overrides)
    summary, _ = cross_validate(sure, unsure, config, out_dir)
    return summary


def _pooled_fraction(summary, key):
    attention = summary['attention']
    total = sum(a['n'] for a in attention)
    return sum(a[key] * a['n'] for a in attention) / total


def test_auxiliary_tasks_improve_auc(tmp_path):
    gains = []
    for seed in SEEDS:
        plain = _cross_validate(seed, tmp_path / f"A_{seed}", variant='A')
        multi = _cross_validate(seed, tmp_path / f"D_{seed}", variant='D')
        gains.append(multi['aggregate']['auc']['mean'] - plain['aggregate']['auc']['mean'])
    assert np.mean(gains) >= 0.03


def test_adaptive_csl_moves_attention_to_nodule(tmp_path):
    guided = _cross_validate(0, tmp_path / 'J', variant='J')
    unguided = _cross_validate(0, tmp_path / 'D', variant='D')
    assert _pooled_fraction(guided, 'ndl_over_bkg') >= 0.7
    assert _pooled_fraction(unguided, 'ndl_over_bkg') < 0.4


def test_inverted_margin_moves_attention_to_background(tmp_path):
    summary = _cross_validate(0, tmp_path / 'J_bkg', variant='J',
                              weights=LossWeights(mode=LossMode.BKG_OVER_NDL, delta=0.5))
    assert _pooled_fraction(summary, 'bkg_over_ndl') >= 0.6


def test_validation_bce_falls_on_separable_phantoms(tmp_path):
    sure, unsure = _phantoms(4, n_sure=60, n_unsure=60, separation=1.0)
    config = RunConfig(side=32, max_epochs=10, seed=4, device='cpu')
    result = train_fold(list(sure[:40]), unsure, list(sure[40:]), config, tmp_path)

    epochs = pd.read_csv(result.log_path).query("phase == 'epoch'")
    val_bce = epochs.val_bce.to_numpy()
    assert len(val_bce) == 10
    assert val_bce[-3:].mean() < val_bce[0]
    assert result.best_val_bce < val_bce[0]


def test_concat_retrieval_is_not_worse_than_single_features(tmp_path):
    sure, unsure = _phantoms(5, n_sure=80, n_unsure=80, separation=1.0)
    config = RunConfig(side=32, max_epochs=10, folds=5, seed=5, device='cpu')
    cross_validate(sure, unsure, config, tmp_path)

    by_id = {s.nodule_id: s for s in sure}
    folds = json.loads((tmp_path / 'folds.json').read_text())
    accuracy = {mode: [] for mode in RetrievalMode}
    for index, split in folds.items():
        fold_dir = tmp_path / f"fold_{index}"
        model, _ = load_checkpoint(fold_dir / 'best.ckpt')
        db = load_database(fold_dir / 'db.jsonl')
        queries = build_database(model, [by_id[i] for i in split['test']])
        for mode in RetrievalMode:
            report, _ = evaluate_diagnosis(queries, db, mode=mode)
            accuracy[mode].append(report.accuracy)

    mean = {mode: np.mean(values) for mode, values in accuracy.items()}
    assert mean[RetrievalMode.CONCAT] >= mean[RetrievalMode.MACHINE] - 0.02
    assert mean[RetrievalMode.CONCAT] >= mean[RetrievalMode.EXPERT] - 0.02
