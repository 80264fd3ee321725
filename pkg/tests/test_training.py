import json

import numpy as np
import pandas as pd
import pytest
import torch

from synergic.data_model import Modality
from synergic.errors import ConfigError, TrainingDivergedError, TrainingError
from synergic.losses import LossWeights
from synergic.network import BackboneConfig, load_checkpoint
from synergic.training import (
    VARIANT_TABLE, ModelVariant, RunConfig, SamplePrefetcher, TrainingEngine, cross_validate, downsample_mask,
    make_folds, train_fold, write_folds,
)
from synergic.training.engine import LOG_COLUMNS
from tests.conftest import make_sure, make_unsure


def _sure_set(n_benign, n_malignant, side=8):
    labels = [0] * n_benign + [1] * n_malignant
    return [make_sure(f"s{i:03d}", label, side=side, seed=i) for i, label in enumerate(labels)]


def _run_config(**overrides):
    payload = dict(
        lr=1e-3, max_epochs=2, folds=2, seed=3, side=16, device='cpu', prefetch_depth=2,
        network=BackboneConfig.tiny(16),
    )
    payload.update(overrides)
    return RunConfig(**payload)


class TestFolds:

    def test_330_samples_in_five_folds(self):
        folds = make_folds(_sure_set(165, 165), k=5, seed=0)
        assert [len(f.test) for f in folds] == [66] * 5
        test_ids = [s.nodule_id for f in folds for s in f.test]
        assert len(set(test_ids)) == 330
        for f in folds:
            train, val, test = ({s.nodule_id for s in part} for part in (f.train, f.val, f.test))
            assert not train & val and not train & test and not val & test
            assert len(train | val | test) == 330
            assert len(val) == pytest.approx(0.2 * 264, abs=1)

    def test_folds_are_stratified(self):
        for f in make_folds(_sure_set(40, 20), k=5, seed=1):
            assert sum(s.label for s in f.test) == 4

    def test_same_seed_same_splits(self):
        sure = _sure_set(20, 20)
        first = [f.ids() for f in make_folds(sure, 5, seed=9)]
        assert first == [f.ids() for f in make_folds(sure, 5, seed=9)]
        assert first != [f.ids() for f in make_folds(sure, 5, seed=10)]

    def test_stratification_impossible(self):
        with pytest.raises(TrainingError, match='stratification impossible'):
            make_folds(_sure_set(8, 2), k=5)

    def test_write_folds(self, tmp_path):
        folds = make_folds(_sure_set(6, 6), k=2, seed=0)
        payload = json.loads(write_folds(folds, tmp_path / 'folds.json').read_text())
        assert set(payload) == {'0', '1'}
        assert set(payload['0']) == {'train', 'val', 'test'}


class TestDownsampleMask:

    def test_all_ones(self):
        assert np.all(downsample_mask(np.ones((16, 16, 16))) == 1)

    def test_empty(self):
        out = downsample_mask(np.zeros((16, 16, 16)))
        assert out.shape == (4, 4, 4)
        assert not out.any()

    def test_samples_grid_points(self):
        i, j, k = np.indices((16, 16, 16))
        checker = ((i + j + k) % 2).astype(np.uint8)
        out = downsample_mask(checker)
        expected = np.array([[[checker[4 * a, 4 * b, 4 * c] for c in range(4)] for b in range(4)] for a in range(4)])
        np.testing.assert_array_equal(out, expected.astype(np.float32))

    def test_shape_must_divide(self):
        with pytest.raises(TrainingError):
            downsample_mask(np.ones((18, 16, 16)))


class TestPrefetcher:

    @pytest.fixture
    def streams(self):
        sure = [make_sure(f"s{i}", i % 2, seed=i) for i in range(5)]
        unsure = [make_unsure(f"u{i}", 1 + i, seed=10 + i) for i in range(3)]
        return sure, unsure

    def test_epoch_is_deterministic(self, streams):
        first = list(SamplePrefetcher(*streams, seed=4).epoch(0))
        second = list(SamplePrefetcher(*streams, seed=4).epoch(0))
        assert [b.sure_ids for b in first] == [b.sure_ids for b in second]
        assert [b.unsure_ids for b in first] == [b.unsure_ids for b in second]
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.sure_patches, b.sure_patches)
            np.testing.assert_array_equal(a.unsure_masks, b.unsure_masks)

    def test_every_sure_sample_once_per_epoch(self, streams):
        prefetcher = SamplePrefetcher(*streams, seed=0, batch_size=2)
        batches = list(prefetcher.epoch(1))
        assert len(batches) == prefetcher.iterations_per_epoch() == 3
        ids = [i for b in batches for i in b.sure_ids]
        assert sorted(ids) == [f"s{i}" for i in range(5)]
        assert [b.iteration for b in batches] == [0, 1, 2]

    def test_epochs_reshuffle(self, streams):
        prefetcher = SamplePrefetcher(*streams, seed=0)
        orders = {tuple(i for b in prefetcher.epoch(e) for i in b.sure_ids) for e in range(6)}
        assert len(orders) > 1

    def test_batch_contents(self, streams):
        batch = next(iter(SamplePrefetcher(*streams, seed=2, augment_samples=False).epoch(0)))
        assert batch.sure_patches.shape == (1, 2, 16, 16, 16)
        assert batch.unsure_masks.shape == (1, 4, 4, 4)
        index = int(batch.unsure_ids[0][1:])
        assert batch.unsure_scores[0] == pytest.approx(index / 4)

    def test_consumer_can_stop_early(self, streams):
        prefetcher = SamplePrefetcher(*streams, seed=0, depth=1)
        batches = prefetcher.epoch(0)
        next(batches)
        batches.close()
        assert prefetcher._thread is None

    def test_worker_errors_surface(self, streams):
        sure, _ = streams
        odd = make_unsure('odd', side=18)
        with pytest.raises(TrainingError, match='not divisible'):
            list(SamplePrefetcher(sure, [odd], seed=0).epoch(0))

    def test_mixed_shapes_cannot_batch(self, streams):
        sure, unsure = streams
        with pytest.raises(TrainingError):
            SamplePrefetcher(sure + [make_sure('big', 1, side=20)], unsure, batch_size=2)

    def test_empty_stream(self, streams):
        with pytest.raises(TrainingError):
            SamplePrefetcher(streams[0], [])


class TestRunConfig:

    def test_variant_table(self):
        config = _run_config(variant=ModelVariant.A)
        weights = config.loss_weights()
        assert (weights.alpha, weights.beta, weights.gamma) == (0.0, 0.0, 0.0)
        assert config.backbone().use_fnet is False
        assert _run_config(variant='J').backbone().use_fnet is True
        assert _run_config(variant='I').loss_weights().adaptive is False
        assert set(VARIANT_TABLE) == set(ModelVariant)

    def test_backbone_follows_side(self):
        assert _run_config(side=32).backbone().side == 32

    def test_batching_needs_cubic_modality(self):
        with pytest.raises(ConfigError):
            RunConfig.parse({'batch_size': 2, 'modality': Modality.X.value})

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            RunConfig.parse({'learning_rate': 0.1})

    def test_file_round_trip_with_overrides(self, tmp_path):
        path = _run_config(lr=5e-4).write(tmp_path / 'run.json')
        loaded = RunConfig.from_file(path, max_epochs=7, lr=None)
        assert loaded.lr == 5e-4
        assert loaded.max_epochs == 7
        assert loaded.network == BackboneConfig.tiny(16)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.from_file(tmp_path / 'absent.json')


class TestEngine:

    @pytest.fixture
    def split(self, phantom_samples):
        sure, unsure = phantom_samples
        return list(sure[:8]), list(unsure), list(sure[8:])

    def test_train_fold_writes_checkpoint_and_log(self, split, tmp_path):
        train, unsure, val = split
        result = train_fold(train, unsure, val, _run_config(), tmp_path)
        assert result.checkpoint.exists()
        assert 0 <= result.best_epoch < 2
        log = pd.read_csv(result.log_path)
        assert list(log.columns) == LOG_COLUMNS
        assert (log.phase == 'train').sum() == 2 * len(train)
        assert (log.phase == 'epoch').sum() == 2
        epochs = log[log.phase == 'epoch']
        assert result.best_val_bce == pytest.approx(epochs.val_bce.min())
        model, extra = load_checkpoint(result.checkpoint)
        assert extra['epoch'] == result.best_epoch

    def test_checkpoint_reload_reproduces_validation(self, split, tmp_path):
        train, unsure, val = split
        config = _run_config(max_epochs=1, weights=LossWeights(threshold=0.4))
        engine = TrainingEngine(config, tmp_path)
        result = engine.train(train, unsure, val)
        val_bce, report = engine.validate(val)

        engine.model, extra = load_checkpoint(result.checkpoint)
        assert engine.validate(val) == (val_bce, report)
        assert val_bce == result.best_val_bce
        assert extra['threshold'] == 0.4

    def test_log_is_reproducible(self, split, tmp_path):
        train, unsure, val = split
        first = train_fold(train, unsure, val, _run_config(), tmp_path / 'a')
        second = train_fold(train, unsure, val, _run_config(), tmp_path / 'b')
        assert first.log_path.read_bytes() == second.log_path.read_bytes()

    def test_classifier_only_variant(self, split, tmp_path):
        train, unsure, val = split
        engine = TrainingEngine(_run_config(variant='A', max_epochs=1), tmp_path)
        engine.train(train, unsure, val)
        assert engine.model.fnet is None
        rows = pd.read_csv(engine.log_path)
        rows = rows[rows.phase == 'train']
        np.testing.assert_allclose(rows.total, rows.cls, rtol=1e-6)

    def test_divergence_writes_snapshot(self, split, tmp_path):
        train, unsure, _ = split
        engine = TrainingEngine(_run_config(), tmp_path)
        batch = next(iter(SamplePrefetcher(train, unsure, seed=0).epoch(0)))
        with torch.no_grad():
            engine.model.cnet.fc.bias.fill_(float('nan'))
        with pytest.raises(TrainingDivergedError) as info:
            engine.step(batch)
        snapshot = torch.load(info.value.snapshot_path, weights_only=True)
        assert snapshot['sure_ids'] == list(batch.sure_ids)

    def test_empty_validation(self, split, tmp_path):
        train, unsure, _ = split
        with pytest.raises(TrainingError):
            train_fold(train, unsure, [], _run_config(), tmp_path)


def test_cross_validate_layout(phantom_samples, tmp_path):
    sure, unsure = phantom_samples
    summary, results = cross_validate(sure, unsure, _run_config(max_epochs=1), tmp_path)

    assert len(results) == 2
    folds = json.loads((tmp_path / 'folds.json').read_text())
    for index in ('0', '1'):
        fold_dir = tmp_path / f"fold_{index}"
        assert (fold_dir / 'best.ckpt').exists()
        assert (fold_dir / 'log.csv').exists()
        assert (fold_dir / 'db.jsonl').exists()
        metrics = json.loads((fold_dir / 'metrics.json').read_text())
        assert metrics['report']['n'] == len(folds[index]['test'])
    aggregate = json.loads((tmp_path / 'metrics.json').read_text())['aggregate']
    assert aggregate['folds'] == 2
    assert aggregate['std'] == 'population'
    assert summary['aggregate'] == aggregate
