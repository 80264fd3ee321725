import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import spearmanr

from synergic.data_model import validate_manifest
from synergic.phantom import NoduleGeometry, PhantomSpec, generate, rater_scores, severity_for_label, write_dataset


def _geometry_mask(sample):
    geometry = NoduleGeometry(**sample.patch.metadata['geometry'])
    return geometry.mask(sample.patch.spatial_shape).astype(bool)


def test_same_seed_is_bit_identical(phantom_spec):
    first_sure, first_unsure = generate(phantom_spec)
    second_sure, second_unsure = generate(phantom_spec)
    for a, b in zip(first_sure + first_unsure, second_sure + second_unsure):
        assert a.nodule_id == b.nodule_id
        np.testing.assert_array_equal(a.patch.data, b.patch.data)
    for a, b in zip(first_unsure, second_unsure):
        np.testing.assert_array_equal(a.seg_mask, b.seg_mask)
        assert a.malignancy_score == b.malignancy_score


def test_different_seed_differs(phantom_spec):
    other = phantom_spec.model_copy(update={'seed': phantom_spec.seed + 1})
    a, _ = generate(phantom_spec)
    b, _ = generate(other)
    assert not np.array_equal(a[0].patch.data, b[0].patch.data)


def test_unsure_mask_is_the_generating_shape(phantom_samples):
    _, unsure = phantom_samples
    for sample in unsure:
        expected = _geometry_mask(sample)
        actual = sample.seg_mask.astype(bool)
        iou = (expected & actual).sum() / (expected | actual).sum()
        assert iou == 1.0


def test_full_separation_is_linearly_separable(phantom_samples):
    sure, _ = phantom_samples
    intensity = np.array([s.patch.mediastinal_window[_geometry_mask(s)].mean() for s in sure])
    labels = np.array([s.label for s in sure])
    best = max(np.mean((intensity >= t) == labels) for t in np.unique(intensity))
    assert best == 1.0


def test_label_balance():
    for n in (9, 12, 13):
        sure, _ = generate(PhantomSpec(n_sure=n, n_unsure=1, side=16, seed=n))
        labels = [s.label for s in sure]
        assert abs(labels.count(0) - labels.count(1)) <= 1


def test_unsure_scores_track_severity():
    _, unsure = generate(PhantomSpec(n_sure=2, n_unsure=60, side=16, seed=4))
    severity = [s.patch.metadata['severity'] for s in unsure]
    scores = [s.malignancy_score for s in unsure]
    rho, _ = spearmanr(severity, scores)
    assert rho >= 0.8


def test_severity_is_exact_at_full_separation(rng):
    assert severity_for_label(0, 1.0, rng) == 0.0
    assert severity_for_label(1, 1.0, rng) == 1.0


def test_rater_scores_are_quantized(rng):
    scores = rater_scores(0.5, 200, 2.0, rng)
    assert set(scores) <= {1, 2, 3, 4, 5}
    assert all(isinstance(s, int) for s in scores)


def test_spec_bounds():
    with pytest.raises(ValidationError):
        PhantomSpec(n_sure=4, n_unsure=4, class_separation=1.5)
    with pytest.raises(ValidationError):
        PhantomSpec(n_sure=4, n_unsure=4, n_raters=2)


def test_written_dataset_validates(tmp_path):
    manifest = write_dataset(PhantomSpec(n_sure=4, n_unsure=4, side=16, seed=3), tmp_path)
    assert (tmp_path / 'manifest.jsonl').exists()
    assert validate_manifest(manifest) == []
    unsure = manifest.by_tag('unsure')
    assert all(len(e.mask_paths) == len(e.malignancy_scores) == 4 for e in unsure)
    assert all(e.label in (0, 1) for e in manifest.by_tag('sure'))
