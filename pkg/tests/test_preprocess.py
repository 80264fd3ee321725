import numpy as np
import pytest

from synergic.data_model import DatasetManifest, Modality, NodulePatch, Volume, load_samples
from synergic.errors import PreprocessError
from synergic.ingestion import ingest_manifest
from synergic.phantom import PhantomSpec, write_dataset
from synergic.preprocess import (
    LUNG_WINDOW, MEDIASTINAL_WINDOW, WindowSpec, apply_lung_mask, augment, extract_patch, lung_mask,
    preprocess_manifest, resample_isotropic, resample_mask, window_normalize,
)
from tests.conftest import make_volume


def _ellipsoid(shape, center, radii):
    grid = np.indices(shape, dtype=np.float64)
    return sum(((grid[i] - center[i]) / radii[i]) ** 2 for i in range(3)) < 1.0


def _ball(shape, center, radius):
    return _ellipsoid(shape, center, (radius,) * 3)


class TestWindowNormalize:

    @pytest.mark.parametrize('hu, expected', [(-2000.0, 0.0), (400.0, 1.0), (-300.0, 0.5)])
    def test_lung_window(self, hu, expected):
        assert window_normalize(np.array([hu]), LUNG_WINDOW)[0] == pytest.approx(expected, abs=1e-7)

    def test_monotone(self):
        hu = np.linspace(-1500, 600, 500)
        for window in (LUNG_WINDOW, MEDIASTINAL_WINDOW):
            assert np.all(np.diff(window_normalize(hu, window)) >= 0)

    def test_window_bounds_checked(self):
        with pytest.raises(PreprocessError):
            WindowSpec(100.0, 100.0)


class TestResample:

    def test_identity_at_target_spacing(self, rng):
        volume = Volume(rng.normal(-500, 200, (12, 12, 12)), (0.5, 0.5, 0.5))
        out = resample_isotropic(volume, 0.5)
        np.testing.assert_allclose(out.voxels, volume.voxels, atol=1e-6)

    def test_constant_is_preserved(self):
        out = resample_isotropic(make_volume((16, 12, 10), -500.0, (1.0, 0.7, 1.3)), 0.5)
        assert out.spacing == (0.5, 0.5, 0.5)
        np.testing.assert_allclose(out.voxels, -500.0, atol=1e-3)

    def test_linear_ramp(self):
        n = 48
        ramp = np.broadcast_to(10.0 * np.arange(n)[:, None, None], (n, 8, 8))
        out = resample_isotropic(Volume(ramp, (1.0, 1.0, 1.0)), 0.5)
        assert out.shape == (2 * n, 16, 16)
        interior = np.arange(24, 2 * n - 24)
        np.testing.assert_allclose(out.voxels[interior, 8, 8], 5.0 * interior, atol=1e-4)

    def test_nonpositive_target(self):
        with pytest.raises(PreprocessError):
            resample_isotropic(make_volume(), 0.0)

    def test_mask_stays_binary(self):
        mask = _ball((16, 16, 16), (8, 8, 8), 4).astype(np.uint8)
        out = resample_mask(mask, (1.0, 1.0, 1.0), 0.5)
        assert out.shape == (32, 32, 32)
        assert set(np.unique(out)) == {0, 1}


class TestLungMask:

    @pytest.fixture(scope='class')
    def chest(self):
        shape = (64, 64, 64)
        body = _ball(shape, (32, 32, 32), 28)
        cavities = _ellipsoid(shape, (32, 20, 32), (14, 8, 14)) | _ellipsoid(shape, (32, 44, 32), (14, 8, 14))
        nodule = _ball(shape, (32, 14, 32), 3) & cavities
        voxels = np.full(shape, -1000.0)
        voxels[body] = 40.0
        voxels[cavities] = -850.0
        voxels[nodule] = 40.0
        return Volume(voxels, (1.0, 1.0, 1.0)), cavities, nodule

    def test_covers_cavities(self, chest):
        volume, cavities, _ = chest
        mask = lung_mask(volume).astype(bool)
        recall = (mask & cavities).sum() / cavities.sum()
        assert recall >= 0.95
        assert not mask[0, 0, 0]

    def test_recovers_juxta_pleural_nodule(self, chest):
        volume, _, nodule = chest
        mask = lung_mask(volume).astype(bool)
        assert mask[32, 14, 32]
        assert (mask & nodule).sum() / nodule.sum() >= 0.5

    def test_constant_volume_is_degenerate(self):
        with pytest.raises(PreprocessError, match='degenerate histogram'):
            lung_mask(make_volume(value=-1000.0))

    def test_noisy_air_volume_has_no_cavity(self):
        voxels = -1000.0 + 20.0 * np.random.default_rng(3).standard_normal((32, 32, 32))
        with pytest.raises(PreprocessError, match='no lung cavity'):
            lung_mask(Volume(voxels.astype(np.float32), (1.0, 1.0, 1.0)))

    def test_apply_multiplies_by_mask(self, chest):
        volume, cavities, _ = chest
        masked = apply_lung_mask(volume, cavities)
        assert np.all(masked.voxels[~cavities] == 0.0)
        np.testing.assert_array_equal(masked.voxels[cavities], volume.voxels[cavities])


class TestExtractPatch:

    @pytest.fixture
    def volume(self):
        voxels = np.full((96, 96, 96), -300.0)
        voxels[_ball(voxels.shape, (48, 48, 48), 10)] = 40.0
        return Volume(voxels, (0.5, 0.5, 0.5))

    def test_cube_contains_whole_nodule(self, volume):
        mask = _ball(volume.shape, (48, 48, 48), 10).astype(np.uint8)
        patch, crop = extract_patch(volume, (24.0, 24.0, 24.0), 10.0, Modality.CUBE64, 64, mask)
        assert patch.data.shape == (2, 64, 64, 64)
        assert crop.sum() == mask.sum()
        assert not patch.metadata['out_of_bounds']

    def test_tight_crop_size(self, volume):
        patch, _ = extract_patch(volume, (24.0, 24.0, 24.0), 8.0, Modality.X)
        assert patch.spatial_shape == (16, 16, 16)

    def test_tight_crop_stride_alignment(self, volume):
        patch, _ = extract_patch(volume, (24.0, 24.0, 24.0), 9.0, Modality.X, stride_align=4)
        assert patch.spatial_shape == (20, 20, 20)

    def test_padding_margins(self, volume):
        tight, _ = extract_patch(volume, (10.0, 10.0, 10.0), 8.0, Modality.X)
        padded, _ = extract_patch(volume, (10.0, 10.0, 10.0), 8.0, Modality.X_PADDING_64, 64)
        assert padded.data.shape == (2, 64, 64, 64)
        np.testing.assert_array_equal(padded.data[:, 24:40, 24:40, 24:40], tight.data)
        inner = np.zeros((64, 64, 64), dtype=bool)
        inner[24:40, 24:40, 24:40] = True
        assert np.all(padded.data[:, ~inner] == 0.0)

    def test_resize_fills_the_cube(self, volume):
        patch, crop = extract_patch(
            volume, (24.0, 24.0, 24.0), 8.0, Modality.X_RESIZE_64, 64, np.ones(volume.shape, dtype=np.uint8),
        )
        assert patch.data.shape == (2, 64, 64, 64)
        assert crop.all()
        assert 0.0 <= patch.data.min() and patch.data.max() <= 1.0

    def test_out_of_bounds_is_zero_padded(self, volume):
        patch, _ = extract_patch(volume, (0.0, 0.0, 0.0), 10.0, Modality.CUBE64, 32)
        assert patch.metadata['out_of_bounds']
        assert np.all(patch.data[:, :16, :16, :16] == 0.0)
        assert patch.data[0, 20, 20, 20] == pytest.approx(0.5)


class TestAugment:

    @pytest.fixture
    def sample(self, rng):
        mask = (rng.random((8, 8, 8)) > 0.7).astype(np.uint8)
        data = np.stack([mask.astype(np.float32), rng.random((8, 8, 8)).astype(np.float32)])
        return NodulePatch(data, Modality.CUBE64, 8), mask

    def test_deterministic(self, sample):
        patch, mask = sample
        a, ma = augment(patch, mask, seed=42)
        b, mb = augment(patch, mask, seed=42)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(ma, mb)

    def test_preserves_voxel_multisets(self, sample):
        patch, mask = sample
        for seed in range(20):
            out, out_mask = augment(patch, mask, seed=seed)
            for c in range(2):
                np.testing.assert_array_equal(np.sort(out.data[c], axis=None), np.sort(patch.data[c], axis=None))
            assert out_mask.sum() == mask.sum()

    def test_mask_follows_the_patch(self, sample):
        patch, mask = sample
        for seed in range(20):
            out, out_mask = augment(patch, mask, seed=seed)
            np.testing.assert_array_equal(out.data[0], out_mask.astype(np.float32))


def test_preprocess_manifest_writes_loadable_patches(tmp_path):
    write_dataset(PhantomSpec(n_sure=4, n_unsure=4, side=16, seed=2, rater_noise=0.0), tmp_path / 'raw')
    ingested, _ = ingest_manifest(DatasetManifest.load(tmp_path / 'raw' / 'manifest.jsonl'), tmp_path / 'ingested')

    processed = preprocess_manifest(ingested, tmp_path / 'prepared', Modality.CUBE64, 16, 0.5)

    assert all(e.patch_path for e in processed.entries)
    sure, unsure = load_samples(DatasetManifest.load(tmp_path / 'prepared' / 'manifest.jsonl'))
    assert len(sure) == 4
    assert len(unsure) == len(ingested.by_tag('unsure'))
    assert all(s.patch.data.shape == (2, 16, 16, 16) for s in sure + unsure)
