import numpy as np
import pytest
import torch

from synergic.data_model import Modality, NodulePatch, SureSample, UnsureSample, Volume
from synergic.network.config import BackboneConfig
from synergic.phantom import PhantomSpec, generate


@pytest.fixture(scope='session')
def tiny_config():
    return BackboneConfig.tiny(side=16)


@pytest.fixture(scope='session')
def phantom_spec():
    return PhantomSpec(n_sure=12, n_unsure=8, side=16, class_separation=1.0, seed=11)


@pytest.fixture(scope='session')
def phantom_samples(phantom_spec):
    return generate(phantom_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def make_patch(side=16, value=0.5, seed=None):
    data = np.full((2, side, side, side), value, dtype=np.float32)
    if seed is not None:
        data = np.random.default_rng(seed).random((2, side, side, side)).astype(np.float32)
    return NodulePatch(data, Modality.CUBE64, side)


def make_sure(nodule_id, label, side=16, seed=0):
    return SureSample(make_patch(side, seed=seed), label, nodule_id)


def make_unsure(nodule_id, score=3.0, side=16, seed=0):
    mask = np.zeros((side,) * 3, dtype=np.uint8)
    c = side // 2
    mask[c - 2:c + 2, c - 2:c + 2, c - 2:c + 2] = 1
    return UnsureSample(make_patch(side, seed=seed), mask, score, nodule_id)


def make_volume(shape=(32, 32, 32), value=-850.0, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.full(shape, value, dtype=np.float32), spacing)
