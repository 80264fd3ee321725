from .backbone import ResNetBackbone, ResidualBlock
from .config import BackboneConfig
from .fnet import FNet
from .heads import CNet, RNet, global_average_pool
from .model import (
    ModelOutputs,
    SynergicModel,
    count_parameters,
    load_checkpoint,
    mask_tensor,
    patch_tensor,
    save_checkpoint,
)
from .segnet import SegNet

__all__ = [
    'BackboneConfig',
    'CNet',
    'FNet',
    'ModelOutputs',
    'RNet',
    'ResNetBackbone',
    'ResidualBlock',
    'SegNet',
    'SynergicModel',
    'count_parameters',
    'global_average_pool',
    'load_checkpoint',
    'mask_tensor',
    'patch_tensor',
    'save_checkpoint',
]
