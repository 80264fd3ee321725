from pydantic import BaseModel, ConfigDict

from synergic.errors import ConfigError

SPATIAL_REDUCTION = 4


class BackboneConfig(BaseModel):
    """
    Widths and layout of the synergic model.

    ``channels`` is (head, block1, block2, block3); block3 is also the FNet
    fusion width K. ``seg_channels`` are the two SegNet reduction widths.
    """

    model_config = ConfigDict(frozen=True)

    side: int = 64
    in_channels: int = 2
    channels: tuple[int, int, int, int] = (64, 64, 128, 256)
    groups: int = 8
    dilations: tuple[int, int, int] = (1, 2, 4)
    seg_channels: tuple[int, int] = (32, 16)
    use_fnet: bool = True

    @property
    def feature_channels(self):
        return self.channels[3]

    @property
    def feature_side(self):
        return self.side // SPATIAL_REDUCTION

    def check(self):
        if self.side % SPATIAL_REDUCTION != 0:
            raise ConfigError(f"side {self.side} is not divisible by {SPATIAL_REDUCTION}")
        if any(c < 1 for c in self.channels + self.seg_channels) or self.groups < 1:
            raise ConfigError("channel and group counts must be positive")
        return self

    @classmethod
    def tiny(cls, side=16, **overrides):
        """Quarter-width configuration for fast tests and gradient checks"""
        return cls(side=side, channels=(16, 16, 32, 64), seg_channels=(8, 4), groups=4, **overrides)
