import json
from enum import Enum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import Config
from synergic.data_model import Modality
from synergic.errors import ConfigError
from synergic.losses import LossWeights
from synergic.network.config import BackboneConfig


class ModelVariant(str, Enum):
    A = 'A'  # ResNet + CNet
    D = 'D'  # + SegNet, RNet
    F = 'F'  # + FNet fusion
    I = 'I'  # + CSL
    J = 'J'  # + ad-CSL


# variant -> (use_fnet, alpha, beta, gamma, adaptive)
VARIANT_TABLE = {
    ModelVariant.A: (False, 0.0, 0.0, 0.0, True),
    ModelVariant.D: (False, 0.0, 1.0, 1.0, True),
    ModelVariant.F: (True, 0.0, 1.0, 1.0, True),
    ModelVariant.I: (True, 1.0, 1.0, 1.0, False),
    ModelVariant.J: (True, 1.0, 1.0, 1.0, True),
}


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    lr: float = Field(1e-3, gt=0)
    max_epochs: int = Field(100, ge=1)
    batch_size: int = Field(1, ge=1)
    folds: int = Field(5, ge=2)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    weights: LossWeights = LossWeights()
    seed: int = Field(default_factory=lambda: Config.SEED)
    side: int = Field(default_factory=lambda: Config.SIDE)
    modality: Modality = Modality.CUBE64
    variant: ModelVariant | None = None
    network: BackboneConfig | None = None
    device: str = Field(default_factory=lambda: Config.DEVICE)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    prefetch_depth: int = Field(default_factory=lambda: Config.PREFETCH_DEPTH, ge=1)
    retrieval_k: int = Field(default_factory=lambda: Config.RETRIEVAL_K, ge=1)

    @model_validator(mode='after')
    def _check_batching(self):
        if self.batch_size > 1 and not self.modality.is_cubic:
            raise ValueError("batch_size > 1 requires a cubic modality")
        return self

    def backbone(self):
        """Network config with the variant's FNet switch applied"""
        network = self.network or BackboneConfig(side=self.side)
        if network.side != self.side:
            network = network.model_copy(update={'side': self.side})
        if self.variant is not None:
            network = network.model_copy(update={'use_fnet': VARIANT_TABLE[self.variant][0]})
        return network.check()

    def loss_weights(self):
        if self.variant is None:
            return self.weights
        _, alpha, beta, gamma, adaptive = VARIANT_TABLE[self.variant]
        return self.weights.model_copy(update={
            'alpha': alpha, 'beta': beta, 'gamma': gamma, 'adaptive': adaptive,
        })

    @classmethod
    def from_file(cls, path, **overrides):
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from e
        payload.update({k: v for k, v in overrides.items() if v is not None})
        return cls.parse(payload)

    @classmethod
    def parse(cls, payload):
        try:
            return cls.model_validate(payload)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding='utf-8')
        return path
