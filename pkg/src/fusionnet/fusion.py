"""Model-level ensemble: both backbones' pooled features are flattened,
concatenated, and classified by a single two-node dense layer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbones import (
    MaxViTConfig,
    ResNetConfig,
    build_maxvit,
    build_resnet,
    maxvit_desk,
    maxvit_full,
    resnet_desk,
    resnet_full,
)
from .errors import ConfigurationError, DimensionError
from .nn import Dense, Module
from .tensor import RngState, Tensor, concat, cross_entropy, flatten, softmax

CLASS_NAMES = ("Normal", "Pneumonia")


@dataclass
class FusionModelConfig:
    resnet: ResNetConfig = field(default_factory=ResNetConfig)
    maxvit: MaxViTConfig = field(default_factory=MaxViTConfig)
    num_classes: int = 2

    @property
    def resolution(self) -> int:
        return self.resnet.resolution

    @property
    def classifier_in_dim(self) -> int:
        return self.resnet.feature_dim + self.maxvit.feature_dim

    def validate(self) -> None:
        if self.num_classes != 2:
            raise ConfigurationError(
                f"binary classifier requires num_classes == 2, got {self.num_classes}")
        if self.resnet.resolution != self.maxvit.resolution:
            raise ConfigurationError(
                f"backbone resolutions differ: residual CNN {self.resnet.resolution} "
                f"vs attention backbone {self.maxvit.resolution}")


@dataclass
class Prediction:
    """Logits, softmax probabilities, and argmax labels for one batch.

    Probability ties resolve to the lower class index (Normal).
    """

    logits: Tensor
    probabilities: Tensor
    predicted_class: np.ndarray

    def class_names(self) -> list[str]:
        return [CLASS_NAMES[i] for i in self.predicted_class]


class FusionModel(Module):
    def __init__(self, cfg: FusionModelConfig, rng: RngState):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.resnet = build_resnet(cfg.resnet, rng)
        self.maxvit = build_maxvit(cfg.maxvit, rng)
        self.classifier = Dense(cfg.classifier_in_dim, cfg.num_classes, rng=rng)

    def forward(self, x: Tensor) -> Prediction:
        res = self.cfg.resolution
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != res or x.shape[3] != res:
            raise DimensionError(
                f"fusion model expects (B, 3, {res}, {res}) input, got {x.shape}")
        fused = concat([flatten(self.resnet(x), 1), flatten(self.maxvit(x), 1)], axis=1)
        logits = self.classifier(fused)
        probabilities = softmax(logits, axis=1)
        predicted = np.argmax(probabilities.data, axis=1)
        return Prediction(logits=logits, probabilities=probabilities,
                          predicted_class=predicted)


def build_fusion(cfg: FusionModelConfig, rng: RngState) -> FusionModel:
    return FusionModel(cfg, rng)


def loss(pred: Prediction, labels) -> Tensor:
    """Mean cross-entropy over the batch, computed from logits."""
    return cross_entropy(pred.logits, labels)


def fusion_desk(resolution: int = 64) -> FusionModelConfig:
    return FusionModelConfig(resnet=resnet_desk(resolution), maxvit=maxvit_desk(resolution))


def fusion_full(resolution: int = 224) -> FusionModelConfig:
    return FusionModelConfig(resnet=resnet_full(resolution), maxvit=maxvit_full(resolution))
