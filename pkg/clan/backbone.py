"""
Small convolutional feature extractor.

Each stage is `stage_blocks[s]` conv3x3+relu blocks followed by a 2×2 max pool
with stride 2, so stage s emits maps of extent input_size / 2**s. Selected
stages are tapped as middle maps; `top_stage` is the last stage computed.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Union

import numpy as np

from clan import ops
from clan.attention import FeatureMap
from clan.errors import ConfigurationError, DimensionError
from clan.tensor import Tensor, fan_in_uniform, zeros_parameter

logger = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    stage_blocks: List[int] = field(default_factory=lambda: [1, 1, 1])
    input_size: int = 32
    tap_stages: List[int] = field(default_factory=lambda: [2])
    top_stage: int = 3
    in_channels: int = 3

    def validate(self) -> None:
        if len(self.stage_channels) != len(self.stage_blocks):
            raise ConfigurationError(
                f"stage_channels {self.stage_channels} and stage_blocks "
                f"{self.stage_blocks} must have the same length"
            )
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.stage_blocks):
            raise ConfigurationError("every stage needs >= 1 channel and >= 1 block")
        if not 1 <= self.top_stage <= len(self.stage_channels):
            raise ConfigurationError(
                f"top_stage {self.top_stage} outside [1, {len(self.stage_channels)}]"
            )
        if any(b <= a for a, b in zip(self.tap_stages, self.tap_stages[1:])):
            raise ConfigurationError(f"tap_stages must be strictly ascending: {self.tap_stages}")
        if any(not 1 <= s < self.top_stage for s in self.tap_stages):
            raise ConfigurationError(
                f"tap_stages {self.tap_stages} must lie in [1, top_stage={self.top_stage})"
            )
        if self.input_size < 1 or self.input_size % (2 ** self.top_stage):
            raise ConfigurationError(
                f"input size {self.input_size} is not divisible through "
                f"{self.top_stage} stride-2 stages"
            )

    def channels(self, stage: int) -> int:
        return self.stage_channels[stage - 1]

    def extent(self, stage: int) -> int:
        return self.input_size // (2 ** stage)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> Dict[str, Tensor]:
    """He-style uniform conv weights, zero biases, in stage/block order."""
    cfg.validate()
    weights: Dict[str, Tensor] = {}
    c_in = cfg.in_channels
    for stage in range(1, cfg.top_stage + 1):
        c_out = cfg.channels(stage)
        for block in range(cfg.stage_blocks[stage - 1]):
            name = f"backbone.s{stage}.b{block}"
            weights[f"{name}.weight"] = fan_in_uniform(
                rng, (c_out, c_in, 3, 3), c_in * 9, gain=np.sqrt(2.0), name=f"{name}.weight"
            )
            weights[f"{name}.bias"] = zeros_parameter((c_out,), name=f"{name}.bias")
            c_in = c_out
    return weights


def backbone_forward(
    x: Tensor, cfg: BackboneConfig, weights: Mapping[str, Tensor]
) -> List[FeatureMap]:
    """Return the tapped middle maps (ascending stage) followed by the top map."""
    cfg.validate()
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"backbone expects b×{cfg.in_channels}×H×W input, got {x.shape}"
        )
    if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ConfigurationError(
            f"input extents {x.shape[2:]} do not match input_size {cfg.input_size}"
        )

    stage_maps: Dict[int, FeatureMap] = {}
    h = x
    for stage in range(1, cfg.top_stage + 1):
        for block in range(cfg.stage_blocks[stage - 1]):
            name = f"backbone.s{stage}.b{block}"
            h = ops.relu(
                ops.conv2d(h, weights[f"{name}.weight"], weights[f"{name}.bias"], 1, 1)
            )
        h = ops.pool2d(h, 'max', window=2, stride=2)
        stage_maps[stage] = FeatureMap(h, stage=stage, top_stage=cfg.top_stage)

    return [stage_maps[s] for s in cfg.tap_stages] + [stage_maps[cfg.top_stage]]


def count_parameters(model: Union[Mapping[str, Tensor], object]) -> int:
    """
    Exact number of learnable scalars.

    Accepts a name → Tensor mapping or anything exposing named_parameters().
    """
    if hasattr(model, 'named_parameters'):
        params = model.named_parameters()
    else:
        params = model
    return int(sum(t.size for t in params.values()))


def backbone_macs(cfg: BackboneConfig) -> int:
    """Multiply-accumulates of one forward pass for a single image."""
    cfg.validate()
    total, c_in, extent = 0, cfg.in_channels, cfg.input_size
    for stage in range(1, cfg.top_stage + 1):
        c_out = cfg.channels(stage)
        for _ in range(cfg.stage_blocks[stage - 1]):
            total += extent * extent * c_out * c_in * 9
            c_in = c_out
        extent //= 2
    return total
