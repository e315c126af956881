"""
Cross-layer attention layers.

CLCA refines a middle-stage map with a non-local style aggregation whose
position relations are measured on the middle map fused with the upsampled
top map. CLSA turns a refined middle map into a one-channel spatial gate and
applies it to the top map. Both are pure functions of (inputs, params).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from clan import ops
from clan.errors import ConfigurationError, DimensionError, UsageError
from clan.tensor import Tensor, fan_in_uniform, zeros_parameter

logger = logging.getLogger(__name__)


class RelationMetric(str, Enum):
    GAUSSIAN = 'gaussian'
    EMBEDDED_GAUSSIAN = 'embedded_gaussian'
    DOT_PRODUCT = 'dot_product'

    @property
    def uses_embeddings(self) -> bool:
        return self is not RelationMetric.GAUSSIAN


class ClsaPooling(str, Enum):
    AVG = 'avg'
    MAX = 'max'
    AVG_MAX = 'avg_max'

    @property
    def modes(self) -> Tuple[str, ...]:
        return {'avg': ('avg',), 'max': ('max',), 'avg_max': ('avg', 'max')}[self.value]


class Gate(str, Enum):
    LINEAR = 'linear'
    SIGMOID = 'sigmoid'


UPSAMPLE_MODES = ('nearest', 'bilinear')


@dataclass
class FeatureMap:
    """A b×C×H×W activation tagged with the backbone stage it belongs to."""

    tensor: Tensor
    stage: int
    top_stage: Optional[int] = None
    # for attention-gated top maps: the middle stage that produced the gate
    source_stage: Optional[int] = None
    # the one-channel map that gated it, kept for inspection
    attention: Optional[Tensor] = None

    def __post_init__(self):
        if self.tensor.ndim != 4:
            raise DimensionError(f"FeatureMap needs a rank-4 tensor, got {self.tensor.shape}")
        if self.stage < 1 or (self.top_stage is not None and self.stage > self.top_stage):
            raise ConfigurationError(
                f"FeatureMap stage {self.stage} outside [1, {self.top_stage}]"
            )

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]

    @property
    def height(self) -> int:
        return self.tensor.shape[2]

    @property
    def width(self) -> int:
        return self.tensor.shape[3]

    @property
    def spatial_positions(self) -> int:
        return self.height * self.width


@dataclass
class RelationMatrix:
    """
    Pairwise relations between the positions of one map, b×n×n.

    For the softmax metrics `values` are already row-normalised. For the dot
    product metric they are the raw logits and `scale` (1/n) is applied when
    aggregating.
    """

    values: Tensor
    normalizer: str
    scale: float = 1.0


def default_inter_channels(c_s: int) -> int:
    return max(1, c_s // 2)


@dataclass
class ClcaParams:
    """Weights of one cross-layer context attention block (one middle stage)."""

    stage: int
    W_l: Tensor
    b_l: Tensor
    W_g: Tensor
    b_g: Tensor
    W_theta: Tensor
    b_theta: Tensor
    W_phi: Tensor
    b_phi: Tensor
    W_k: Tensor
    b_k: Tensor
    W_y: Tensor
    b_y: Tensor
    metric: RelationMetric = RelationMetric.DOT_PRODUCT
    upsample_mode: str = 'nearest'
    cross_layer: bool = True

    _WEIGHTS = (
        'W_l', 'b_l', 'W_g', 'b_g', 'W_theta', 'b_theta',
        'W_phi', 'b_phi', 'W_k', 'b_k', 'W_y', 'b_y',
    )

    @classmethod
    def create(
        cls,
        stage: int,
        c_s: int,
        c_g: int,
        rng: np.random.Generator,
        c_int: int = 0,
        metric: RelationMetric = RelationMetric.DOT_PRODUCT,
        upsample_mode: str = 'nearest',
        cross_layer: bool = True,
    ) -> 'ClcaParams':
        """
        Fresh block for stage `stage`. W_y and every bias start at zero so the
        block is the identity on its middle map until training moves W_y.
        """
        if upsample_mode not in UPSAMPLE_MODES:
            raise ConfigurationError(f"upsample mode must be one of {UPSAMPLE_MODES}")
        c_int = c_int or default_inter_channels(c_s)
        prefix = f"clca.s{stage}"
        return cls(
            stage=stage,
            W_l=fan_in_uniform(rng, (c_s, c_s), c_s, name=f"{prefix}.W_l"),
            b_l=zeros_parameter((c_s,), name=f"{prefix}.b_l"),
            W_g=fan_in_uniform(rng, (c_s, c_g), c_g, name=f"{prefix}.W_g"),
            b_g=zeros_parameter((c_s,), name=f"{prefix}.b_g"),
            W_theta=fan_in_uniform(rng, (c_int, c_s), c_s, name=f"{prefix}.W_theta"),
            b_theta=zeros_parameter((c_int,), name=f"{prefix}.b_theta"),
            W_phi=fan_in_uniform(rng, (c_int, c_s), c_s, name=f"{prefix}.W_phi"),
            b_phi=zeros_parameter((c_int,), name=f"{prefix}.b_phi"),
            W_k=fan_in_uniform(rng, (c_int, c_s), c_s, name=f"{prefix}.W_k"),
            b_k=zeros_parameter((c_int,), name=f"{prefix}.b_k"),
            W_y=zeros_parameter((c_s, c_int), name=f"{prefix}.W_y"),
            b_y=zeros_parameter((c_s,), name=f"{prefix}.b_y"),
            metric=RelationMetric(metric),
            upsample_mode=upsample_mode,
            cross_layer=cross_layer,
        )

    @property
    def mid_channels(self) -> int:
        return self.W_l.shape[0]

    @property
    def top_channels(self) -> int:
        return self.W_g.shape[1]

    @property
    def inter_channels(self) -> int:
        return self.W_k.shape[0]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {f"clca.s{self.stage}.{w}": getattr(self, w) for w in self._WEIGHTS}

    def unused_parameters(self) -> List[str]:
        """Names that receive no gradient under the current metric / mode."""
        unused = []
        if not self.metric.uses_embeddings:
            unused += ['W_theta', 'b_theta', 'W_phi', 'b_phi']
        elif self.metric is RelationMetric.EMBEDDED_GAUSSIAN:
            # θ_i·b_phi is constant along each softmax row
            unused.append('b_phi')
        if not self.cross_layer:
            unused += ['W_l', 'b_l', 'W_g', 'b_g']
        return [f"clca.s{self.stage}.{w}" for w in unused]


@dataclass
class ClsaParams:
    """Weights of one cross-layer spatial attention block (one middle stage)."""

    stage: int
    kernel: Tensor
    bias: Tensor
    pooling: ClsaPooling = ClsaPooling.AVG_MAX
    gate: Gate = Gate.LINEAR

    @classmethod
    def create(
        cls,
        stage: int,
        pooling: ClsaPooling = ClsaPooling.AVG_MAX,
        gate: Gate = Gate.LINEAR,
    ) -> 'ClsaParams':
        """Zero kernel and bias: the attention map starts as a constant."""
        pooling = ClsaPooling(pooling)
        prefix = f"clsa.s{stage}"
        return cls(
            stage=stage,
            kernel=zeros_parameter((1, len(pooling.modes), 3, 3), name=f"{prefix}.kernel"),
            bias=zeros_parameter((1,), name=f"{prefix}.bias"),
            pooling=pooling,
            gate=Gate(gate),
        )

    def named_parameters(self) -> Dict[str, Tensor]:
        prefix = f"clsa.s{self.stage}"
        return {f"{prefix}.kernel": self.kernel, f"{prefix}.bias": self.bias}


def _positions(x: Tensor) -> Tensor:
    """b×C×H×W → b×C×n."""
    b, c, h, w = x.shape
    return ops.reshape(x, (b, c, h * w))


def _check_pair(mid: FeatureMap, top: FeatureMap) -> None:
    if top.top_stage is not None and top.stage != top.top_stage:
        raise ConfigurationError(f"stage {top.stage} is not the top stage {top.top_stage}")
    if mid.stage >= top.stage:
        raise ConfigurationError(
            f"middle stage {mid.stage} must come before top stage {top.stage}"
        )
    if top.height > mid.height or top.width > mid.width:
        raise DimensionError(
            f"top map {top.tensor.shape} is larger than middle map {mid.tensor.shape}"
        )
    if mid.tensor.shape[0] != top.tensor.shape[0]:
        raise DimensionError(f"batch mismatch: {mid.tensor.shape} vs {top.tensor.shape}")


# ---------------------------------------------------------------------------
# CLCA
# ---------------------------------------------------------------------------


def clca_fuse(mid: FeatureMap, top: FeatureMap, params: ClcaParams) -> FeatureMap:
    """
    Fuse a middle map with the top map upsampled to its resolution:
    h_i = W_l·l_i + W_g·up(top)_i, computed as two 1×1 convolutions.
    """
    _check_pair(mid, top)
    if mid.channels != params.mid_channels or top.channels != params.top_channels:
        raise DimensionError(
            f"CLCA stage {params.stage} expects C_s={params.mid_channels}, "
            f"C_g={params.top_channels}; got {mid.tensor.shape} and {top.tensor.shape}"
        )
    upsampled = ops.resample(top.tensor, mid.height, mid.width, params.upsample_mode)
    fused = ops.add(
        ops.conv1x1(mid.tensor, params.W_l, params.b_l),
        ops.conv1x1(upsampled, params.W_g, params.b_g),
    )
    return FeatureMap(fused, stage=mid.stage, top_stage=mid.top_stage)


def relation_matrix(fused: FeatureMap, params: ClcaParams) -> RelationMatrix:
    """
    Pairwise relations f(h_i, h_j) between the positions of `fused`.

    gaussian:          softmax_j(h_i · h_j)
    embedded_gaussian: softmax_j(θ(h_i) · φ(h_j))
    dot_product:       θ(h_i) · φ(h_j), normalised by 1/n at aggregation
    """
    if fused.spatial_positions < 1:
        raise DimensionError("relation_matrix needs at least one position")
    if params.metric is RelationMetric.GAUSSIAN:
        x = _positions(fused.tensor)
        logits = ops.matmul(ops.swap_last(x), x)
        return RelationMatrix(ops.softmax_rows(logits), normalizer='softmax')

    theta = _positions(ops.conv1x1(fused.tensor, params.W_theta, params.b_theta))
    softmax = params.metric is RelationMetric.EMBEDDED_GAUSSIAN
    phi_bias = None if softmax else params.b_phi
    phi = _positions(ops.conv1x1(fused.tensor, params.W_phi, phi_bias))
    logits = ops.matmul(ops.swap_last(theta), phi)
    if softmax:
        return RelationMatrix(ops.softmax_rows(logits), normalizer='softmax')
    n = fused.spatial_positions
    return RelationMatrix(logits, normalizer='1/n', scale=1.0 / n)


def clca_forward(mid: FeatureMap, top: FeatureMap, params: ClcaParams) -> FeatureMap:
    """
    Refine `mid` with context whose relations come from the fused maps.

    y_i = C⁻¹ Σ_j f(h_i, h_j) · W_k l_j   (aggregates the ORIGINAL middle vectors)
    out_i = W_y y_i + l_i
    """
    _check_pair(mid, top)
    if params.cross_layer:
        source = clca_fuse(mid, top, params)
    else:
        if mid.channels != params.mid_channels:
            raise DimensionError(
                f"CLCA stage {params.stage} expects C_s={params.mid_channels}, got {mid.tensor.shape}"
            )
        source = mid
    relations = relation_matrix(source, params)

    b, _, h, w = mid.tensor.shape
    values = _positions(ops.conv1x1(mid.tensor, params.W_k, params.b_k))
    aggregated = ops.matmul(values, ops.swap_last(relations.values))
    if relations.scale != 1.0:
        aggregated = ops.scale(aggregated, relations.scale)
    aggregated = ops.reshape(aggregated, (b, params.inter_channels, h, w))

    refined = ops.add(ops.conv1x1(aggregated, params.W_y, params.b_y), mid.tensor)
    return FeatureMap(refined, stage=mid.stage, top_stage=mid.top_stage)


# ---------------------------------------------------------------------------
# CLSA
# ---------------------------------------------------------------------------


def clsa_attention_map(refined_mid: FeatureMap, params: ClsaParams) -> Tensor:
    """Channel-pool the refined map, then a 3×3 conv (padding 1) down to one channel."""
    modes = params.pooling.modes
    if params.kernel.shape[0] != 1 or params.kernel.shape[1] != len(modes):
        raise ConfigurationError(
            f"CLSA kernel {params.kernel.shape} does not fit pooling '{params.pooling.value}' "
            f"({len(modes)} channel(s) in, 1 out)"
        )
    pooled = ops.channel_pool(refined_mid.tensor, modes)
    attention = ops.conv2d(pooled, params.kernel, params.bias, stride=1, padding=1)
    if params.gate is Gate.SIGMOID:
        attention = ops.sigmoid(attention)
    return attention


def apply_spatial_gate(attention: Tensor, top: Tensor) -> Tensor:
    """Average-pool the map down to top's extents and multiply it across top's channels."""
    (h, w), (th, tw) = attention.shape[2:], top.shape[2:]
    if h % th or w % tw or h // th != w // tw:
        raise ConfigurationError(
            f"attention map {h}x{w} is not an integer multiple of top map {th}x{tw}"
        )
    downsampled = ops.resample(attention, th, tw)
    return ops.mul(downsampled, top)


def clsa_forward(refined_mid: FeatureMap, top: FeatureMap, params: ClsaParams) -> FeatureMap:
    """Gate the top map with the attention estimated from one refined middle map."""
    attention = clsa_attention_map(refined_mid, params)
    gated = apply_spatial_gate(attention, top.tensor)
    return FeatureMap(
        gated,
        stage=top.stage,
        top_stage=top.top_stage,
        source_stage=refined_mid.stage,
        attention=attention,
    )


def refine_top(attended: List[FeatureMap]) -> FeatureMap:
    """Concatenate the gated top maps along channels, ascending by middle stage."""
    if not attended:
        raise UsageError("refine_top needs at least one attended map")
    ordered = sorted(
        attended, key=lambda m: m.source_stage if m.source_stage is not None else 0
    )
    merged = ops.concat_channels([m.tensor for m in ordered])
    first = ordered[0]
    return FeatureMap(merged, stage=first.stage, top_stage=first.top_stage)
