"""
CLAN assembly: backbone + CLCA per middle stage + CLSA gates on the top map,
one linear head per branch, the multi-branch loss and branch-averaged
prediction.

Branch order is fixed: A{stage} for each tapped stage (ascending), G for the
top map, CLSA for the concatenated attention-gated top maps.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from clan import ops
from clan.attention import (
    ClcaParams,
    ClsaParams,
    ClsaPooling,
    FeatureMap,
    Gate,
    RelationMetric,
    clca_forward,
    clsa_forward,
    refine_top,
)
from clan.backbone import (
    BackboneConfig,
    backbone_forward,
    backbone_macs,
    count_parameters,
    init_backbone,
)
from clan.errors import ConfigurationError, DimensionError, UsageError
from clan.tensor import Tensor, fan_in_uniform, get_dtype, zeros_parameter

logger = logging.getLogger(__name__)

MIDDLE_MODES = ('clca', 'nonlocal', 'gap')


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 8
    middle: str = 'clca'
    clsa: bool = True
    metric: RelationMetric = RelationMetric.DOT_PRODUCT
    pooling: ClsaPooling = ClsaPooling.AVG_MAX
    gate: Gate = Gate.LINEAR
    c_int: int = 0
    upsample_mode: str = 'nearest'
    branch_weights: Optional[List[float]] = None

    def validate(self) -> None:
        self.backbone.validate()
        if self.middle not in MIDDLE_MODES:
            raise ConfigurationError(f"middle must be one of {MIDDLE_MODES}, got '{self.middle}'")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.c_int < 0:
            raise ConfigurationError(f"c_int must be >= 0 (0 = auto), got {self.c_int}")
        if (self.middle != 'gap' or self.clsa) and not self.backbone.tap_stages:
            raise ConfigurationError("attention modules need at least one tapped middle stage")
        names = branch_names_for(self)
        if self.branch_weights is not None and len(self.branch_weights) != len(names):
            raise ConfigurationError(
                f"{len(self.branch_weights)} branch weights for {len(names)} branches {names}"
            )


def branch_names_for(config: ModelConfig) -> List[str]:
    names = [f"A{s}" for s in config.backbone.tap_stages] + ['G']
    if config.clsa:
        names.append('CLSA')
    return names


@dataclass
class LinearHead:
    weight: Tensor
    bias: Tensor

    def __call__(self, features: Tensor) -> Tensor:
        return ops.linear(features, self.weight, self.bias)


@dataclass
class BranchOutputs:
    names: List[str]
    logits: List[Tensor]
    # CLSA attention maps M^s keyed by middle stage (before downsampling)
    attention_maps: Dict[int, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.names) != len(self.logits):
            raise DimensionError(f"{len(self.names)} branch names for {len(self.logits)} logits")
        shapes = {t.shape for t in self.logits}
        if len(shapes) > 1:
            raise DimensionError(f"branch logits disagree in shape: {sorted(shapes)}")

    def by_name(self, name: str) -> Tensor:
        if name not in self.names:
            raise UsageError(f"Unknown branch '{name}', available: {self.names}")
        return self.logits[self.names.index(name)]


@dataclass
class ClanModel:
    config: ModelConfig
    backbone: Dict[str, Tensor]
    clca: Dict[int, ClcaParams]
    clsa: Dict[int, ClsaParams]
    heads: Dict[str, LinearHead]

    @property
    def branch_names(self) -> List[str]:
        return branch_names_for(self.config)

    def named_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = dict(self.backbone)
        for stage in sorted(self.clca):
            params.update(self.clca[stage].named_parameters())
        for stage in sorted(self.clsa):
            params.update(self.clsa[stage].named_parameters())
        for name in self.branch_names:
            head = self.heads[name]
            params[f"head.{name}.weight"] = head.weight
            params[f"head.{name}.bias"] = head.bias
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Copy arrays into the model; names and shapes must match exactly."""
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise DimensionError(
                f"checkpoint does not fit the model: missing {missing[:5]}, "
                f"unexpected {unexpected[:5]}"
            )
        for name, tensor in params.items():
            array = np.asarray(state[name])
            if array.shape != tensor.shape:
                raise DimensionError(
                    f"checkpoint tensor '{name}' has shape {array.shape}, model expects {tensor.shape}"
                )
            tensor.data = np.ascontiguousarray(array, dtype=get_dtype())

    def unused_parameters(self) -> List[str]:
        """Parameters that the current configuration never reads."""
        unused: List[str] = []
        for params in self.clca.values():
            unused += params.unused_parameters()
        return unused

    def as_baseline(self) -> 'ClanModel':
        """
        The GAP baseline view of this model: same backbone and A/G heads,
        no attention modules. Tensors are shared, not copied.
        """
        config = replace(self.config, middle='gap', clsa=False, branch_weights=None)
        heads = {name: self.heads[name] for name in branch_names_for(config)}
        return ClanModel(config=config, backbone=self.backbone, clca={}, clsa={}, heads=heads)


def build_model(config: ModelConfig, seed: int) -> ClanModel:
    """Initialise every weight from a single seeded generator, in a fixed order."""
    config.validate()
    rng = np.random.default_rng(seed)
    cfg = config.backbone
    backbone = init_backbone(cfg, rng)

    clca: Dict[int, ClcaParams] = {}
    if config.middle != 'gap':
        for stage in cfg.tap_stages:
            clca[stage] = ClcaParams.create(
                stage,
                c_s=cfg.channels(stage),
                c_g=cfg.channels(cfg.top_stage),
                rng=rng,
                c_int=config.c_int,
                metric=config.metric,
                upsample_mode=config.upsample_mode,
                cross_layer=config.middle == 'clca',
            )

    clsa: Dict[int, ClsaParams] = {}
    if config.clsa:
        for stage in cfg.tap_stages:
            clsa[stage] = ClsaParams.create(stage, pooling=config.pooling, gate=config.gate)

    heads: Dict[str, LinearHead] = {}
    top_channels = cfg.channels(cfg.top_stage)
    for name in branch_names_for(config):
        if name == 'G':
            width = top_channels
        elif name == 'CLSA':
            width = len(cfg.tap_stages) * top_channels
        else:
            width = cfg.channels(int(name[1:]))
        heads[name] = LinearHead(
            weight=fan_in_uniform(rng, (width, config.num_classes), width, name=f"head.{name}.weight"),
            bias=zeros_parameter((config.num_classes,), name=f"head.{name}.bias"),
        )

    model = ClanModel(config=config, backbone=backbone, clca=clca, clsa=clsa, heads=heads)
    logger.debug(f"Built model with branches {model.branch_names}")
    return model


def clan_forward(model: ClanModel, x: Tensor) -> BranchOutputs:
    """Run every branch and return their logits in branch order."""
    config = model.config
    maps = backbone_forward(x, config.backbone, model.backbone)
    middles, top = maps[:-1], maps[-1]

    refined: List[FeatureMap] = []
    for mid in middles:
        if config.middle == 'gap':
            refined.append(mid)
        else:
            refined.append(clca_forward(mid, top, model.clca[mid.stage]))

    logits = [model.heads[f"A{m.stage}"](ops.global_avg_pool(m.tensor)) for m in refined]
    logits.append(model.heads['G'](ops.global_avg_pool(top.tensor)))

    attention_maps: Dict[int, Tensor] = {}
    if config.clsa:
        attended = []
        for mid in refined:
            gated = clsa_forward(mid, top, model.clsa[mid.stage])
            attention_maps[mid.stage] = gated.attention
            attended.append(gated)
        refined_top = refine_top(attended)
        logits.append(model.heads['CLSA'](ops.global_avg_pool(refined_top.tensor)))

    return BranchOutputs(names=model.branch_names, logits=logits, attention_maps=attention_maps)


def clan_loss(
    outputs: BranchOutputs,
    labels: Sequence[int],
    weights: Optional[Sequence[float]] = None,
) -> Tensor:
    """Σ_branch weight_b · cross_entropy(logits_b, labels); unit weights by default."""
    if weights is None:
        weights = [1.0] * len(outputs.names)
    if len(weights) != len(outputs.names):
        raise UsageError(
            f"{len(weights)} branch weights for {len(outputs.names)} branches {outputs.names}"
        )
    total: Optional[Tensor] = None
    for weight, logits in zip(weights, outputs.logits):
        term = ops.scale(ops.cross_entropy(logits, labels), weight)
        total = term if total is None else ops.add(total, term)
    return total


def softmax_probabilities(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def clan_predict(outputs: BranchOutputs, subset: Iterable[str]) -> np.ndarray:
    """
    Per-sample argmax of the mean softmax probability over `subset`.
    Ties resolve to the lowest class index.
    """
    selected = set(subset)
    if not selected:
        raise UsageError("clan_predict needs a non-empty branch subset")
    unknown = sorted(selected - set(outputs.names))
    if unknown:
        raise UsageError(f"Unknown branch(es) {unknown}, available: {outputs.names}")

    total = None
    for name, logits in zip(outputs.names, outputs.logits):
        if name not in selected:
            continue
        probs = softmax_probabilities(logits.data)
        total = probs if total is None else total + probs
    return np.argmax(total / len(selected), axis=1)


def resolve_branch_subset(names: Sequence[str], expression: str) -> List[str]:
    """
    Turn a '+'-joined expression into branch names, in branch order.

    Tokens: G, CLSA, A<stage>, P (highest tapped stage), A (other tapped
    stages) and all.
    """
    middle = [n for n in names if n.startswith('A')]
    aliases = {
        'all': list(names),
        'P': middle[-1:],
        'A': middle[:-1],
    }
    chosen = set()
    for token in (t.strip() for t in expression.split('+')):
        if token in aliases:
            chosen.update(aliases[token])
        elif token in names:
            chosen.add(token)
        else:
            raise UsageError(f"Unknown branch token '{token}' in '{expression}', available: {list(names)}")
    resolved = [n for n in names if n in chosen]
    if not resolved:
        raise UsageError(f"Branch expression '{expression}' selects no branch")
    return resolved


def default_subsets(names: Sequence[str]) -> List[str]:
    """Each branch alone, then G+P, G+P+A (when A is non-empty) and all."""
    middle = [n for n in names if n.startswith('A')]
    subsets = list(names)
    if middle and 'G' in names:
        subsets.append('G+P')
        if len(middle) > 1:
            subsets.append('G+P+A')
    if len(names) > 1:
        subsets.append('all')
    return subsets


def model_complexity(model: ClanModel) -> Dict[str, int]:
    """Parameter and multiply-accumulate counts per part, for one image."""
    config = model.config
    cfg = config.backbone
    c_g = cfg.channels(cfg.top_stage)
    n_g = cfg.extent(cfg.top_stage) ** 2

    attention_macs = 0
    for stage, params in model.clca.items():
        n, c_s, c_int = cfg.extent(stage) ** 2, params.mid_channels, params.inter_channels
        if params.cross_layer:
            attention_macs += n * c_s * (c_s + c_g)
        relation_width = c_int if params.metric.uses_embeddings else c_s
        if params.metric.uses_embeddings:
            attention_macs += 2 * n * c_int * c_s
        attention_macs += n * n * relation_width  # relations
        attention_macs += n * c_int * c_s  # W_k
        attention_macs += n * n * c_int  # aggregation
        attention_macs += n * c_s * c_int  # W_y
    for stage, params in model.clsa.items():
        n = cfg.extent(stage) ** 2
        attention_macs += n * len(params.pooling.modes) * 9 + n_g * c_g

    attention_params = sum(count_parameters(p) for p in model.clca.values())
    attention_params += sum(count_parameters(p) for p in model.clsa.values())
    head_params = sum(h.weight.size + h.bias.size for h in model.heads.values())
    head_macs = sum(h.weight.size for h in model.heads.values())

    report = {
        'backbone_params': count_parameters(model.backbone),
        'attention_params': attention_params,
        'head_params': head_params,
        'backbone_macs': backbone_macs(cfg),
        'attention_macs': attention_macs,
        'head_macs': head_macs,
    }
    report['total_params'] = report['backbone_params'] + attention_params + head_params
    report['total_macs'] = report['backbone_macs'] + attention_macs + head_macs
    return report
