"""
Finite-difference gradient checks.

finite_diff_check compares the autodiff gradient of a scalar function with
central differences. run_gradient_suite applies it to every primitive in
clan.ops and to the full multi-branch loss of a tiny model, once per
relation metric, pooling mode and gate.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from clan import ops
from clan.attention import ClsaPooling, Gate, RelationMetric
from clan.backbone import BackboneConfig
from clan.errors import UsageError
from clan.model import ModelConfig, build_model, clan_forward, clan_loss
from clan.tensor import Tensor, backward, get_precision, no_grad, topological_order

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-4
PRIMITIVE_THRESHOLD = 1e-5
COMPOSED_THRESHOLD = 1e-4
F32_THRESHOLD = 1e-3

# test points for the composed checks must sit this far from relu / max
# kinks, and no nonzero gradient entry may be below CANCELLATION_RATIO of
# its tensor's largest one (or below GRAD_FLOOR)
KINK_MARGIN = 1e-3
CANCELLATION_RATIO = 1e-3
GRAD_FLOOR = 1e-6
POINT_ATTEMPTS = 64

TINY_BACKBONE = BackboneConfig(
    stage_channels=[2, 3, 4], stage_blocks=[1, 1, 1], input_size=8, tap_stages=[1, 2], top_stage=3
)
TINY_CLASSES = 3
TINY_BATCH = 2


@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.threshold)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8
    )


def max_relative_error(
    f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = DEFAULT_EPS
) -> float:
    """
    Largest elementwise relative error between autodiff and central
    differences, over every element of every tensor in `inputs`.

    `f` is re-evaluated after each in-place perturbation, so it must be
    deterministic and read the tensors it is given.
    """
    for tensor in inputs:
        tensor.requires_grad = True
        tensor.grad = None
    loss = f()
    if loss.size != 1:
        raise UsageError(f"finite_diff_check needs a scalar function, got shape {loss.shape}")
    backward(loss)

    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        with no_grad():
            for index in range(flat.size):
                original = flat[index]
                flat[index] = original + eps
                plus = f().item()
                flat[index] = original - eps
                minus = f().item()
                flat[index] = original
                numeric.reshape(-1)[index] = (plus - minus) / (2.0 * eps)
        if analytic.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
        tensor.grad = None
    return worst


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = DEFAULT_EPS) -> float:
    """Max relative error of df/dx; denominator max(|a|, |b|, 1e-8)."""
    return max_relative_error(lambda: f(x), [x], eps)


def threshold_for(kind: str, precision: Optional[str] = None) -> float:
    if (precision or get_precision()) == 'f32':
        return F32_THRESHOLD
    return PRIMITIVE_THRESHOLD if kind == 'primitive' else COMPOSED_THRESHOLD


# ---------------------------------------------------------------------------
# Primitive checks
# ---------------------------------------------------------------------------


def _readout(rng: np.random.Generator, out: Tensor) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, size=out.shape))


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _distinct(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    # values at least 0.1 apart so max ops have no near-ties
    size = int(np.prod(shape))
    return rng.permutation(np.arange(size) * 0.1 - size * 0.05).reshape(shape)


def _primitive_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable, List[Tensor]]]:
    def t(*shape: int, low: float = -0.5, high: float = 0.5) -> Tensor:
        return Tensor(rng.uniform(low, high, size=shape))

    x4, y4, gate = t(2, 3, 4, 4), t(2, 3, 4, 4), t(2, 1, 4, 4)
    x5 = t(2, 3, 5, 5)
    kernel, bias = t(4, 3, 3, 3), t(4)
    m_a, m_b = t(2, 3, 4), t(4, 5)
    logits = t(3, 4, low=-2.0, high=2.0)
    w_lin, b_lin, x_lin = t(5, 3), t(3), t(4, 5)
    w_1x1, b_1x1 = t(2, 3), t(2)
    small, tall = t(2, 2, 2, 2), t(2, 2, 4, 4)
    relu_in = Tensor(_away_from_zero(rng, (2, 3, 4)))
    pool_in = Tensor(_distinct(rng, (2, 2, 4, 4)))
    chan_in = Tensor(_distinct(rng, (2, 3, 3, 3)))
    labels = [0, 3, 1]

    return {
        'add': (lambda: ops.add(x4, gate), [x4, gate]),
        'mul': (lambda: ops.mul(gate, y4), [gate, y4]),
        'scale': (lambda: ops.scale(x4, -1.7), [x4]),
        'relu': (lambda: ops.relu(relu_in), [relu_in]),
        'exp': (lambda: ops.exp(x4), [x4]),
        'sigmoid': (lambda: ops.sigmoid(ops.scale(x4, 4.0)), [x4]),
        'reshape': (lambda: ops.reshape(x4, (2, 3, 16)), [x4]),
        'transpose': (lambda: ops.transpose(m_a, (0, 2, 1)), [m_a]),
        'sum': (lambda: ops.tensor_sum(x4), [x4]),
        'matmul': (lambda: ops.matmul(m_a, m_b), [m_a, m_b]),
        'conv2d': (lambda: ops.conv2d(x4, kernel, bias, stride=1, padding=1), [x4, kernel, bias]),
        'conv2d_strided': (lambda: ops.conv2d(x5, kernel, None, stride=2, padding=0), [x5, kernel]),
        'pool2d_avg': (lambda: ops.pool2d(x4, 'avg', 2), [x4]),
        'pool2d_max': (lambda: ops.pool2d(pool_in, 'max', 2), [pool_in]),
        'channel_pool': (lambda: ops.channel_pool(chan_in, ('avg', 'max')), [chan_in]),
        'global_avg_pool': (lambda: ops.global_avg_pool(x4), [x4]),
        'resample_nearest': (lambda: ops.resample(small, 4, 4, 'nearest'), [small]),
        'resample_bilinear': (lambda: ops.resample(small, 4, 4, 'bilinear'), [small]),
        'resample_down': (lambda: ops.resample(tall, 2, 2), [tall]),
        'concat_channels': (lambda: ops.concat_channels([x4, gate]), [x4, gate]),
        'slice_channels': (lambda: ops.slice_channels(y4, 1, 3), [y4]),
        'softmax_rows': (lambda: ops.softmax_rows(m_a), [m_a]),
        'cross_entropy': (lambda: ops.cross_entropy(logits, labels), [logits]),
        'linear': (lambda: ops.linear(x_lin, w_lin, b_lin), [x_lin, w_lin, b_lin]),
        'conv1x1': (lambda: ops.conv1x1(x4, w_1x1, b_1x1), [x4, w_1x1, b_1x1]),
    }


def _scalarised(rng: np.random.Generator, op: Callable[[], Tensor]) -> Callable[[], Tensor]:
    """sum(op(...) · R) for a fixed random readout R; scalars pass through."""
    sample_out = op()
    if sample_out.size == 1:
        return op
    readout = _readout(rng, sample_out)
    return lambda: ops.tensor_sum(ops.mul(op(), readout))


def check_primitives(seed: int = 0, eps: float = DEFAULT_EPS) -> List[GradCheck]:
    rng = np.random.default_rng([seed, 1])
    threshold = threshold_for('primitive')
    results = []
    for name, (op, inputs) in _primitive_cases(rng).items():
        f = _scalarised(rng, op)
        results.append(GradCheck(name, max_relative_error(f, inputs, eps), threshold))
    return results


def check_linear_toy(seed: int = 0, eps: float = DEFAULT_EPS) -> GradCheck:
    """A single linear layer: central differences are exact up to rounding."""
    rng = np.random.default_rng([seed, 2])
    x = Tensor(rng.uniform(-1, 1, size=(4, 6)))
    w = Tensor(rng.uniform(-1, 1, size=(6, 3)))
    b = Tensor(rng.uniform(-1, 1, size=(3,)))
    readout = Tensor(rng.uniform(-1, 1, size=(4, 3)))

    def f() -> Tensor:
        return ops.tensor_sum(ops.mul(ops.linear(x, w, b), readout))

    return GradCheck('linear_toy', max_relative_error(f, [x, w, b], eps), threshold_for('primitive'))


# ---------------------------------------------------------------------------
# Composed checks
# ---------------------------------------------------------------------------


def _gap_to_runner_up(values: np.ndarray, axis: int) -> float:
    """Smallest top-1 minus top-2 gap along `axis`, ignoring exact ties."""
    ordered = np.sort(values, axis=axis)
    top = np.take(ordered, -1, axis=axis)
    runner = np.take(ordered, -2, axis=axis)
    gaps = (top - runner)[top != runner]
    return float(gaps.min()) if gaps.size else np.inf


def kink_margin(loss: Tensor) -> float:
    """
    Distance of the current point from the nearest relu / max-pool kink on
    the graph behind `loss`.
    """
    margin = np.inf
    for node in topological_order(loss):
        func = node.creator
        if func is None:
            continue
        x = func.inputs[0].data
        if isinstance(func, ops.Relu):
            margin = min(margin, float(np.abs(x).min()))
        elif isinstance(func, ops.Pool2d) and func.mode == 'max':
            k, s = func.window, func.stride
            windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
            windows = windows[:, :, ::s, ::s].reshape(x.shape[0], x.shape[1], -1, k * k)
            margin = min(margin, _gap_to_runner_up(windows, axis=-1))
        elif isinstance(func, ops.ChannelPool) and 'max' in func.modes and x.shape[1] > 1:
            margin = min(margin, _gap_to_runner_up(x, axis=1))
    return margin


def smallest_gradient_ratio(tensors: Sequence[Tensor]) -> float:
    """
    min over tensors of (smallest nonzero |grad|) / max(largest |grad|, floor).

    Near-cancelling gradient entries are where central differences lose
    their relative accuracy first.
    """
    ratio = np.inf
    for tensor in tensors:
        if tensor.grad is None:
            continue
        magnitude = np.abs(tensor.grad)
        nonzero = magnitude[magnitude > 0]
        if nonzero.size:
            scale = max(float(magnitude.max()), GRAD_FLOOR / CANCELLATION_RATIO)
            ratio = min(ratio, float(nonzero.min()) / scale)
    return ratio


def tiny_model_config(**overrides) -> ModelConfig:
    config = ModelConfig(backbone=replace(TINY_BACKBONE), num_classes=TINY_CLASSES)
    return replace(config, **overrides)


def _randomised_tiny_case(config: ModelConfig, seed: int):
    """Tiny model with every weight randomised (zero-initialised ones included)."""
    model = build_model(config, seed)
    rng = np.random.default_rng([seed, 3])
    for tensor in model.parameters():
        noise = rng.uniform(-0.5, 0.5, size=tensor.shape)
        tensor.data = (tensor.data + noise).astype(tensor.data.dtype)
    size = config.backbone.input_size
    shape = (TINY_BATCH, config.backbone.in_channels, size, size)
    images = Tensor(rng.uniform(0.0, 1.0, size=shape))
    labels = rng.integers(0, config.num_classes, size=TINY_BATCH)

    def f() -> Tensor:
        return clan_loss(clan_forward(model, images), labels)

    return model, f


def _conditioning(model, f: Callable[[], Tensor]) -> float:
    """1.0 or more when the point is far enough from kinks and cancellations."""
    model.zero_grad()
    loss = f()
    margin = kink_margin(loss)
    backward(loss)
    ratio = smallest_gradient_ratio(model.parameters())
    model.zero_grad()
    return min(margin / KINK_MARGIN, ratio / CANCELLATION_RATIO)


def check_composed(
    name: str, config: ModelConfig, seed: int = 0, eps: float = DEFAULT_EPS
) -> GradCheck:
    """
    Gradient of the full CLAN loss w.r.t. every weight of a tiny model.

    Draws up to POINT_ATTEMPTS random points and checks the first that is
    well conditioned (or the best one seen, with a warning).
    """
    best = None
    for attempt in range(POINT_ATTEMPTS):
        model, f = _randomised_tiny_case(config, seed * POINT_ATTEMPTS + attempt)
        score = _conditioning(model, f)
        if best is None or score > best[0]:
            best = (score, model, f)
        if score >= 1.0:
            break
    score, model, f = best
    if score < 1.0:
        logger.warning(f"{name}: no well-conditioned point found (score {score:.2e})")
    return GradCheck(name, max_relative_error(f, model.parameters(), eps), threshold_for('composed'))


def composed_cases() -> List[Tuple[str, ModelConfig]]:
    cases = [(f"clan[metric={m.value}]", tiny_model_config(metric=m)) for m in RelationMetric]
    cases += [(f"clan[pooling={p.value}]", tiny_model_config(pooling=p)) for p in ClsaPooling]
    cases.append(('clan[gate=sigmoid]', tiny_model_config(gate=Gate.SIGMOID)))
    cases.append(('clan[middle=nonlocal]', tiny_model_config(middle='nonlocal')))
    cases.append(('clan[upsample=bilinear]', tiny_model_config(upsample_mode='bilinear')))
    return cases


def run_gradient_suite(
    seed: int = 0,
    composed: bool = True,
    progress: Optional[Callable[[GradCheck], None]] = None,
) -> List[GradCheck]:
    """Every primitive, the linear toy and (optionally) the composed cases."""
    results: List[GradCheck] = []

    def record(check: GradCheck) -> None:
        results.append(check)
        if progress is not None:
            progress(check)

    for check in check_primitives(seed):
        record(check)
    record(check_linear_toy(seed))
    if composed:
        for name, config in composed_cases():
            record(check_composed(name, config, seed))
    return results
