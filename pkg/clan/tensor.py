"""
Dense tensors with a reverse-mode autodiff graph.

A Tensor wraps a numpy array. Every differentiable operation is a Function
subclass (see ops.py); applying it records the Function as the output's
creator, which is how backward() later walks the graph.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from clan.errors import ConfigurationError, UsageError

logger = logging.getLogger(__name__)

_PRECISIONS = {'f32': np.float32, 'f64': np.float64}
_dtype = np.float64


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


def set_precision(name: str) -> None:
    """Select the global floating point precision ('f32' or 'f64')."""
    global _dtype
    if name not in _PRECISIONS:
        raise ConfigurationError(
            f"Unknown precision '{name}', expected one of {sorted(_PRECISIONS)}"
        )
    _dtype = _PRECISIONS[name]
    logger.debug(f"Precision set to {name}")


def get_precision() -> str:
    return 'f32' if _dtype is np.float32 else 'f64'


def get_dtype() -> type:
    return _dtype


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Evaluate without recording graph nodes (evaluation, finite differences).

    The switch is per thread, so a no_grad block in one thread never turns
    recording off for a graph being built in another.
    """
    previous = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def is_grad_enabled() -> bool:
    return _grad_mode.enabled


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement forward() on numpy arrays and backward(), which
    receives dL/d(output) and returns one gradient (or None) per input.
    Anything forward() needs to remember for backward() goes on self.
    """

    def __init__(self, *inputs: 'Tensor'):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: 'Tensor', **kwargs: Any) -> 'Tensor':
        func = cls(*inputs)
        out_data = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = _grad_mode.enabled and any(t.requires_grad for t in inputs)
        return Tensor(
            out_data,
            requires_grad=requires_grad,
            creator=func if requires_grad else None,
        )

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum a broadcast gradient back down to `shape`."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """
    N-dimensional real array with an optional gradient buffer.

    `grad` stays None until backward() deposits something; tensors created
    with requires_grad=False never accumulate gradient.
    """

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence[Any]],
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        name: Optional[str] = None,
    ):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=_dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar, resolved lazily to avoid a circular import with ops.
    def __add__(self, other: 'Tensor') -> 'Tensor':
        from clan import ops
        return ops.add(self, _as_tensor(other))

    def __radd__(self, other: Any) -> 'Tensor':
        return self.__add__(other)

    def __mul__(self, other: Any) -> 'Tensor':
        from clan import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other))

    def __rmul__(self, other: Any) -> 'Tensor':
        return self.__mul__(other)


def _as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    """Create a learnable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def topological_order(root: Tensor) -> List[Tensor]:
    """Return every graph tensor reachable from root, inputs before outputs."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in reversed(node.creator.inputs):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Reverse-mode sweep from a scalar loss.

    Leaf tensors with requires_grad accumulate dLoss/dTensor into .grad, so
    calling this twice without zeroing doubles the stored gradients.
    Intermediate gradients live only for the duration of the sweep.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward() called on a tensor that is not on the graph")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += grad
            continue
        input_grads = node.creator.backward(grad)
        for parent, parent_grad in zip(node.creator.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise UsageError(
                    f"{type(node.creator).__name__} returned gradient of shape "
                    f"{parent_grad.shape} for input of shape {parent.shape}"
                )
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad


def fan_in_uniform(
    rng: np.random.Generator,
    shape: Tuple[int, ...],
    fan_in: int,
    gain: float = 1.0,
    name: Optional[str] = None,
) -> Tensor:
    """Learnable tensor drawn from U(-b, b) with b = gain * sqrt(3 / fan_in)."""
    bound = gain * np.sqrt(3.0 / max(fan_in, 1))
    return parameter(rng.uniform(-bound, bound, size=shape), name=name)


def zeros_parameter(shape: Tuple[int, ...], name: Optional[str] = None) -> Tensor:
    return parameter(np.zeros(shape), name=name)
