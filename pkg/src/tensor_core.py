#!/usr/bin/env python3
"""
Tensor Core Module for the CoFInAl Scoring Head

This module provides the dense numerics every other module is built on:
- Tensor with reverse-mode automatic differentiation (tape rebuilt per forward)
- Affine maps, softmax, pooling and scaled dot-product attention
- Dropout driven by a seeded, counter-based random stream
- SGD with momentum and the cosine learning-rate schedule
- Central finite-difference gradient checking

All storage is 64-bit. Tensors hold no shared mutable state, so
independent models may run on independent threads.
"""

import logging
import math
import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax as _log_softmax, softmax as _softmax

from errors import ConfigError, DimensionError, EvaluationError, NonFiniteError


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    """Whether new operations are recorded on the tape for this thread."""
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference and finite differences)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class RngStream:
    """
    Seeded random stream backed by numpy's Philox counter-based generator.

    Philox4x64 is fully specified by (key, counter), so a given seed yields
    the same draws on every platform. Independent sub-streams are derived
    with child(tag), which spawns from the same SeedSequence.
    """

    ALGORITHM = "philox4x64"

    def __init__(self, seed: int = 0, spawn_key: Tuple[int, ...] = ()):
        """
        Initialize random stream.

        Args:
            seed: Unsigned 64-bit seed
            spawn_key: Path of child tags leading to this stream
        """
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError(f"Seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, tag: int) -> "RngStream":
        """Derive an independent stream identified by tag."""
        return RngStream(self.seed, self.spawn_key + (tag,))

    def random(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self.generator.random(shape)

    def normal(self, shape: Tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        return self.generator.standard_normal(shape) * scale

    def uniform(self, low: float, high: float, shape: Tuple[int, ...]) -> np.ndarray:
        return self.generator.uniform(low, high, shape)

    def integers(self, low: int, high: int) -> int:
        """Draw one integer from [low, high)."""
        return int(self.generator.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def get_state(self) -> Dict[str, Any]:
        """
        Get the generator state as a JSON-compatible dictionary.

        Returns:
            Dictionary with seed, spawn key and the bit generator state
        """
        return {
            "algorithm": self.ALGORITHM,
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
            "bit_generator": _state_to_json(self.generator.bit_generator.state),
        }

    def set_state(self, state: Dict[str, Any]) -> None:
        """Restore a state captured with get_state()."""
        if state.get("algorithm") != self.ALGORITHM:
            raise ConfigError(f"Unsupported RNG algorithm: {state.get('algorithm')}")
        self.seed = int(state["seed"])
        self.spawn_key = tuple(state["spawn_key"])
        self.generator.bit_generator.state = _state_from_json(state["bit_generator"])

    @classmethod
    def from_state(cls, state: Dict[str, Any]) -> "RngStream":
        stream = cls(int(state["seed"]), tuple(state["spawn_key"]))
        stream.set_state(state)
        return stream


def _state_to_json(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _state_to_json(item) for key, item in value.items()}
    if isinstance(value, np.ndarray):
        return [int(v) for v in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    return value


def _state_from_json(value: Any) -> Any:
    # Philox keeps counter, key and buffer as uint64 arrays
    if isinstance(value, dict):
        return {key: _state_from_json(item) for key, item in value.items()}
    if isinstance(value, list):
        return np.array(value, dtype=np.uint64)
    return value


class Tensor:
    """Dense 64-bit tensor with reverse-mode automatic differentiation."""

    def __init__(self, data: Any, requires_grad: bool = False, name: str = ""):
        """
        Initialize tensor.

        Args:
            data: Array-like values (copied into a float64 buffer)
            requires_grad: Whether gradients are accumulated for this tensor
            name: Optional label used in logs and parameter tables
        """
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._prev: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Propagate gradients from this tensor to every tensor that produced it.

        Args:
            grad: Upstream gradient (defaults to ones, i.e. d(sum)/d(self))
        """
        if grad is None:
            grad = np.ones_like(self.data)
        elif np.shape(grad) != self.shape:
            raise DimensionError(f"Upstream gradient shape {np.shape(grad)} != tensor shape {self.shape}")

        order = _topological_order(self)
        self.grad = np.array(grad, dtype=np.float64) if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # The tape is single-use
        for node in order:
            node._prev = ()
            node._backward = None

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def _topological_order(root: Tensor) -> List[Tensor]:
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
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    grad = _unbroadcast(grad, tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite value produced by {op}")
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {x.ndim}")
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise DimensionError(f"{op}: axis {axis} is empty")
    return axis


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data ** 2))

    return _result(data, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * data)

    return _result(data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g / x.data)

    return _result(data, (x,), backward, "log")


def square(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(x, 2.0 * g * x.data)

    return _result(x.data * x.data, (x,), backward, "square")


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp values to [low, high]; gradient is zero where clamping is active."""
    inside = (x.data >= low) & (x.data <= high)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * inside)

    return _result(np.clip(x.data, low, high), (x,), backward, "clip")


def arccos(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = np.arccos(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, -g / np.sqrt(1.0 - x.data ** 2))

    return _result(data, (x,), backward, "arccos")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * (x.data > 0))

    return _result(np.maximum(x.data, 0.0), (x,), backward, "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    positive = x.data >= 0

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * np.where(positive, 1.0, slope))

    return _result(np.where(positive, x.data, slope * x.data), (x,), backward, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    data = expit(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * data * (1.0 - data))

    return _result(data, (x,), backward, "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """
    Softmax along one axis.

    scipy's implementation subtracts the axis maximum before exponentiating,
    so large inputs such as [1000, 0] do not overflow.

    Args:
        x: Input tensor
        axis: Axis to normalize over

    Returns:
        Tensor of the same shape whose entries along axis sum to 1
    """
    axis = _check_axis(x, axis, "softmax")
    data = _softmax(x.data, axis=axis)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, data * (g - np.sum(g * data, axis=axis, keepdims=True)))

    return _result(data, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "log_softmax")
    data = _log_softmax(x.data, axis=axis)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g - np.exp(data) * np.sum(g, axis=axis, keepdims=True))

    return _result(data, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# Shape and reduction
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"Cannot reshape {x.shape} to {shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.shape))

    return _result(data, (x,), backward, "reshape")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {x.ndim}")

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(x.data, -1, -2), (x,), backward, "transpose")


def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = _check_axis(x, axis, "sum")
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(data, (x,), backward, "sum")


def reduce_mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        if x.size == 0:
            raise DimensionError("mean of an empty tensor")
        count = x.size
    else:
        axis = _check_axis(x, axis, "mean")
        count = x.shape[axis]
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


def avg_pool(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along axis; the axis is dropped from the shape."""
    return reduce_mean(x, axis=axis, keepdims=False)


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather entries along axis (gradient scatters back with accumulation)."""
    axis = _check_axis(x, axis, "take")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("take expects a 1-D index list")
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise DimensionError(f"take: index out of range for axis of length {x.shape[axis]}")

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        _accumulate(x, full)

    return _result(np.take(x.data, idx, axis=axis), (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> None:
        for tensor, part in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(tensor, part)

    return _result(data, tensors, backward, "concat")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """
    Scale each vector along the last axis to unit l2 norm.

    Vectors with norm below eps map to the zero vector with zero gradient.
    """
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    degenerate = norm < eps
    safe = np.where(degenerate, 1.0, norm)
    data = np.where(degenerate, 0.0, x.data / safe)

    def backward(g: np.ndarray) -> None:
        grad = (g - data * np.sum(g * data, axis=-1, keepdims=True)) / safe
        _accumulate(x, np.where(degenerate, 0.0, grad))

    return _result(data, (x,), backward, "l2_normalize")


def minmax_scale(x: Tensor, low: float, high: float, eps: float = 1e-12) -> Tensor:
    """
    Affinely map each vector along the last axis onto [low, high].

    The vector minimum goes to low and its maximum to high. Constant
    vectors (range below eps) map to the midpoint with zero gradient.
    """
    lo = x.data.min(axis=-1, keepdims=True)
    hi = x.data.max(axis=-1, keepdims=True)
    spread = hi - lo
    degenerate = spread < eps
    safe = np.where(degenerate, 1.0, spread)
    unit = (x.data - lo) / safe
    span = high - low
    data = np.where(degenerate, 0.5 * (low + high), low + span * unit)

    def backward(g: np.ndarray) -> None:
        n = x.shape[-1]
        scale = span / safe
        s1 = np.sum(g, axis=-1, keepdims=True)
        s2 = np.sum(g * unit, axis=-1, keepdims=True)
        at_min = np.eye(n)[np.argmin(x.data, axis=-1)]
        at_max = np.eye(n)[np.argmax(x.data, axis=-1)]
        grad = scale * (g + at_min * (s2 - s1) - at_max * s2)
        _accumulate(x, np.where(degenerate, 0.0, grad))

    return _result(data, (x,), backward, "minmax_scale")


# ---------------------------------------------------------------------------
# Linear algebra and attention
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: {e}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(data, (a, b), backward, "matmul")


def affine_map(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """
    Apply y = xW + b over the last axis of x.

    Args:
        x: Input [..., d_in]
        W: Weight [d_in, d_out]
        b: Bias [d_out]

    Returns:
        Output [..., d_out]
    """
    if W.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"affine_map expects W rank 2 and b rank 1, got {W.shape} and {b.shape}")
    if x.shape[-1] != W.shape[0] or b.shape[0] != W.shape[1]:
        raise DimensionError(f"affine_map: x {x.shape}, W {W.shape}, b {b.shape} do not conform")
    return add(matmul(x, W), b)


def attention_weights(Q: Tensor, K: Tensor) -> Tensor:
    """Row-stochastic attention matrix softmax(QK^T / sqrt(d))."""
    d = Q.shape[-1]
    if d == 0:
        raise DimensionError("attention with zero-width queries")
    if K.shape[-1] != d:
        raise DimensionError(f"attention: query width {d} != key width {K.shape[-1]}")
    return softmax(mul(matmul(Q, transpose(K)), 1.0 / math.sqrt(d)), axis=-1)


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """
    Scaled dot-product attention softmax(QK^T / sqrt(d)) V.

    Args:
        Q: Queries [..., m, d]
        K: Keys [..., n, d]
        V: Values [..., n, v]

    Returns:
        Attended values [..., m, v]
    """
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: {K.shape[-2]} keys but {V.shape[-2]} values")
    return matmul(attention_weights(Q, K), V)


def dropout(x: Tensor, p: float, rng: RngStream, training: bool) -> Tensor:
    """
    Inverted dropout.

    Args:
        x: Input tensor
        p: Drop probability in [0, 1)
        rng: Stream the mask is drawn from
        training: Identity when False

    Returns:
        x with entries zeroed with probability p and survivors scaled by 1/(1-p)
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"Dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# Parameters and optimization
# ---------------------------------------------------------------------------

def init_affine(rng: RngStream, d_in: int, d_out: int, name: str) -> Tuple[Tensor, Tensor]:
    """Weight and bias drawn uniformly from [-1/sqrt(d_in), 1/sqrt(d_in)]."""
    bound = 1.0 / math.sqrt(d_in)
    W = Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True, name=f"{name}.weight")
    b = Tensor(rng.uniform(-bound, bound, (d_out,)), requires_grad=True, name=f"{name}.bias")
    return W, b


def sgd_momentum_step(param: np.ndarray,
                      grad: np.ndarray,
                      velocity: np.ndarray,
                      lr: float,
                      momentum: float,
                      weight_decay: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    One SGD-with-momentum update (coupled weight decay).

    g = grad + weight_decay * param
    v = momentum * v + g
    param = param - lr * v

    Returns:
        (new_param, new_velocity)
    """
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise DimensionError(
            f"SGD step shapes differ: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}"
        )
    g = grad + weight_decay * param
    new_velocity = momentum * velocity + g
    return param - lr * new_velocity, new_velocity


class SGDMomentum:
    """SGD with momentum over a fixed, ordered parameter list."""

    def __init__(self, params: Iterable[Tensor], momentum: float = 0.9, weight_decay: float = 0.01):
        """
        Args:
            params: Trainable tensors, in a stable order
            momentum: Momentum coefficient
            weight_decay: L2 coefficient added to each gradient
        """
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        """Update every parameter that received a gradient; others are left untouched."""
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data, self.velocities[i] = sgd_momentum_step(
                p.data, p.grad, self.velocities[i], lr, self.momentum, self.weight_decay
            )


def cosine_lr(epoch: int, total: int, lr_max: float, lr_min: float) -> float:
    """
    Cosine-annealed learning rate.

    Args:
        epoch: Current epoch in [0, total]
        total: Total number of epochs
        lr_max: Rate at epoch 0
        lr_min: Rate at epoch total

    Returns:
        lr_min + 0.5 * (lr_max - lr_min) * (1 + cos(pi * epoch / total))
    """
    if total <= 0:
        raise ConfigError(f"Cosine schedule needs a positive epoch count, got {total}")
    if not 0 <= epoch <= total:
        raise ConfigError(f"Epoch {epoch} outside [0, {total}]")
    if lr_min > lr_max:
        raise ConfigError(f"lr_min {lr_min} exceeds lr_max {lr_max}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total))


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """
    Compare reverse-mode gradients of a scalar function with central differences.

    f must rebuild its graph from x on every call. x.data is perturbed in
    place one entry at a time and restored afterwards.

    Args:
        f: Scalar-valued differentiable function of x
        x: Point of evaluation (requires_grad is forced on during the check)
        eps: Finite-difference step

    Returns:
        max over entries of |autodiff - central| / max(1, |central|)
    """
    was_tracking = x.requires_grad
    x.requires_grad = True
    try:
        previous_grad = x.grad
        x.grad = None
        try:
            out = f(x)
        except NonFiniteError as e:
            raise EvaluationError(f"Function under check is not finite: {e}")
        if out.size != 1:
            raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
        out.backward()
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        x.grad = previous_grad

        worst = 0.0
        with no_grad():
            for idx in np.ndindex(x.shape):
                original = x.data[idx]
                try:
                    x.data[idx] = original + eps
                    f_plus = f(x).item()
                    x.data[idx] = original - eps
                    f_minus = f(x).item()
                except NonFiniteError as e:
                    raise EvaluationError(f"Function under check is not finite near {idx}: {e}")
                finally:
                    x.data[idx] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise EvaluationError(f"Function under check is not finite near {idx}")
                central = (f_plus - f_minus) / (2.0 * eps)
                error = abs(analytic[idx] - central) / max(1.0, abs(central))
                worst = max(worst, error)
        logging.debug(f"grad_check {x.name or x.shape}: max relative error {worst:.3e}")
        return worst
    finally:
        x.requires_grad = was_tracking
