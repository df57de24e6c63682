#!/usr/bin/env python3
"""
Dense tensor math with tape-based reverse-mode differentiation

Every operation on a Tensor that requires gradients records its inputs and a
backward closure; calling backward() on a scalar result walks that graph in
reverse topological order. The graph is rebuilt on every forward pass.

On top of the primitives this module provides the layers the two networks
need (linear, layer normalization, softmax, multi-head self-attention, the
LSTM cell), the Gaussian negative log-likelihood with a Cholesky scale
factor, an Adam optimizer and the parameter checkpoint format.

Checkpoint format (JSON, version 1):
    {
      "format": "sim2real-params",
      "version": 1,
      "metadata": {...},
      "parameters": {"<name>": {"shape": [..], "data": [row-major floats]}}
    }
Floats are written with Python's shortest round-trip repr, so a save/load
cycle reproduces every parameter bit for bit.
"""

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import ConfigurationError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sim2real-params"
CHECKPOINT_VERSION = 1
LAYER_NORM_EPS = 1e-9
LOG_2PI = math.log(2.0 * math.pi)


class NumericalFailure(ArithmeticError):
    """Raised when an update would consume non-finite gradients."""


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode gradients."""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @staticmethod
    def _result(data: np.ndarray, parents: Tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self) -> None:
        """Populate .grad on every tensor reachable from this scalar root."""
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")

        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)

        for node in reversed(order):
            if node._backward is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is not None and parent.requires_grad:
                    parent.grad += pgrad

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)

# ============================================================================
# PRIMITIVES
# ============================================================================

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data / b.data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(
        a.data ** exponent, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs 2-D or batched operands, got {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), backward)


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.array(np.broadcast_to(g, a.shape)),)

    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: TensorLike, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(a.data[index], (a,), backward)


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([p.data for p in parts], axis=axis), parts, backward)

# ============================================================================
# LAYER FUNCTIONS
# ============================================================================

def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), backward)


def layer_norm(x: TensorLike, gamma: TensorLike, beta: TensorLike,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gxhat = g * gamma.data
        gx = inv_std * (gxhat
                        - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor._result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def tril_pairs(dim: int) -> List[Tuple[int, int]]:
    """Row-major (row, col) order of the strictly-lower-triangular entries."""
    return [(i, j) for i in range(dim) for j in range(i)]


def gaussian_nll(target: TensorLike, mean_: Tensor, diag: Tensor, lower: Tensor) -> Tensor:
    """
    Mean negative log-likelihood of targets under N(mean, L L^T).

    Args:
        target: (B, d) observed values
        mean_: (B, d) predicted means
        diag: (B, d) strictly positive diagonal of the Cholesky factor L
        lower: (B, d(d-1)/2) strictly-lower entries of L in tril_pairs order

    Returns:
        Scalar tensor, averaged over the batch
    """
    target = as_tensor(target)
    dim = mean_.shape[-1]
    pairs = tril_pairs(dim)
    column = {pair: k for k, pair in enumerate(pairs)}
    residual = target - mean_

    # forward substitution L z = residual
    z: List[Tensor] = []
    for i in range(dim):
        acc = residual[:, i]
        for j in range(i):
            acc = acc - lower[:, column[(i, j)]] * z[j]
        z.append(acc / diag[:, i])

    quad = z[0] * z[0]
    for zi in z[1:]:
        quad = quad + zi * zi
    log_det = tsum(log(diag), axis=-1)
    per_sample = 0.5 * quad + log_det + 0.5 * dim * LOG_2PI
    return mean(per_sample)

# ============================================================================
# MODULES
# ============================================================================

class Module:
    """Container whose Tensor attributes are its parameters."""

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                params[name] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{name}.{i}."))
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ConfigurationError(f"Checkpoint is missing parameters: {', '.join(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ConfigurationError(
                    f"Parameter '{name}' has shape {value.shape}, expected {p.shape}")
            p.data = value.copy()

    def frozen_copy(self) -> "Module":
        """Deep copy with read-only parameter arrays and no gradient tracking."""
        clone = copy.deepcopy(self)
        for p in clone.named_parameters().values():
            p.requires_grad = False
            p.grad = None
            p.data.setflags(write=False)
        return clone


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Tensor(_uniform(rng, in_dim, (in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(_uniform(rng, in_dim, (out_dim,)), requires_grad=True)

    def __call__(self, x: TensorLike) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: TensorLike) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class MultiHeadSelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if heads < 1 or width % heads != 0:
            raise ConfigurationError(f"Model width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(width, width, rng)
        self.key = Linear(width, width, rng)
        self.value = Linear(width, width, rng)
        self.output = Linear(width, width, rng)

    def __call__(self, x: TensorLike) -> Tensor:
        return multi_head_self_attention(x, self.heads, self)[0]


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator):
        self.inner = Linear(width, hidden, rng)
        self.outer = Linear(hidden, width, rng)

    def __call__(self, x: TensorLike) -> Tensor:
        return self.outer(relu(self.inner(x)))


class EncoderLayer(Module):
    """Attention and feed-forward sub-layers, each residual then layer-normalized."""

    def __init__(self, width: int, heads: int, ffn_width: int, rng: np.random.Generator):
        self.attention = MultiHeadSelfAttention(width, heads, rng)
        self.attention_norm = LayerNorm(width)
        self.feed_forward = FeedForward(width, ffn_width, rng)
        self.feed_forward_norm = LayerNorm(width)

    def __call__(self, x: TensorLike) -> Tensor:
        x = self.attention_norm(x + self.attention(x))
        return self.feed_forward_norm(x + self.feed_forward(x))


class LSTMCell(Module):
    """Gate order in the fused weight: input, forget, cell, output."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        fan_in = input_dim + hidden_dim
        self.weight = Tensor(_uniform(rng, fan_in, (fan_in, 4 * hidden_dim)), requires_grad=True)
        bias = _uniform(rng, fan_in, (4 * hidden_dim,))
        bias[hidden_dim:2 * hidden_dim] = 1.0
        self.bias = Tensor(bias, requires_grad=True)

    def zero_state(self, batch: int) -> Tuple[Tensor, Tensor]:
        return Tensor(np.zeros((batch, self.hidden_dim))), Tensor(np.zeros((batch, self.hidden_dim)))

    def __call__(self, x: TensorLike, hidden: Tuple[TensorLike, TensorLike]):
        return lstm_cell(x, hidden, self)


def multi_head_self_attention(x: TensorLike, heads: int,
                              params: MultiHeadSelfAttention) -> Tuple[Tensor, np.ndarray]:
    """
    Content-only self-attention over one sequence.

    Args:
        x: (n, width) sequence, n >= 1
        heads: head count; width must divide evenly
        params: projection weights

    Returns:
        (output (n, width), attention weights (heads, n, n))
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"Self-attention needs a nonempty (n, width) sequence, got {x.shape}")
    n, width = x.shape
    if width % heads != 0:
        raise ConfigurationError(f"Model width {width} is not divisible by {heads} heads")
    head_dim = width // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (n, heads, head_dim)), (1, 0, 2))

    q = split(params.query(x))
    k = split(params.key(x))
    v = split(params.value(x))
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    mixed = reshape(transpose(matmul(weights, v), (1, 0, 2)), (n, width))
    return params.output(mixed), weights.data


def lstm_cell(x: TensorLike, hidden: Tuple[TensorLike, TensorLike],
              params: LSTMCell) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
    """
    One LSTM step.

    Returns:
        (output h', (h', c'))
    """
    x = as_tensor(x)
    h, c = as_tensor(hidden[0]), as_tensor(hidden[1])
    size = params.hidden_dim
    if x.shape[-1] != params.input_dim or h.shape[-1] != size or c.shape[-1] != size:
        raise ConfigurationError(
            f"LSTM dimension mismatch: input {x.shape}, hidden {h.shape}/{c.shape}, "
            f"expected input {params.input_dim} and hidden {size}")

    z = matmul(concat([x, h], axis=-1), params.weight) + params.bias
    i_gate = sigmoid(z[:, :size])
    f_gate = sigmoid(z[:, size:2 * size])
    g_gate = tanh(z[:, 2 * size:3 * size])
    o_gate = sigmoid(z[:, 3 * size:])
    c_next = f_gate * c + i_gate * g_gate
    h_next = o_gate * tanh(c_next)
    return h_next, (h_next, c_next)

# ============================================================================
# GRADIENTS AND OPTIMIZATION
# ============================================================================

def forward_backward(root: Tensor, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """
    Backpropagate from a scalar root and collect leaf gradients.

    Leaves the root does not depend on get an all-zero gradient.
    """
    for p in params.values():
        p.grad = None
    root.backward()
    return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of f() with respect to x, perturbing x in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = f()
        flat[i] = original - h
        lower = f()
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    diff = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / max(scale, floor))


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Dict[str, Tensor], lr: float = 3e-4, **kwargs) -> "AdamState":
        return cls(
            lr=lr,
            first_moment={name: np.zeros_like(p.data) for name, p in params.items()},
            second_moment={name: np.zeros_like(p.data) for name, p in params.items()},
            **kwargs)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """
    Apply one bias-corrected Adam update in place.

    Raises:
        NumericalFailure: a gradient holds NaN or inf; nothing is modified
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ConfigurationError(f"Gradient for '{name}' has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"Non-finite gradient for parameter '{name}'")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.first_moment[name] = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.second_moment[name] = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * g * g
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        params[name].data = params[name].data - update
    return state

# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(path: str, params: Dict[str, Union[Tensor, np.ndarray]],
                    metadata: Optional[Dict[str, Any]] = None) -> str:
    """
    Write parameters to a JSON checkpoint.

    Returns:
        SHA-256 of the written file
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "metadata": metadata or {},
        "parameters": {},
    }
    for name in sorted(params):
        value = params[name]
        array = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        payload["parameters"][name] = {
            "shape": list(array.shape),
            "data": [float(v) for v in array.reshape(-1)],
        }
    with open(path, 'w') as f:
        json.dump(payload, f)
    digest = file_sha256(path)
    logger.info(f"Saved checkpoint with {len(params)} tensors to {path} (sha256 {digest[:12]})")
    return digest


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a checkpoint; returns (name -> array, metadata)."""
    with open(path, 'r') as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a parameter checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"Unsupported checkpoint version {payload.get('version')} in {path}")

    params = {}
    for name, entry in payload["parameters"].items():
        array = np.asarray(entry["data"], dtype=np.float64)
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if array.size != expected:
            raise ConfigurationError(f"Parameter '{name}' in {path} has {array.size} values, shape needs {expected}")
        params[name] = array.reshape(entry["shape"])
    return params, payload.get("metadata", {})


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()
