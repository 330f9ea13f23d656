# -*- coding: utf-8 -*-
"""
Expression spotting engine - tensor core

Core Features:
1. Dense float64 Tensor with reverse-mode gradients
2. Every differentiable op the spotting model needs (matmul, temporal conv,
   softmax, gates, reductions, gathers)
3. Adam optimizer with bias correction
4. MCWC checkpoint reader/writer
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from errors import ArgumentError, ConfigError, DataError, ShapeError, TrainingAborted

logger = structlog.get_logger(__name__)

CHECKPOINT_MAGIC = b"MCWC"
CHECKPOINT_VERSION = 1


class Tensor:
    """Row-major float64 array with an optional gradient buffer"""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        """Propagate gradients to every reachable tensor that requires them"""
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order = self._topological_order()
        _accumulate(self, np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

        for node in order:
            if node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise TrainingAborted(f"non-finite gradient produced by op '{node._op}' with shape {node.shape}")

    def _topological_order(self) -> List["Tensor"]:
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = None
    out._op = op
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray):
    if not tensor.requires_grad:
        return
    tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# =================== ELEMENTWISE ===================

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data + b.data, (a, b), "add")

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    out._backward = backward
    return out


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data - b.data, (a, b), "sub")

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(-grad, b.shape))

    out._backward = backward
    return out


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    """Element-wise product with numpy broadcasting"""
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data * b.data, (a, b), "mul")

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    out._backward = backward
    return out


elementwise_mul = mul
elementwise_add = add


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data / b.data, (a, b), "div")

    def backward(grad):
        _accumulate(a, _unbroadcast(grad / b.data, a.shape))
        _accumulate(b, _unbroadcast(-grad * a.data / (b.data ** 2), b.shape))

    out._backward = backward
    return out


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    values = np.empty_like(x.data)
    positive = x.data >= 0
    values[positive] = 1.0 / (1.0 + np.exp(-x.data[positive]))
    exp_neg = np.exp(x.data[~positive])
    values[~positive] = exp_neg / (1.0 + exp_neg)
    out = _result(values, (x,), "sigmoid")

    def backward(grad):
        _accumulate(x, grad * values * (1.0 - values))

    out._backward = backward
    return out


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = _result(np.maximum(x.data, 0.0), (x,), "relu")

    def backward(grad):
        _accumulate(x, grad * (x.data > 0))

    out._backward = backward
    return out


def absolute(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = _result(np.abs(x.data), (x,), "abs")

    def backward(grad):
        _accumulate(x, grad * np.sign(x.data))

    out._backward = backward
    return out


def square(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = _result(x.data ** 2, (x,), "square")

    def backward(grad):
        _accumulate(x, 2.0 * grad * x.data)

    out._backward = backward
    return out


def stop_gradient(x: TensorLike) -> Tensor:
    """Same values, no path back to x"""
    x = as_tensor(x)
    return _result(x.data, (), "stop_gradient")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given"""
    if rng is None or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ConfigError(f"dropout rate must be below 1, got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# =================== LINEAR ALGEBRA ===================

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m x k] @ [k x n], got {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, (a, b), "matmul")

    def backward(grad):
        _accumulate(a, grad @ b.data.T)
        _accumulate(b, a.data.T @ grad)

    out._backward = backward
    return out


def transpose(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = _result(x.data.T, (x,), "transpose")

    def backward(grad):
        _accumulate(x, grad.T)

    out._backward = backward
    return out


def reshape(x: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = _result(x.data.reshape(shape), (x,), "reshape")

    def backward(grad):
        _accumulate(x, grad.reshape(x.shape))

    out._backward = backward
    return out


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out = _result(np.concatenate([p.data for p in parts], axis=axis), parts, "concat")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(grad):
        for part, piece in zip(parts, np.split(grad, bounds, axis=axis)):
            _accumulate(part, piece)

    out._backward = backward
    return out


def gather(x: TensorLike, index) -> Tensor:
    """numpy indexing (basic or advanced); gradient scatters back with add.at"""
    x = as_tensor(x)
    out = _result(x.data[index], (x,), "gather")

    def backward(grad):
        full = np.zeros_like(x.data)
        np.add.at(full, index, grad)
        _accumulate(x, full)

    out._backward = backward
    return out


def conv1d(x: TensorLike, kernel: TensorLike, bias: TensorLike) -> Tensor:
    """Same-padded temporal cross-correlation: [T x Cin] * [w x Cin x Cout] + [Cout]"""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be [w x Cin x Cout], got {kernel.shape}")
    width, c_in, c_out = kernel.shape
    if width % 2 == 0:
        raise ConfigError(f"conv1d width must be odd, got {width}")
    if x.ndim != 2 or x.shape[1] != c_in:
        raise ShapeError(f"conv1d input must be [T x {c_in}], got {x.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias must be [{c_out}], got {bias.shape}")

    steps = x.shape[0]
    pad = (width - 1) // 2
    padded = np.pad(x.data, ((pad, pad), (0, 0)))
    values = np.broadcast_to(bias.data, (steps, c_out)).copy()
    for tap in range(width):
        values += padded[tap:tap + steps] @ kernel.data[tap]
    out = _result(values, (x, kernel, bias), "conv1d")

    def backward(grad):
        if x.requires_grad:
            grad_padded = np.zeros_like(padded)
            for tap in range(width):
                grad_padded[tap:tap + steps] += grad @ kernel.data[tap].T
            _accumulate(x, grad_padded[pad:pad + steps])
        if kernel.requires_grad:
            _accumulate(kernel, np.stack([padded[tap:tap + steps].T @ grad for tap in range(width)]))
        _accumulate(bias, grad.sum(axis=0))

    out._backward = backward
    return out


# =================== NORMALIZATION & REDUCTIONS ===================

def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    values = exp / exp.sum(axis=axis, keepdims=True)
    out = _result(values, (x,), "softmax")

    def backward(grad):
        _accumulate(x, values * (grad - (grad * values).sum(axis=axis, keepdims=True)))

    out._backward = backward
    return out


def log_softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    values = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(values)
    out = _result(values, (x,), "log_softmax")

    def backward(grad):
        _accumulate(x, grad - probs * grad.sum(axis=axis, keepdims=True))

    out._backward = backward
    return out


def reduce_sum(x: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum")

    def backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        _accumulate(x, np.broadcast_to(grad, x.shape).copy())

    out._backward = backward
    return out


def mean_over_axis(x: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def max_over_axis(x: TensorLike, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry"""
    x = as_tensor(x)
    winners = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = _result(np.take_along_axis(x.data, winners, axis=axis).squeeze(axis), (x,), "max")

    def backward(grad):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, winners, np.expand_dims(grad, axis), axis=axis)
        _accumulate(x, full)

    out._backward = backward
    return out


def l1_norm(x: TensorLike) -> Tensor:
    return reduce_sum(absolute(x))


def mse(a: TensorLike, b: TensorLike) -> Tensor:
    return mean_over_axis(square(sub(a, b)))


def topk_indices(values: Union[Tensor, np.ndarray, Sequence[float]], k: int) -> np.ndarray:
    """Indices of the k largest entries of a 1-D array, ties to the lower index"""
    array = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    if array.ndim != 1:
        raise ShapeError(f"topk_indices expects a 1-D array, got {array.shape}")
    if k < 0 or k > array.shape[0]:
        raise ArgumentError(f"k={k} outside [0, {array.shape[0]}]")
    return np.argsort(-array, kind="stable")[:k]


# =================== INITIALIZATION ===================

def glorot_uniform(shape: Tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def conv_weight(width: int, c_in: int, c_out: int, rng: np.random.Generator) -> Tensor:
    return glorot_uniform((width, c_in, c_out), width * c_in, width * c_out, rng)


def zeros(shape: Tuple[int, ...], requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# =================== OPTIMIZER ===================

@dataclass
class AdamState:
    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


def collect_grads(params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    """Current gradient of every parameter, zeros where none arrived"""
    return {
        name: param.grad if param.grad is not None else np.zeros_like(param.data)
        for name, param in params.items()
    }


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to params"""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingAborted(f"non-finite gradient for '{name}' at step {state.step_count + 1}")

    state.step_count += 1
    correction1 = 1.0 - state.beta1 ** state.step_count
    correction2 = 1.0 - state.beta2 ** state.step_count

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for '{name}' has shape {grad.shape}, parameter {param.shape}")
        first = state.first_moment.get(name)
        second = state.second_moment.get(name)
        if first is None:
            first = np.zeros_like(param.data)
            second = np.zeros_like(param.data)

        first = state.beta1 * first + (1.0 - state.beta1) * grad
        second = state.beta2 * second + (1.0 - state.beta2) * grad ** 2
        state.first_moment[name] = first
        state.second_moment[name] = second

        param.data -= state.learning_rate * (first / correction1) / (np.sqrt(second / correction2) + state.epsilon)

    return state


# =================== CHECKPOINTS ===================

def save_checkpoint(path: Union[str, Path], params: Mapping[str, Union[Tensor, np.ndarray]]) -> Path:
    """Write named parameters in the MCWC layout (little-endian)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        array = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    path.write_bytes(b"".join(chunks))
    logger.debug("checkpoint_saved", path=str(path), tensors=len(params))
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read an MCWC file back into an ordered name -> array mapping"""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e

    try:
        magic, version, count = struct.unpack_from("<4sII", payload, 0)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path} is not a checkpoint (magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path} has unsupported checkpoint version {version}")
        offset = struct.calcsize("<4sII")
        params: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            array = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            params[name] = array.astype(np.float64).reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DataError(f"truncated or corrupt checkpoint {path}: {e}") from e

    if offset != len(payload):
        raise DataError(f"{path} has {len(payload) - offset} trailing bytes")
    return params
