"""
ndgrad
Small reverse-mode differentiable tensor engine with the operations the autoencoder and SVDD networks use
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import settings
from exceptions import ConfigError, GraphError, NumericalError, ShapeError
from models import NetworkParams

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

_state = threading.local()
_debug = settings.NDGRAD_DEBUG


def set_debug(enabled: bool) -> None:
    """Toggle the per-operation finiteness assertion"""
    global _debug
    _debug = bool(enabled)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a graph (scoring, embedding)"""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """n-dimensional array with optional participation in the recorded graph"""

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        if dtype is None:
            array = np.asarray(data)
            dtype = array.dtype if np.issubdtype(array.dtype, np.floating) else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._node: Optional["Node"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One recorded operation; backward_fn maps the output gradient to one gradient per input"""

    op: str
    inputs: Tuple[Tensor, ...]
    backward_fn: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]]
    consumed: bool = False


class Graph:
    """Operations reachable from a root tensor, in topological order"""

    def __init__(self, root: Tensor):
        self.root = root
        self.dag = nx.DiGraph()
        self._tensors: Dict[int, Tensor] = {}
        stack = [root]
        while stack:
            tensor = stack.pop()
            key = id(tensor)
            if key in self._tensors:
                continue
            self._tensors[key] = tensor
            self.dag.add_node(key)
            if tensor._node is None:
                continue
            for parent in tensor._node.inputs:
                if parent.requires_grad:
                    self.dag.add_edge(id(parent), key)
                    stack.append(parent)

    def order(self) -> List[Tensor]:
        return [self._tensors[key] for key in nx.topological_sort(self.dag)]

    @property
    def nodes(self) -> List[Node]:
        return [tensor._node for tensor in self.order() if tensor._node is not None]

    def backward(self) -> None:
        grads: Dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data)}
        for tensor in reversed(self.order()):
            grad = grads.pop(id(tensor), None)
            node = tensor._node
            if node is None:
                if grad is not None and tensor.requires_grad:
                    if grad.shape != tensor.shape:
                        raise ShapeError(f"gradient shape {grad.shape} does not match leaf {tensor.shape}")
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                    tensor.grad += grad
                continue
            if node.consumed:
                raise GraphError(f"operation {node.op!r} was already back-propagated; rebuild the forward pass")
            if grad is not None:
                for parent, parent_grad in zip(node.inputs, node.backward_fn(grad)):
                    if parent_grad is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = grads[key] + parent_grad if key in grads else parent_grad
            node.consumed = True
            node.backward_fn = None


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into every requires_grad leaf

    Gradients add up across separate graphs until zero_grad is called.
    A graph can be back-propagated once.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires a gradient")
        loss.grad = loss.grad + 1.0
        return
    if loss._node.consumed:
        raise GraphError("graph already consumed; rebuild the forward pass before calling backward again")
    Graph(loss).backward()


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = _grad_enabled() and any(t.requires_grad for t in inputs)
    out.grad = None
    out.name = ""
    out._node = Node(op, tuple(inputs), backward_fn) if out.requires_grad else None
    return out


def check_finite(value: Union[Tensor, np.ndarray, float], context: str) -> None:
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values in {context}")


# Elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return _result(x.data * factor, "scale", (x,), lambda g: (g * factor,))


def shift(x: Tensor, offset) -> Tensor:
    """x + a constant"""
    offset = np.asarray(offset)
    out = x.data + offset
    if out.shape != x.shape:
        raise ShapeError(f"offset of shape {offset.shape} changes the shape of {x.shape}")
    return _result(out, "shift", (x,), lambda g: (g,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from e
    return _result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def total(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), "total", (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return _result(np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.full_like(x.data, g / n),))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    factor = np.where(x.data >= 0, 1.0, slope).astype(x.data.dtype)
    return _result(x.data * factor, "leaky_relu", (x,), lambda g: (g * factor,))


def positive_part(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.data.dtype)
    return _result(x.data * mask, "positive_part", (x,), lambda g: (g * mask,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences"""
    if a.shape != b.shape:
        raise ShapeError(f"mse needs equal shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def _backward(g):
        grad_a = g * 2.0 * diff / n
        return grad_a, -grad_a

    return _result(np.asarray(np.mean(diff * diff)), "mse", (a, b), _backward)


def sq_distance(embeddings: Tensor, center: np.ndarray) -> Tensor:
    """Row-wise squared euclidean distance to a constant center"""
    center = np.asarray(center)
    if embeddings.ndim != 2 or center.shape != (embeddings.shape[1],):
        raise ShapeError(f"embeddings {embeddings.shape} do not match center of shape {center.shape}")
    diff = embeddings.data - center.astype(embeddings.data.dtype)
    return _result(
        np.sum(diff * diff, axis=1), "sq_distance", (embeddings,), lambda g: (2.0 * diff * g[:, None],)
    )


def take_channel(x: Tensor, index: int) -> Tensor:
    """Channel `index` of an NCHW tensor, kept as a 1-channel NCHW tensor"""
    if x.ndim != 4 or not 0 <= index < x.shape[1]:
        raise ShapeError(f"cannot take channel {index} of tensor with shape {x.shape}")

    def _backward(g):
        grad = np.zeros_like(x.data)
        grad[:, index : index + 1] = g
        return (grad,)

    return _result(x.data[:, index : index + 1].copy(), "take_channel", (x,), _backward)


# Layers


def dense(x: Tensor, weight: Tensor) -> Tensor:
    """x @ W without bias; W has shape (in, out)"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    return _result(
        x.data @ weight.data, "dense", (x, weight), lambda g: (g @ weight.data.T, x.data.T @ g)
    )


def _check_conv_args(x: np.ndarray, w: np.ndarray, stride: int, padding: int, op: str) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{op} needs NCHW input and 4-d weight, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"{op} needs a square kernel, got {w.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"{op} needs stride >= 1 and padding >= 0, got {stride}/{padding}")


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H', W', K, K) view of every receptive field"""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> Tuple[np.ndarray, np.ndarray]:
    windows = _windows(x, w.shape[2], stride, padding)
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), windows


def _conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape: Tuple[int, ...], stride: int, padding: int) -> np.ndarray:
    """Scatter output gradients back onto the (padded) input grid, then crop"""
    n, c, h, width = x_shape
    kernel = w.shape[2]
    out_h, out_w = g.shape[2], g.shape[3]
    cols = np.tensordot(g, w, axes=([1], [0]))  # (N, H', W', C, K, K)
    padded = np.zeros((n, c, h + 2 * padding, width + 2 * padding), dtype=np.result_type(g, w))
    row_stop = stride * (out_h - 1) + 1
    col_stop = stride * (out_w - 1) + 1
    for ki in range(kernel):
        for kj in range(kernel):
            padded[:, :, ki : ki + row_stop : stride, kj : kj + col_stop : stride] += cols[
                :, :, :, :, ki, kj
            ].transpose(0, 3, 1, 2)
    return padded[:, :, padding : padding + h, padding : padding + width]


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free cross-correlation; weight has shape (out, in, K, K)"""
    _check_conv_args(x.data, weight.data, stride, padding, "conv2d")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    kernel = weight.shape[2]
    if kernel > x.shape[2] + 2 * padding or kernel > x.shape[3] + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kernel} larger than padded input {x.shape[2:]} (padding {padding})")
    out, windows = _conv_forward(x.data, weight.data, stride, padding)

    def _backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_x = _conv_input_grad(g, weight.data, x.shape, stride, padding)
        return grad_x, grad_w

    return _result(out, "conv2d", (x, weight), _backward)


def tconv_output_size(size: int, kernel: int, stride: int, padding: int, output_padding: int = 0) -> int:
    """(H - 1) * s - 2p + K + output_padding"""
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def tconv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; weight has shape (in, out, K, K)

    The forward pass is the input gradient of conv2d with the same weight,
    so the two operations are adjoint.
    """
    _check_conv_args(x.data, weight.data, stride, padding, "tconv2d")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"tconv2d: input has {x.shape[1]} channels, weight expects {weight.shape[0]}")
    if not 0 <= output_padding < stride:
        raise ShapeError(f"tconv2d: output_padding must lie in [0, stride), got {output_padding}")
    kernel = weight.shape[2]
    out_h = tconv_output_size(x.shape[2], kernel, stride, padding, output_padding)
    out_w = tconv_output_size(x.shape[3], kernel, stride, padding, output_padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"tconv2d: padding {padding} leaves no output for input {x.shape[2:]} and kernel {kernel}")
    out_shape = (x.shape[0], weight.shape[1], out_h, out_w)
    out = _conv_input_grad(x.data, weight.data, out_shape, stride, padding)

    def _backward(g):
        grad_x, windows = _conv_forward(g, weight.data, stride, padding)
        grad_w = np.tensordot(x.data, windows, axes=([0, 2, 3], [0, 2, 3]))
        return grad_x, grad_w

    return _result(np.ascontiguousarray(out), "tconv2d", (x, weight), _backward)


# Initialization, optimization, verification


def xavier_init(shape: Sequence[int], rng: np.random.Generator, dtype=DEFAULT_DTYPE, name: str = "") -> Tensor:
    """Uniform Glorot initialization in [-a, a], a = sqrt(6 / (fan_in + fan_out))

    Dense weights are (in, out); convolution weights are (out, in, K, K).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2 or min(shape) <= 0:
        raise ShapeError(f"xavier_init needs at least 2 positive dimensions, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    values = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(values, requires_grad=True, name=name)


@dataclass
class AdamState:
    """Moments per parameter name; one state per network"""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: NetworkParams, state: AdamState, weight_decay: float = 0.0) -> NetworkParams:
    """One Adam update in place; weight decay adds lambda * w to each gradient"""
    for name, weight in params:
        if weight.grad is None:
            raise GraphError(f"parameter {name!r} has no gradient; run backward first")
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, weight in params:
        grad = weight.grad.astype(np.float64)
        if weight_decay:
            grad = grad + weight_decay * weight.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(weight.shape)
            v = np.zeros(weight.shape)
        elif m.shape != weight.shape:
            raise ShapeError(f"optimizer state for {name!r} has shape {m.shape}, parameter has {weight.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        step = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        weight.data -= step.astype(weight.data.dtype)
    return params


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-3,
) -> float:
    """Max relative error between backward() and central finite differences

    fn rebuilds the scalar output from the current tensor values. The
    denominator is max(|analytic|, |numeric|, floor).
    """
    for tensor in tensors:
        tensor.zero_grad()
    backward(fn())
    analytic = [tensor.grad.copy() for tensor in tensors]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        flat = tensor.data.reshape(-1)
        if max_coords is not None and max_coords < flat.size:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = range(flat.size)
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = float(grad.reshape(-1)[i])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)
    logger.debug("gradcheck over %d tensors: max relative error %.3e", len(tensors), worst)
    return worst
