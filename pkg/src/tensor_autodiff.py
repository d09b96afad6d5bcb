# src/tensor_autodiff.py
"""
AdvMetric - Tensors with Reverse-Mode Automatic Differentiation
Float32 numpy arrays, a per-thread gradient tape, and the primitives needed by
the classifier, both attack families, and every loss term
"""

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import AutodiffError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float32
NORM_FLOOR = 1e-12

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


class Tensor:
    """Dense float32 array that can participate in the gradient tape"""

    def __init__(self, data: Any, requires_grad: bool = False):
        self.data = np.require(np.asarray(data, dtype=DTYPE), requirements="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None
        self._is_leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def attached(self) -> bool:
        """True when the tensor is recorded on a live tape"""
        return self.requires_grad and self._tape is not None and self.node_id is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor has more than one element")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Share the data but never accumulate gradient"""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

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

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class TapeNode:
    """One recorded operation"""
    node_id: int
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_rule: BackwardRule


class Tape:
    """Ordered record of operations; recording order is a topological order"""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._leaves: List[Tensor] = []
        self._next_id = 0
        self.consumed = False

    def _new_id(self) -> int:
        node_id = self._next_id
        self._next_id += 1
        return node_id

    def watch(self, tensor: Tensor):
        """Attach a leaf tensor to this tape"""
        if tensor._tape is self and tensor.node_id is not None:
            return
        if not tensor._is_leaf and tensor._tape is not None:
            raise AutodiffError(
                "tensor was produced on a different tape; tapes are confined to one thread of control"
            )
        tensor.node_id = self._new_id()
        tensor._tape = self
        self._leaves.append(tensor)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, rule: BackwardRule):
        """Record an operation whose output depends on tape-attached inputs"""
        if self.consumed:
            raise AutodiffError("tape already consumed by backward(); call reset() before recording again")
        for tensor in inputs:
            if tensor.requires_grad:
                self.watch(tensor)
        output.node_id = self._new_id()
        output._tape = self
        output._is_leaf = False
        self.nodes.append(TapeNode(output.node_id, op, tuple(inputs), output, rule))

    def backward(self, loss: Tensor):
        """Propagate d(loss)/d(node) to every attached ancestor, visiting each node once"""
        if self.consumed:
            raise AutodiffError("backward() called twice on the same tape without reset()")
        if loss.data.shape != ():
            raise AutodiffError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or loss._tape is not self:
            raise AutodiffError("backward() needs a loss attached to the active tape")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=DTYPE)}
        for node in reversed(self.nodes):
            upstream = grads.pop(node.node_id, None)
            if upstream is None:
                continue
            node.output.grad = upstream
            input_grads = node.backward_rule(upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad or tensor.node_id is None:
                    continue
                grad = np.asarray(grad, dtype=DTYPE)
                if tensor.node_id in grads:
                    grads[tensor.node_id] = grads[tensor.node_id] + grad
                else:
                    grads[tensor.node_id] = grad

        for leaf in self._leaves:
            grad = grads.get(leaf.node_id)
            if grad is None:
                continue
            leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
        self.consumed = True

    def reset(self):
        """Forget all recorded operations and the gradients of watched leaves"""
        for leaf in self._leaves:
            leaf.grad = None
            leaf.node_id = None
            leaf._tape = None
        for node in self.nodes:
            node.output.node_id = None
            node.output._tape = None
        self.nodes.clear()
        self._leaves.clear()
        self._next_id = 0
        self.consumed = False


def current_tape() -> Tape:
    """The tape of the calling thread, created on first use"""
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = Tape()
        _state.tape = tape
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def tape_scope() -> Iterator[Tape]:
    """Install a fresh tape for the current thread"""
    previous_tape = getattr(_state, "tape", None)
    previous_mode = grad_enabled()
    tape = Tape()
    _state.tape = tape
    _state.grad_enabled = True
    try:
        yield tape
    finally:
        _state.tape = previous_tape
        _state.grad_enabled = previous_mode


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording, for inference"""
    previous_mode = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous_mode


def backward(loss: Tensor):
    """Reverse-mode pass from a scalar loss on its tape"""
    if loss._tape is None:
        raise AutodiffError("backward() needs a loss attached to a tape; got a detached tensor")
    loss._tape.backward(loss)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DTYPE))


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, rule: BackwardRule) -> Tensor:
    requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    if requires_grad:
        current_tape().record(op, inputs, out, rule)
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.shape[1:] == b.shape or b.shape[1:] == a.shape:
        return
    raise ShapeError(op, a.shape, b.shape, detail="only leading-batch broadcasting is supported")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=DTYPE)
    # operand was broadcast across the leading batch axis
    return grad.sum(axis=0)


########### Elementwise ops ###########

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _apply("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _apply("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _apply("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def rule(g: np.ndarray):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _apply("div", (a, b), a.data / b.data, rule)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _apply("neg", (a,), -a.data, lambda g: (-g,))


def abs(a: ArrayLike) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _apply("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _apply("relu", (a,), np.where(mask, a.data, 0).astype(DTYPE), lambda g: (g * mask,))


def sign(a: ArrayLike) -> Tensor:
    """Elementwise sign with sign(0) = 0; never recorded"""
    a = as_tensor(a)
    return Tensor(np.sign(a.data))


########### Linear algebra ###########

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="expected (n, k) @ (k, m)")
    return _apply("matmul", (a, b), a.data @ b.data,
                  lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or a.size % known != 0:
            raise ShapeError("reshape", a.shape, shape)
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    return _apply("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def index_rows(a: ArrayLike, rows: Sequence[int]) -> Tensor:
    """Gather rows along the leading batch axis"""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    if a.ndim == 0 or (rows.size and (rows.min() < 0 or rows.max() >= a.shape[0])):
        raise ShapeError("index_rows", a.shape, rows.shape, detail="row index out of range")

    def rule(g: np.ndarray):
        grad = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(grad, rows, g)
        return (grad,)

    return _apply("index_rows", (a,), a.data[rows], rule)


########### Reductions ###########

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _check_axis(op: str, a: Tensor, axis: Optional[int]) -> Optional[int]:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(op, a.shape, detail=f"axis {axis} out of range")
    return axis % a.ndim


def sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axis = _check_axis("sum", a, axis)
    out = np.sum(a.data, axis=axis, dtype=DTYPE)
    return _apply("sum", (a,), out, lambda g: (_expand_reduced(g, a.shape, axis).copy(),))


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis("mean", a, axis)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean", a.shape, detail="mean of an empty extent")
    out = np.mean(a.data, axis=axis, dtype=DTYPE)
    return _apply("mean", (a,), out,
                  lambda g: ((_expand_reduced(g, a.shape, axis) / DTYPE(count)).astype(DTYPE),))


def l2norm(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    """Euclidean norm over all elements, or along one axis"""
    a = as_tensor(a)
    axis = _check_axis("l2norm", a, axis)
    norm = np.sqrt(np.sum(a.data.astype(np.float64) ** 2, axis=axis)).astype(DTYPE)

    def rule(g: np.ndarray):
        safe = np.maximum(norm, NORM_FLOOR)
        scale = _expand_reduced(g / safe, a.shape, axis)
        # zero vectors receive zero gradient
        return ((scale * a.data).astype(DTYPE),)

    return _apply("l2norm", (a,), norm, rule)


def log_softmax(a: ArrayLike) -> Tensor:
    """Row-wise log-softmax over the last axis with max-subtraction"""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("log_softmax", a.shape, detail="expected (batch, classes)")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_norm

    def rule(g: np.ndarray):
        softmax = np.exp(out)
        return (g - softmax * g.sum(axis=1, keepdims=True),)

    return _apply("log_softmax", (a,), out, rule)


########### Convolutional ops ###########

def conv2d(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """Valid (no padding), stride-1 cross-correlation; x is (B, C, H, W), weight (O, C, k, k)"""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="expected (B, C, H, W) and (O, C, k, k)")
    out_channels, in_channels, kh, kw = weight.shape
    if bias.shape != (out_channels,):
        raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias must have one entry per output channel")
    batch, _, height, width = x.shape
    if height < kh or width < kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than input")
    h_out, w_out = height - kh + 1, width - kw + 1

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * h_out * w_out, in_channels * kh * kw)
    w_mat = weight.data.reshape(out_channels, -1)
    out = (cols @ w_mat.T + bias.data).reshape(batch, h_out, w_out, out_channels).transpose(0, 3, 1, 2)

    def rule(g: np.ndarray):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_w = (g_mat.T @ cols).reshape(weight.shape)
        grad_b = g_mat.sum(axis=0)
        grad_cols = (g_mat @ w_mat).reshape(batch, h_out, w_out, in_channels, kh, kw)
        grad_x = np.zeros(x.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                grad_x[:, :, i:i + h_out, j:j + w_out] += grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return grad_x, grad_w, grad_b

    return _apply("conv2d", (x, weight, bias), np.ascontiguousarray(out), rule)


def maxpool2d(x: ArrayLike, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element of the window"""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise ShapeError("maxpool2d", x.shape, (size, size), detail="spatial extents must divide the pool size")
    batch, channels, height, width = x.shape
    h_out, w_out = height // size, width // size
    windows = (x.data.reshape(batch, channels, h_out, size, w_out, size)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(batch, channels, h_out, w_out, size * size))
    winner = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]

    def rule(g: np.ndarray):
        grad_windows = np.zeros(windows.shape, dtype=DTYPE)
        np.put_along_axis(grad_windows, winner[..., None], g[..., None], axis=-1)
        grad_x = (grad_windows.reshape(batch, channels, h_out, w_out, size, size)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(x.shape))
        return (grad_x,)

    return _apply("maxpool2d", (x,), out, rule)


########### Gradient utilities ###########

def grad_wrt_input(model: Callable[[Tensor], Any], x: ArrayLike, y: Any,
                   lossfn: Callable[[Any, Any], Tensor]) -> Tensor:
    """
    Gradient of lossfn(model(x), y) with respect to the input x.

    Parameters exposed through ``model.parameters()`` are detached for the
    duration of the call, so their values and gradients are left untouched.
    """
    x_data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    params = list(model.parameters()) if hasattr(model, "parameters") else []
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        with tape_scope():
            x_in = Tensor(x_data, requires_grad=True)
            loss = lossfn(model(x_in), y)
            backward(loss)
            grad = x_in.grad if x_in.grad is not None else np.zeros_like(x_data)
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad = flag
    return Tensor(grad)


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """
    Compare analytic gradients of a scalar function against central finite
    differences. Differences are accumulated in float64 using the actual
    float32 step. Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=DTYPE) for a in inputs]
    with tape_scope():
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        backward(fn(*tensors))
        analytic = [t.grad.astype(np.float64) if t.grad is not None else np.zeros(t.shape) for t in tensors]

    worst = 0.0
    with no_grad():
        for array, grad in zip(arrays, analytic):
            numeric = np.zeros(array.shape, dtype=np.float64)
            flat = array.reshape(-1)
            for j in range(flat.size):
                original = flat[j]
                plus, minus = DTYPE(original + h), DTYPE(original - h)
                flat[j] = plus
                f_plus = float(fn(*[Tensor(a) for a in arrays]).data)
                flat[j] = minus
                f_minus = float(fn(*[Tensor(a) for a in arrays]).data)
                flat[j] = original
                numeric.flat[j] = (f_plus - f_minus) / (float(plus) - float(minus))
            scale = np.linalg.norm(grad) + np.linalg.norm(numeric)
            if scale > 1e-12:
                worst = max(worst, float(np.linalg.norm(grad - numeric) / scale))
    return worst


if __name__ == "__main__":
    print("🔧 Testing AdvMetric autodiff engine...")
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with tape_scope():
        loss = sum(x * x)
        backward(loss)
    print(f"   d(sum x^2)/dx = {x.grad}")
    err = gradient_check(lambda a, b: sum(relu(matmul(a, b))),
                         [np.random.default_rng(0).normal(size=(3, 4)),
                          np.random.default_rng(1).normal(size=(4, 2))])
    print(f"   relu(matmul) relative gradient error: {err:.2e}")
    print("✅ Autodiff engine operational!")
