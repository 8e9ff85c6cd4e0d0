"""Dense tensors with a reverse-mode gradient tape.

Every op computes its forward value eagerly with numpy and, when any input
requires a gradient, records a closure that maps the output gradient to the
input gradients. :func:`backward` walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError, NonFiniteError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.size == 0:
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype if dtype is not None else np.float64), requires_grad=True)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    return a, b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), bw, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), bw, "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), bw, "tanh")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        return (g * y,)

    return _make(y, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    def bw(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), bw, "log")


# ---------------------------------------------------------------- structural


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make(np.array(out, copy=True) if np.ndim(out) else np.asarray(out), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, bw, "concat")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------- fused ops


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = np.exp(z)
    y /= y.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def dyt(x: Tensor, alpha: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Dynamic tanh: ``gamma * tanh(alpha * x) + beta`` per channel."""
    c = x.shape[-1]
    for name, t in (("alpha", alpha), ("gamma", gamma), ("beta", beta)):
        if t.shape not in ((c,), (1,), ()):
            raise DimensionError(f"dyt {name} has shape {t.shape}, expected ({c},) for input {x.shape}")
    t = np.tanh(alpha.data * x.data)
    out = gamma.data * t + beta.data

    def bw(g):
        dt = g * gamma.data
        sech2 = 1.0 - t * t
        gx = dt * sech2 * alpha.data
        ga = _unbroadcast(dt * sech2 * x.data, alpha.shape)
        gg = _unbroadcast(g * t, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        return gx, ga, gg, gb

    return _make(out, (x, alpha, gamma, beta), bw, "dyt")


def max_over_sequence(x: Tensor) -> Tensor:
    """Max over the second-to-last (sequence) axis; ties route to the first index."""
    if x.ndim < 2:
        raise DimensionError(f"max_over_sequence needs rank >= 2, got {x.shape}")
    idx = np.argmax(x.data, axis=-2)
    out = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _make(out, (x,), bw, "max_over_sequence")


def same_padding(h: int, w: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Zero padding (before, after) on the sequence and projection axes.

    Even extents put the extra row/column after, matching the usual
    "same" convention.
    """
    return ((h - 1) // 2, h - 1 - (h - 1) // 2), ((w - 1) // 2, w - 1 - (w - 1) // 2)


def _band_index(w: int) -> tuple[np.ndarray, np.ndarray]:
    """Kernel column feeding (input column c, output column j) under same padding."""
    left = (w - 1) // 2
    idx = np.arange(w)[:, None] - np.arange(w)[None, :] + left
    valid = (idx >= 0) & (idx < w)
    return np.where(valid, idx, 0), valid


def depthwise_conv2d_same_avg(logits: Tensor, kernels: Sequence[Tensor], biases: Tensor | None = None) -> Tensor:
    """Cross-correlate ``logits[..., n, p]`` with each kernel and average the responses.

    The same kernel set is applied to every leading slice (every head).
    Each kernel has an odd height and width equal to ``p``; zero "same"
    padding keeps the ``n x p`` extent. ``biases`` holds one scalar per kernel.

    Because the kernel spans the whole projection axis, each kernel row acts
    on a logit row as a ``p x p`` banded matrix, so a kernel of height ``h``
    reduces to ``h`` shifted matrix products.
    """
    if logits.ndim < 2:
        raise DimensionError(f"conv input needs rank >= 2, got {logits.shape}")
    if not kernels:
        raise ConfigError("at least one kernel is required")
    n, p = logits.shape[-2:]
    f = len(kernels)
    for k in kernels:
        if k.ndim != 2:
            raise ConfigError(f"kernel must be 2-D, got shape {k.shape}")
        h, w = k.shape
        if h % 2 == 0:
            raise ConfigError(f"kernel height must be odd, got {h}")
        if w != p:
            raise ConfigError(f"kernel width {w} must equal projection count {p}")
    if biases is not None and biases.shape != (f,):
        raise DimensionError(f"expected {f} biases, got shape {biases.shape}")

    idx, valid = _band_index(p)
    lead = [(0, 0)] * (logits.ndim - 2)
    hmax = max(k.shape[0] for k in kernels)
    pad = (hmax - 1) // 2
    xp = np.pad(logits.data, lead + [(pad, pad), (0, 0)])
    acc = None
    for k in kernels:
        off = pad - (k.shape[0] - 1) // 2
        for a in range(k.shape[0]):
            band = np.where(valid, k.data[a][idx], 0.0).astype(logits.dtype, copy=False)
            term = np.matmul(xp[..., off + a:off + a + n, :], band)
            acc = term if acc is None else acc + term
    if biases is not None:
        acc = acc + biases.data.sum()
    out = acc / f

    def bw(g):
        gs = g / f
        gxp = np.zeros_like(xp)
        gks = []
        g2 = gs.reshape(-1, p)
        for k in kernels:
            off = pad - (k.shape[0] - 1) // 2
            gk = np.zeros_like(k.data)
            for a in range(k.shape[0]):
                band = np.where(valid, k.data[a][idx], 0.0)
                rows = xp[..., off + a:off + a + n, :]
                gxp[..., off + a:off + a + n, :] += np.matmul(gs, band.T)
                gband = rows.reshape(-1, p).T @ g2
                gk[a] = np.bincount(idx[valid], weights=gband[valid], minlength=p)
            gks.append(gk)
        grads = [gxp[..., pad:pad + n, :], *gks]
        if biases is not None:
            grads.append(np.full(f, gs.sum(), dtype=gs.dtype))
        return tuple(grads)

    parents = [logits, *kernels] + ([biases] if biases is not None else [])
    return _make(out, parents, bw, "depthwise_conv2d")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (batch, classes), got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, labels])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def sigmoid_binary_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy for a single-logit head."""
    labels = np.asarray(labels, dtype=logits.dtype)
    x = logits.data.reshape(-1)
    if x.shape != labels.shape:
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")
    if np.any((labels != 0) & (labels != 1)):
        raise DataError("binary labels must be 0 or 1")
    # log(1 + exp(-|x|)) keeps large logits finite
    loss = np.mean(np.maximum(x, 0) - x * labels + np.log1p(np.exp(-np.abs(x))))
    sig = 1.0 / (1.0 + np.exp(-x))

    def bw(g):
        return (((sig - labels) * (g / x.size)).reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "binary_cross_entropy")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` and clear the tape."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise DimensionError(f"optimiser state tracks {len(state.first_moment)} parameters, got {len(params)}")
    for p, g, m in zip(params, grads, state.first_moment):
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if m.shape != p.shape:
            raise DimensionError(f"moment shape {m.shape} does not match parameter {p.shape}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------- raw tensor files

MAGIC = b"SALT"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def encode_tensor(array) -> bytes:
    """Serialise an array: magic, u32 rank, u32 extents, u32 dtype code, payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise DataError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    header = MAGIC + struct.pack(f"<I{arr.ndim}II", arr.ndim, *arr.shape, _DTYPE_CODES[dt])
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of :func:`encode_tensor`; returns the array and the end offset."""
    try:
        if buf[offset:offset + 4] != MAGIC:
            raise DataError(f"bad tensor magic at byte {offset}")
        (rank,) = struct.unpack_from("<I", buf, offset + 4)
        dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
        (code,) = struct.unpack_from("<I", buf, offset + 8 + 4 * rank)
    except struct.error:
        raise DataError("truncated tensor header") from None
    if code not in _CODE_DTYPES:
        raise DataError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    start = offset + 12 + 4 * rank
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if start + nbytes > len(buf):
        raise DataError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=start).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), start + nbytes


def write_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise DataError(f"{path}: {len(buf) - end} trailing bytes after tensor payload")
    return arr


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf]
