"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: every operation that touches a tensor
requiring gradients records its parents and a backward closure on the output.
``backward`` replays the recorded operations in reverse topological order
(the tape), accumulating gradients into ``Tensor.grad``. Everything runs on
64-bit floats so that finite-difference gradient checks at 1e-4 relative
error are meaningful.
"""

from __future__ import annotations

import struct
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class RankError(ValueError):
    """Operand has the wrong rank (e.g. non-scalar loss passed to backward)."""


class UninitializedGradientError(RuntimeError):
    """A parameter update was requested before gradients were populated."""


# Gradient recording can be switched off for evaluation-only forward passes.
_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction inside its scope."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float64 array participating in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() requires a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate grads of every reachable requires_grad tensor.

        The loss must be scalar (size one). Gradients accumulate, so callers
        are responsible for zeroing parameter grads between steps.
        """
        if self.data.size != 1:
            raise RankError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        for node in Tape(self):
            if node.grad is None:
                continue
            if node._backward is not None:
                node._backward(node.grad)

    # ---- operator sugar -------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Reverse-topological record of the operations reachable from a root.

    Iterating a Tape yields nodes in an order where every operation's output
    is visited before its inputs, which is exactly the order needed for the
    reverse sweep. The root's gradient is seeded with ones.
    """

    def __init__(self, root: Tensor):
        order = []
        visited = set()
        stack = [(root, False)]
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
        self._order = order
        root.grad = np.ones_like(root.data)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(reversed(self._order))

    def __len__(self) -> int:
        return len(self._order)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0.0

    def backward(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow for large |x|."""
    a = _lift(a)
    out_data = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * sig)

    return _make(out_data, (a,), backward)


def square(a) -> Tensor:
    a = _lift(a)
    return mul(a, a)


# ---- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise RankError(f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), backward)


# ---- reductions ------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / count, a.data.shape).copy())

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# ---- shape manipulation -----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    src_shape = a.data.shape

    def backward(g):
        _accum(a, g.reshape(src_shape))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def take_rows(a, indices) -> Tensor:
    """Gather rows by index; gradients scatter-add back to the source rows."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        if not a.requires_grad:
            return
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _accum(a, acc)

    return _make(a.data[idx], (a,), backward)


def take_per_row(a, indices) -> Tensor:
    """Select one element per row: out[i] = a[i, indices[i]]."""
    a = _lift(a)
    if a.data.ndim != 2:
        raise RankError(f"take_per_row expects a matrix, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.data.shape[0])

    def backward(g):
        if not a.requires_grad:
            return
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows, idx), g)
        _accum(a, acc)

    return _make(a.data[rows, idx], (a,), backward)


def repeat_rows(a, k: int) -> Tensor:
    """Repeat each row k times in place: [r0, r0, .., r1, r1, ..]."""
    a = _lift(a)
    n = a.data.shape[0]

    def backward(g):
        _accum(a, g.reshape(n, k, *a.data.shape[1:]).sum(axis=1))

    return _make(np.repeat(a.data, k, axis=0), (a,), backward)


def tile_rows(a, reps: int) -> Tensor:
    """Stack the whole row block reps times: [r0..rn, r0..rn, ..]."""
    a = _lift(a)
    n = a.data.shape[0]

    def backward(g):
        _accum(a, g.reshape(reps, n, *a.data.shape[1:]).sum(axis=0))

    return _make(np.tile(a.data, (reps,) + (1,) * (a.data.ndim - 1)), (a,), backward)


# ---- normalization and softmax ------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along an axis; slices sum to one."""
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (g - inner))

    return _make(out_data, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        _accum(x, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by an elementwise affine map."""
    x = _lift(x)
    if x.data.shape[-1] == 0:
        raise ShapeError("layer_norm over an empty last dimension")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(square(centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


# ---- parameters -----------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParameterStore:
    """Named parameter map with deterministic (lexicographic) iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step = 0

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self):
        for _, p in self.items():
            p.grad = None

    def num_scalars(self) -> int:
        return sum(p.data.size for _, p in self.items())

    def grad_norm(self) -> float:
        total = 0.0
        for name, p in self.items():
            if p.grad is None:
                raise UninitializedGradientError(f"parameter {name!r} has no gradient")
            total += float((p.grad * p.grad).sum())
        return float(np.sqrt(total))


def sgd_step(store: ParameterStore, lr: float, clip_norm: float) -> ParameterStore:
    """SGD update with global-norm clipping; clears grads afterwards.

    If the global L2 gradient norm exceeds clip_norm, all gradients are
    rescaled by clip_norm / norm before the update, so the effective norm
    never exceeds the cap.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    gnorm = store.grad_norm()
    scale = 1.0 if gnorm <= clip_norm else clip_norm / gnorm
    for _, p in store.items():
        p.data -= lr * scale * p.grad
        p.grad = None
    store.step += 1
    return store


# ---- checkpoint format ------------------------------------------------------
# Layout (little-endian):
#   u32 format version, u64 parameter count, u64 global step
#   per parameter: u32 name length, name bytes (utf-8), u32 rank,
#                  u64 per-axis extents, float64 row-major payload

_CKPT_VERSION = 1


def save_checkpoint(store: ParameterStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IQQ", _CKPT_VERSION, len(store), store.step))
        for name, p in store.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            for extent in p.data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParameterStore:
    store = ParameterStore()
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<IQQ"))
        version, count, step = struct.unpack("<IQQ", head)
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        store.step = step
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * n)
            if len(payload) != 8 * n:
                raise ValueError(f"truncated checkpoint payload for {name!r}")
            data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
            store.create(name, data)
    return store
