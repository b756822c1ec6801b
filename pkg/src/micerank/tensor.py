"""Dense tensors on numpy buffers with reverse-mode automatic differentiation.

Two precisions are supported: float64 for equivalence and gradient-check
tests, float32 for training and benchmarks. An op's output dtype follows its
inputs; mixing the two float dtypes in one op is an error so precision bugs
surface immediately.

Each op links its result tensor to its parents together with a closure that
routes the upstream gradient, forming one graph per forward pass.
``Tensor.backward()`` walks that graph in reverse topological order and
accumulates ``grad`` buffers on every ancestor that requires a gradient.
Tensors are immutable after forward construction except for gradient
accumulation; leaf tensors (parameters) may additionally have their ``data``
rewritten in place by an optimizer *between* forward passes.

Blocked attention entries are masked by substituting a large negative
constant (``-1e30`` in float32, ``-1e300`` in float64) before the softmax and
forcing exact zeros afterwards; a literal ``-inf`` would poison gradients.

The module also keeps an allocation counter over forward value buffers
(``allocated_bytes`` / ``peak_allocated_bytes``) used by the benchmark
harness to report peak memory without relying on OS RSS.
"""

from __future__ import annotations

import math
import threading
import weakref

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradUsageError",
    "MaskedRowError",
    "NumericError",
    "matmul",
    "masked_softmax",
    "layernorm",
    "gelu",
    "linear",
    "concat",
    "gather_rows",
    "select",
    "tsum",
    "tmean",
    "no_grad",
    "grad_enabled",
    "check_finite",
    "mask_fill_value",
    "track_allocations",
    "allocated_bytes",
    "peak_allocated_bytes",
    "reset_peak_allocated_bytes",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GradUsageError(RuntimeError):
    """Autodiff API misuse, e.g. ``backward()`` on a non-scalar."""


class MaskedRowError(ValueError):
    """A masked softmax row has no allowed source at all."""


class NumericError(ArithmeticError):
    """A value left the finite range (NaN or Inf)."""


_F32_MASK_FILL = -1e30
_F64_MASK_FILL = -1e300


def mask_fill_value(dtype) -> float:
    """Large negative logit stand-in for blocked attention entries."""
    return _F32_MASK_FILL if np.dtype(dtype) == np.float32 else _F64_MASK_FILL


# --------------------------------------------------------------------------
# allocation tracking (value buffers only; gradients are excluded, which is
# exact for inference/bench paths where no gradient buffer exists)
# --------------------------------------------------------------------------


class _AllocStats:
    __slots__ = ("live", "peak", "enabled", "lock")

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.enabled = False
        self.lock = threading.Lock()


_ALLOC = _AllocStats()


def track_allocations(enabled: bool) -> None:
    """Turn the tensor-buffer allocation counter on or off."""
    with _ALLOC.lock:
        _ALLOC.enabled = bool(enabled)
        if enabled:
            _ALLOC.live = 0
            _ALLOC.peak = 0


def allocated_bytes() -> int:
    return _ALLOC.live


def peak_allocated_bytes() -> int:
    return _ALLOC.peak


def reset_peak_allocated_bytes() -> None:
    with _ALLOC.lock:
        _ALLOC.peak = _ALLOC.live


def _on_free(nbytes: int) -> None:
    with _ALLOC.lock:
        _ALLOC.live -= nbytes


def _register_alloc(owner: "Tensor", data: np.ndarray) -> None:
    # Views share their base's bytes; count only owning arrays.
    if not _ALLOC.enabled or data.base is not None:
        return
    nbytes = data.nbytes
    with _ALLOC.lock:
        _ALLOC.live += nbytes
        if _ALLOC.live > _ALLOC.peak:
            _ALLOC.peak = _ALLOC.live
    weakref.finalize(owner, _on_free, nbytes)


# --------------------------------------------------------------------------
# grad-mode switch (thread-local so concurrent forwards stay independent)
# --------------------------------------------------------------------------


class _GradMode(threading.local):
    enabled = True


_GRAD_MODE = _GradMode()


def grad_enabled() -> bool:
    return _GRAD_MODE.enabled


class no_grad:
    """Context manager that suppresses graph construction inside its scope."""

    def __enter__(self):
        self._prev = _GRAD_MODE.enabled
        _GRAD_MODE.enabled = False
        return self

    def __exit__(self, *exc):
        _GRAD_MODE.enabled = self._prev
        return False


# --------------------------------------------------------------------------
# the tensor itself
# --------------------------------------------------------------------------


class Tensor:
    """A dense n-d float array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        _register_alloc(self, arr)

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GradUsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying buffer (no copy); treat it as read-only."""
        return self.data

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    # -- autodiff ---------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every graph ancestor of this scalar."""
        if self.data.size != 1:
            raise GradUsageError("backward() expects a scalar loss")
        if not self.requires_grad:
            raise GradUsageError("backward() on a tensor with no graph attached")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node)

    def detach(self) -> "Tensor":
        """Same data, severed from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return _add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_coerce(other, self)))

    def __rsub__(self, other):
        return _add(_coerce(other, self), _neg(self))

    def __mul__(self, other):
        return _mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise GradUsageError("tensor/tensor division is not supported; divide by a scalar")
        return _mul(self, _coerce(1.0 / other, self))

    def __neg__(self):
        return _neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return _reshape(self, tuple(shape))

    def transpose(self, axes) -> "Tensor":
        return _transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._backward_fn = backward_fn if needs else None
    _register_alloc(out, data)
    return out


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        if value.data.dtype != like.data.dtype:
            raise ShapeError(
                f"mixed dtypes in one op: {value.data.dtype} vs {like.data.dtype}"
            )
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        if g.base is not None or not g.flags.writeable:
            g = g.copy()
        t.grad = g
    else:
        t.grad += g


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward_fn(out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad, b.data.shape))

    return _make(data, (a, b), backward_fn)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward_fn(out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _make(data, (a, b), backward_fn)


def _neg(x: Tensor) -> Tensor:
    def backward_fn(out):
        if x.requires_grad:
            _accumulate(x, -out.grad)

    return _make(-x.data, (x,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics; operands must be >= 2-d."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul expects tensors")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"mixed dtypes in matmul: {a.data.dtype} vs {b.data.dtype}")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from None

    def backward_fn(out):
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward_fn)


def _reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None

    def backward_fn(out):
        if x.requires_grad:
            _accumulate(x, out.grad.reshape(x.data.shape))

    return _make(data, (x,), backward_fn)


def _transpose(x: Tensor, axes: tuple) -> Tensor:
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(out):
        if x.requires_grad:
            _accumulate(x, np.transpose(out.grad, inverse))

    return _make(data, (x,), backward_fn)


def concat(parts: list, axis: int) -> Tensor:
    """Concatenate tensors along ``axis``."""
    if not parts:
        raise ShapeError("concat of zero tensors")
    dtype = parts[0].data.dtype
    if any(p.data.dtype != dtype for p in parts):
        raise ShapeError("concat operands must share a dtype")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(out):
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(start, stop)
                _accumulate(part, out.grad[tuple(index)])

    return _make(data, tuple(parts), backward_fn)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Fancy row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ShapeError("gather_rows with empty index")
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise IndexError(
            f"row id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def backward_fn(out):
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            _accumulate(table, g)

    return _make(data, (table,), backward_fn)


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Pick a single index along ``axis``, dropping that axis."""
    data = np.take(x.data, index, axis=axis)

    def backward_fn(out):
        if x.requires_grad:
            g = np.zeros_like(x.data)
            sl = [slice(None)] * x.data.ndim
            sl[axis] = index
            g[tuple(sl)] = out.grad
            _accumulate(x, g)

    return _make(data, (x,), backward_fn)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(out):
        if not x.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(data, (x,), backward_fn)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(count))


# --------------------------------------------------------------------------
# neural-net primitives
# --------------------------------------------------------------------------


def masked_softmax(logits: Tensor, allow) -> Tensor:
    """Softmax over the last axis restricted to allowed entries.

    ``allow`` is a boolean array broadcastable to ``logits.shape``. Disallowed
    entries come out exactly 0; allowed entries are the softmax of the allowed
    logits, so each row sums to 1. A row with no allowed entry raises
    :class:`MaskedRowError` (the mask builders guarantee every position keeps
    at least a self/sink source).
    """
    allow = np.asarray(allow, dtype=bool)
    try:
        allow_b = np.broadcast_to(allow, logits.data.shape)
    except ValueError:
        raise ShapeError(
            f"mask shape {allow.shape} does not broadcast to logits {logits.data.shape}"
        ) from None
    if not allow_b.any(axis=-1).all():
        raise MaskedRowError("masked softmax row with no allowed entry")
    fill = mask_fill_value(logits.data.dtype)
    masked = np.where(allow_b, logits.data, fill)
    masked -= masked.max(axis=-1, keepdims=True)
    e = np.exp(masked)
    e *= allow_b
    probs = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(out):
        if logits.requires_grad:
            g = out.grad
            inner = (g * probs).sum(axis=-1, keepdims=True)
            _accumulate(logits, probs * (g - inner))

    return _make(probs, (logits,), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    sq = x.data * x.data
    u = _GELU_C * (x.data + _GELU_A * (sq * x.data))
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward_fn(out):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * sq)
            local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            _accumulate(x, out.grad * local)

    return _make(data, (x,), backward_fn)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layernorm params must have shape ({d},), got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward_fn(out):
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead))
        if x.requires_grad:
            gg = g * gain.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (gg - m1 - xhat * m2) * inv)

    return _make(data, (x, gain, bias), backward_fn)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis: ``x @ w + b``."""
    if w.data.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d, got {w.data.shape}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"linear: input width {x.data.shape[-1]} does not match weight {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear bias must have shape ({w.data.shape[1]},)")
    return matmul(x, w) + b


def check_finite(x: Tensor, what: str = "value") -> Tensor:
    """Raise :class:`NumericError` if ``x`` holds a NaN or Inf."""
    if not np.isfinite(x.data).all():
        raise NumericError(f"non-finite {what} encountered")
    return x
