"""Minimal dense tensor library with reverse-mode automatic differentiation.

Tensors wrap a flat row-major numpy buffer. Every primitive records its
operands and a backward rule on the produced tensor; ``backward`` builds a
Tape (a topologically ordered list of recorded applications) and replays it
in reverse, accumulating gradients additively into operand ``grad`` buffers.

Numerical policy:
  - two working precisions, float32 (default) and float64 (verification);
    switch with ``set_default_dtype`` or the ``using_dtype`` context manager
  - any primitive that produces a non-finite value raises NumericError
  - broadcasting is restricted to scalar-vs-tensor plus trailing-axis
    vectors for add/multiply (bias and gain); everything else is a loud
    ShapeError

``grad_check`` is the independent central-finite-difference oracle used to
verify every backward rule in this package.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import AutodiffError, NumericError, ShapeError

_FLOAT_DTYPES = {"float32": np.float32, "float64": np.float64}

_state = threading.local()


def _thread_state():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
    return _state


_default_dtype = np.float32


def set_default_dtype(dtype: str | np.dtype) -> None:
    """Set the dtype new tensors default to ('float32' or 'float64')."""
    global _default_dtype
    key = np.dtype(dtype).name
    if key not in _FLOAT_DTYPES:
        raise ShapeError(f"unsupported dtype {key!r}; use float32 or float64")
    _default_dtype = _FLOAT_DTYPES[key]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def using_dtype(dtype: str | np.dtype):
    """Temporarily switch the default dtype (verification runs use float64)."""
    global _default_dtype
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = old


def is_grad_enabled() -> bool:
    return _thread_state().grad_enabled


@contextmanager
def no_grad():
    """Disable tape recording (generation / evaluation fast path)."""
    st = _thread_state()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value")
    return arr


class Tensor:
    """Dense row-major array with an optional gradient buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule",
                 "_op", "_needs_grad", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        if arr.dtype.name not in _FLOAT_DTYPES:
            raise ShapeError(f"tensor dtype must be float32/float64, got {arr.dtype.name}")
        _check_finite(arr, "tensor")
        # ascontiguousarray promotes 0-d to 1-d on numpy 2.x; 0-d is already contiguous
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr

        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._needs_grad = self.requires_grad
        self._backward_ran = False

    # -- construction of op outputs ------------------------------------------

    @classmethod
    def _compose(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward_rule: Callable[[np.ndarray], None], op: str) -> "Tensor":
        """Build an op output; records tape linkage when grads are live."""
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._op = op
        out._backward_ran = False
        live = is_grad_enabled() and any(p._needs_grad for p in parents)
        if live:
            out._parents = tuple(parents)
            out._backward_rule = backward_rule
            out._needs_grad = True
        else:
            out._parents = ()
            out._backward_rule = None
            out._needs_grad = False
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self._needs_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- basics ---------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- elementwise binary ----------------------------------------------------

    def _coerce_operand(self, other, op: str) -> "Tensor":
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise ShapeError(f"{op}: dtype mismatch {self.dtype} vs {other.dtype}")
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Tensor(np.asarray(other, dtype=self.dtype).reshape(()), dtype=self.dtype)
        raise ShapeError(f"{op}: unsupported operand type {type(other).__name__}")

    @staticmethod
    def _broadcast_kind(a_shape, b_shape, op: str) -> str:
        """'same', 'b_scalar', 'a_scalar', or 'b_trailing' (b is a (d,) vector)."""
        if a_shape == b_shape:
            return "same"
        if b_shape == ():
            return "b_scalar"
        if a_shape == ():
            return "a_scalar"
        if len(b_shape) == 1 and len(a_shape) >= 2 and a_shape[-1] == b_shape[0]:
            return "b_trailing"
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not conform")

    @staticmethod
    def _reduce_to(g: np.ndarray, shape: tuple[int, ...], kind: str) -> np.ndarray:
        if kind == "same":
            return g
        if kind in ("b_scalar", "a_scalar"):
            return g.sum().reshape(shape)
        # b_trailing: sum over all leading axes
        return g.reshape(-1, shape[0]).sum(axis=0)

    def __add__(self, other) -> "Tensor":
        b = self._coerce_operand(other, "add")
        kind = self._broadcast_kind(self.shape, b.shape, "add")
        data = _check_finite(self.data + b.data, "add")
        a = self

        def rule(g):
            a._accum(self._reduce_to(g, a.shape, "same" if kind != "a_scalar" else "a_scalar"))
            b._accum(self._reduce_to(g, b.shape, kind if kind != "a_scalar" else "same"))

        return Tensor._compose(data, (a, b), rule, "add")

    def __radd__(self, other) -> "Tensor":
        return self.__add__(other)

    def __sub__(self, other) -> "Tensor":
        b = self._coerce_operand(other, "subtract")
        kind = self._broadcast_kind(self.shape, b.shape, "subtract")
        data = _check_finite(self.data - b.data, "subtract")
        a = self

        def rule(g):
            a._accum(self._reduce_to(g, a.shape, "same" if kind != "a_scalar" else "a_scalar"))
            b._accum(-self._reduce_to(g, b.shape, kind if kind != "a_scalar" else "same"))

        return Tensor._compose(data, (a, b), rule, "subtract")

    def __rsub__(self, other) -> "Tensor":
        return self._coerce_operand(other, "subtract").__sub__(self)

    def __mul__(self, other) -> "Tensor":
        b = self._coerce_operand(other, "multiply")
        kind = self._broadcast_kind(self.shape, b.shape, "multiply")
        data = _check_finite(self.data * b.data, "multiply")
        a = self

        def rule(g):
            a._accum(self._reduce_to(g * b.data, a.shape, "same" if kind != "a_scalar" else "a_scalar"))
            b._accum(self._reduce_to(g * a.data, b.shape, kind if kind != "a_scalar" else "same"))

        return Tensor._compose(data, (a, b), rule, "multiply")

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, scalar) -> "Tensor":
        if isinstance(scalar, Tensor):
            if scalar.size != 1:
                raise ShapeError("divide: only division by a scalar is supported")
            scalar = scalar.item()
        if not isinstance(scalar, (int, float, np.floating, np.integer)):
            raise ShapeError(f"divide: unsupported divisor type {type(scalar).__name__}")
        if scalar == 0:
            raise NumericError("divide by zero")
        c = float(scalar)
        data = _check_finite(self.data / c, "divide")
        a = self

        def rule(g):
            a._accum(g / c)

        return Tensor._compose(data, (a,), rule, "divide")

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- elementwise unary -------------------------------------------------------

    def exp(self) -> "Tensor":
        data = _check_finite(np.exp(self.data), "exp")
        a = self

        def rule(g):
            a._accum(g * data)

        return Tensor._compose(data, (a,), rule, "exp")

    def log(self) -> "Tensor":
        with np.errstate(divide="ignore", invalid="ignore"):
            data = np.log(self.data)
        _check_finite(data, "log")
        a = self

        def rule(g):
            a._accum(g / a.data)

        return Tensor._compose(data, (a,), rule, "log")

    def sigmoid(self) -> "Tensor":
        # exp of the negated magnitude avoids overflow on both tails
        x = self.data
        data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)
        _check_finite(data, "sigmoid")
        a = self

        def rule(g):
            a._accum(g * data * (1.0 - data))

        return Tensor._compose(data, (a,), rule, "sigmoid")

    def silu(self) -> "Tensor":
        x = self.data
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)
        data = _check_finite(x * sig, "silu")
        a = self

        def rule(g):
            a._accum(g * (sig * (1.0 + a.data * (1.0 - sig))))

        return Tensor._compose(data, (a,), rule, "silu")

    def square(self) -> "Tensor":
        data = _check_finite(self.data * self.data, "square")
        a = self

        def rule(g):
            a._accum(g * 2.0 * a.data)

        return Tensor._compose(data, (a,), rule, "square")

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        data = _check_finite(self.data.sum(axis=axis, keepdims=keepdims), "sum")
        a = self
        if axis is None:
            def rule(g):
                a._accum(np.broadcast_to(g, a.shape).copy() if not keepdims
                         else np.broadcast_to(g, a.shape).copy())
        else:
            def rule(g):
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(gg, a.shape).copy())

        return Tensor._compose(np.asarray(data), (a,), rule, "sum")

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        if count == 0:
            raise ShapeError("mean over an empty axis")
        data = _check_finite(self.data.mean(axis=axis, keepdims=keepdims), "mean")
        a = self
        if axis is None:
            def rule(g):
                a._accum(np.broadcast_to(g / count, a.shape).copy())
        else:
            def rule(g):
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(gg / count, a.shape).copy())

        return Tensor._compose(np.asarray(data), (a,), rule, "mean")

    # -- shape ops -------------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            data = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"reshape: cannot view {self.shape} as {shape}") from e
        a = self

        def rule(g):
            a._accum(g.reshape(a.shape))

        return Tensor._compose(np.ascontiguousarray(data), (a,), rule, "reshape")

    def transpose_last(self) -> "Tensor":
        if self.ndim < 2:
            raise ShapeError(f"transpose_last: needs >= 2 axes, got shape {self.shape}")
        data = np.ascontiguousarray(self.data.swapaxes(-1, -2))
        a = self

        def rule(g):
            a._accum(g.swapaxes(-1, -2))

        return Tensor._compose(data, (a,), rule, "transpose_last")

    def __getitem__(self, key) -> "Tensor":
        if not _is_basic_index(key):
            raise ShapeError("slice: only basic indexing (ints, slices, Ellipsis) is supported")
        data = np.ascontiguousarray(self.data[key])
        a = self

        def rule(g):
            buf = np.zeros_like(a.data)
            buf[key] += g
            a._accum(buf)

        return Tensor._compose(data, (a,), rule, "slice")


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None
               for p in parts)


# -- multi-operand primitives -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: stacked-LHS x 2-D weight, or batched with equal leading dims."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul: both operands must be tensors")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have >= 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    if b.ndim == 2:
        mode = "weight"
    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        mode = "batched"
    else:
        raise ShapeError(f"matmul: leading dims of {a.shape} and {b.shape} do not match")
    data = _check_finite(a.data @ b.data, "matmul")

    def rule(g):
        if mode == "weight":
            a._accum(g @ b.data.swapaxes(-1, -2))
            k, m = b.shape
            b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, m))
        else:
            a._accum(g @ b.data.swapaxes(-1, -2))
            b._accum(a.data.swapaxes(-1, -2) @ g)

    return Tensor._compose(data, (a, b), rule, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; operands must agree on every other extent."""
    if not tensors:
        raise ShapeError("concat: empty operand list")
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim or t.dtype != first.dtype:
            raise ShapeError(f"concat: mismatched operands {first.shape} vs {t.shape}")
        for ax in range(first.ndim):
            if ax != (axis % first.ndim) and t.shape[ax] != first.shape[ax]:
                raise ShapeError(f"concat: shapes {first.shape} and {t.shape} differ off-axis")
    data = _check_finite(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accum(g[tuple(idx)])

    return Tensor._compose(data, tuple(tensors), rule, "concat")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction.

    ``mask`` (bool, same shape, True = keep) assigns excluded entries exactly
    zero probability; this is how attention realizes its -inf score masking
    while keeping every stored value finite.
    """
    _check_finite(x.data, "softmax input")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != input shape {x.shape}")
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax: a row is fully masked")
        z = np.where(mask, x.data, -np.inf)
        zmax = z.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, z - zmax, 0.0)), 0.0)
    else:
        zmax = x.data.max(axis=-1, keepdims=True)
        e = np.exp(x.data - zmax)
    data = e / e.sum(axis=-1, keepdims=True)
    _check_finite(data, "softmax")

    def rule(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        gx = data * (g - inner)
        if mask is not None:
            gx = np.where(mask, gx, 0.0)
        x._accum(gx)

    return Tensor._compose(data, (x,), rule, "softmax")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ids of any shape into a (vocab, dim) table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {table.shape[0]} rows")
    data = np.ascontiguousarray(table.data[ids])

    def rule(g):
        if not table._needs_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return Tensor._compose(data, (table,), rule, "embedding")


def cross_entropy(logits: Tensor, targets, ignore_label: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose target != ignore_label."""
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError(f"cross_entropy: targets must be integers, got {targets.dtype}")
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} incompatible with targets {targets.shape}")
    valid = targets != ignore_label
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ShapeError("cross_entropy: every target is the ignore label")
    if targets[valid].min() < 0 or targets[valid].max() >= logits.shape[1]:
        raise ShapeError(f"cross_entropy: target id outside vocab of {logits.shape[1]}")

    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    rows = np.arange(z.shape[0])
    picked = np.where(valid, z[rows, np.where(valid, targets, 0)], 0.0)
    losses = np.where(valid, lse - picked, 0.0)
    data = np.asarray(losses.sum() / n_valid, dtype=z.dtype)
    _check_finite(data, "cross_entropy")

    def rule(g):
        probs = np.exp(z - zmax)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[rows[valid], targets[valid]] -= 1.0
        probs[~valid] = 0.0
        logits._accum(g * probs / n_valid)

    return Tensor._compose(data, (logits,), rule, "cross_entropy")


# -- tape and backward ------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the primitive applications behind a root.

    A node appears after all of its operands, so replaying ``nodes`` in
    reverse visits each exactly once with its output gradient complete.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into every reachable grad-requiring tensor."""
    if root.size != 1:
        raise AutodiffError(f"backward: root must be scalar, got shape {root.shape}")
    if root._backward_ran:
        raise AutodiffError("backward: already ran for this root; rebuild the graph to rerun")
    if not root._needs_grad:
        raise AutodiffError("backward: root does not depend on any grad-requiring tensor")
    tape = Tape.trace(root)
    root._accum(np.ones_like(root.data))
    for node in reversed(tape.nodes):
        if node._backward_rule is None or node.grad is None:
            continue
        node._backward_rule(node.grad)
    root._backward_ran = True


Tensor.backward = backward  # method sugar: y.backward()


# -- finite-difference oracle -------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per element is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8). ``f`` must be deterministic and return a scalar tensor.
    """
    if eps is None:
        eps = 1e-5 if x.dtype == np.float64 else 3e-3
    if eps <= 0:
        raise AutodiffError("grad_check: eps must be positive")

    x0 = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    out = f(x0)
    if not isinstance(out, Tensor) or out.size != 1:
        raise AutodiffError("grad_check: f must return a scalar tensor")
    backward(out)
    analytic = np.zeros_like(x0.data) if x0.grad is None else x0.grad.copy()

    numeric = np.zeros_like(x0.data)
    flat = x0.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(x0.data.copy(), dtype=x.dtype)).item()
            flat[i] = orig - eps
            lo = f(Tensor(x0.data.copy(), dtype=x.dtype)).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
