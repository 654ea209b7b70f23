"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-based engine: operations record onto the thread-local active
``Tape`` and ``Tape.backward`` replays the records in reverse creation
order (creation order is already a topological order, since an operation
can only consume values that exist).

Design constraints kept deliberately strict so every backward rule stays
auditable:

* everything is float64,
* shapes must match exactly; the only broadcast allowed is scalar-tensor,
* any operation producing NaN/Inf raises immediately instead of letting it
  propagate,
* ``stop_grad`` is a first-class primitive: its result is visible in the
  forward pass but contributes exactly zero gradient to every ancestor.
  The straight-through estimators are built out of it.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit


class AutodiffError(RuntimeError):
    """Raised on shape mismatches, non-finite values, or tape misuse."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape():
    """The innermost tape opened on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of one forward evaluation.

    Used as a context manager; operations executed inside record their
    backward rules here. A tape is single-use: calling ``backward`` twice
    raises. Tapes are confined to the thread that opened them; independent
    tapes on different threads do not share state.
    """

    def __init__(self):
        self.nodes: list[Value] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise AutodiffError("tape context stack corrupted")
        return False

    def backward(self, loss: "Value") -> None:
        """Accumulate d(loss)/d(leaf) into every reachable non-stop-grad leaf.

        Gradient buffers of every value this pass touches are reset first,
        so each backward call produces the gradients of exactly this loss.
        """
        if loss.data.size != 1:
            raise AutodiffError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        if self._used:
            raise AutodiffError("tape already consumed by a previous backward call")
        self._used = True

        for node in self.nodes:
            node.grad = None
            for parent in node._parents:
                parent.grad = None
        loss.grad = np.ones_like(loss.data)

        for node in reversed(self.nodes):
            if node._vjp is None or node.grad is None:
                continue
            parent_grads = node._vjp(node.grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if parent.stop_grad or pgrad is None:
                    continue
                if not np.all(np.isfinite(pgrad)):
                    raise AutodiffError(
                        f"non-finite gradient produced by backward of '{node._op}'"
                    )
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pgrad


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


class Value:
    """Node of the differentiation graph holding a float64 array.

    ``stop_grad=True`` marks constants: backward accumulation through such
    a node contributes exactly zero to all ancestors.
    """

    __slots__ = ("data", "grad", "stop_grad", "_parents", "_vjp", "_tape", "_op")

    def __init__(self, data, stop_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.stop_grad = bool(stop_grad)
        self._parents: tuple = ()
        self._vjp = None
        self._tape: Tape | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self._op}, stop_grad={self.stop_grad})"

    def backward(self) -> None:
        if self._tape is None:
            raise AutodiffError("value was not recorded on a tape; open a Tape first")
        self._tape.backward(self)

    # arithmetic sugar; the named functions below do the real work
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)


def constant(x) -> Value:
    """Wrap an array as a zero-gradient graph constant."""
    return Value(x, stop_grad=True)


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


def _record(op: str, out_data: np.ndarray, parents: tuple, vjp) -> Value:
    if not np.all(np.isfinite(out_data)):
        raise AutodiffError(f"operation '{op}' produced non-finite values")
    tape = active_tape()
    if tape is None:
        out = Value(out_data, stop_grad=True)
        out._op = op
        return out
    out = Value(out_data)
    out._parents = parents
    out._vjp = vjp
    out._tape = tape
    out._op = op
    tape.nodes.append(out)
    return out


def _is_scalar(arr: np.ndarray) -> bool:
    return arr.size == 1


def _check_elementwise(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise AutodiffError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient onto a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_elementwise("add", a.data, b.data)
    out = a.data + b.data

    def vjp(g):
        return (_reduce_to(g, a.shape), _reduce_to(g, b.shape))

    return _record("add", out, (a, b), vjp)


def sub(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_elementwise("sub", a.data, b.data)
    out = a.data - b.data

    def vjp(g):
        return (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))

    return _record("sub", out, (a, b), vjp)


def mul(a, b) -> Value:
    """Elementwise product; scalar-tensor is the only broadcast allowed."""
    a, b = _as_value(a), _as_value(b)
    _check_elementwise("mul", a.data, b.data)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return (_reduce_to(g * b_data, a.shape), _reduce_to(g * a_data, b.shape))

    return _record("mul", out, (a, b), vjp)


def matmul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise AutodiffError("matmul: both operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: inner dimensions differ {a.shape} vs {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return (g @ b_data.T, a_data.T @ g)

    return _record("matmul", out, (a, b), vjp)


def relu_plus(x) -> Value:
    """(x)+ = max(x, 0); subgradient 0 at the kink."""
    x = _as_value(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _record("relu_plus", out, (x,), vjp)


def log(x) -> Value:
    x = _as_value(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    x_data = x.data

    def vjp(g):
        return (g / x_data,)

    return _record("log", out, (x,), vjp)


def exp(x) -> Value:
    x = _as_value(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _record("exp", out, (x,), vjp)


def softplus(x) -> Value:
    """log(1 + e^x), computed stably; derivative is the logistic sigmoid."""
    x = _as_value(x)
    out = np.logaddexp(0.0, x.data)
    x_data = x.data

    def vjp(g):
        return (g * expit(x_data),)

    return _record("softplus", out, (x,), vjp)


def sum_all(x) -> Value:
    x = _as_value(x)
    out = np.asarray(np.sum(x.data))
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (x,), vjp)


def mean_all(x) -> Value:
    x = _as_value(x)
    out = np.asarray(np.mean(x.data))
    shape, n = x.shape, x.size

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record("mean", out, (x,), vjp)


def gather_row(x, index: int) -> Value:
    """Select row `index` of a 2-D value."""
    x = _as_value(x)
    if x.data.ndim != 2:
        raise AutodiffError("gather_row: input must be 2-D")
    if not 0 <= index < x.shape[0]:
        raise AutodiffError(f"gather_row: index {index} out of range for {x.shape}")
    out = x.data[index].copy()
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record("gather_row", out, (x,), vjp)


def add_bias(mat, vec) -> Value:
    """(M, N) matrix plus a length-N row vector."""
    mat, vec = _as_value(mat), _as_value(vec)
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.shape[1] != vec.shape[0]:
        raise AutodiffError(f"add_bias: incompatible shapes {mat.shape}, {vec.shape}")
    out = mat.data + vec.data

    def vjp(g):
        return (g, g.sum(axis=0))

    return _record("add_bias", out, (mat, vec), vjp)


def reshape(x, shape) -> Value:
    x = _as_value(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)
    in_shape = x.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _record("reshape", out, (x,), vjp)


def _rows(x: np.ndarray) -> np.ndarray:
    """View a 1-D or 2-D array as (rows, N)."""
    return x.reshape(1, -1) if x.ndim == 1 else x


def row_max_keep(x) -> Value:
    """Each row replaced by its maximum (shape preserved).

    Backward routes each row's gradient sum to the first maximal entry,
    matching the lowest-index argmax convention used everywhere else.
    """
    x = _as_value(x)
    data = _rows(x.data)
    out = np.broadcast_to(data.max(axis=1, keepdims=True), data.shape)
    out = out.reshape(x.shape).copy()
    idx = np.argmax(data, axis=1)
    shape = x.shape

    def vjp(g):
        g2 = _rows(g)
        full = np.zeros_like(g2)
        full[np.arange(g2.shape[0]), idx] = g2.sum(axis=1)
        return (full.reshape(shape),)

    return _record("row_max_keep", out, (x,), vjp)


def row_sum_keep(x) -> Value:
    """Each row replaced by its sum (shape preserved)."""
    x = _as_value(x)
    data = _rows(x.data)
    out = np.broadcast_to(data.sum(axis=1, keepdims=True), data.shape)
    out = out.reshape(x.shape).copy()
    shape = x.shape

    def vjp(g):
        g2 = _rows(g)
        full = np.broadcast_to(g2.sum(axis=1, keepdims=True), g2.shape)
        return (full.reshape(shape).copy(),)

    return _record("row_sum_keep", out, (x,), vjp)


def row_logsumexp_keep(x) -> Value:
    """Each row replaced by log-sum-exp of the row, max-shifted for stability."""
    x = _as_value(x)
    data = _rows(x.data)
    m = data.max(axis=1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(data - m), axis=1, keepdims=True))
    out = np.broadcast_to(lse, data.shape).reshape(x.shape).copy()
    soft = np.exp(data - lse)
    shape = x.shape

    def vjp(g):
        g2 = _rows(g)
        full = g2.sum(axis=1, keepdims=True) * soft
        return (full.reshape(shape),)

    return _record("row_logsumexp_keep", out, (x,), vjp)


def softmax_tau(x, tau: float) -> Value:
    """Temperature softmax along the last axis, max-shifted before exponentiation.

    Rows land in the probability simplex; the backward rule is the exact
    softmax Jacobian scaled by 1/tau.
    """
    if tau <= 0.0:
        raise AutodiffError(f"softmax_tau: tau must be positive, got {tau}")
    x = _as_value(x)
    data = _rows(x.data)
    z = (data - data.max(axis=1, keepdims=True)) / tau
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = p.reshape(x.shape)
    shape = x.shape

    def vjp(g):
        g2 = _rows(g)
        inner = (g2 * p).sum(axis=1, keepdims=True)
        return (((g2 - inner) * p / tau).reshape(shape),)

    return _record("softmax_tau", out, (x,), vjp)


def repeat_rows(x, k: int) -> Value:
    """Repeat each row k times consecutively: (M, N) -> (M*k, N)."""
    x = _as_value(x)
    if k < 1:
        raise AutodiffError("repeat_rows: k must be >= 1")
    data = _rows(x.data)
    out = np.repeat(data, k, axis=0)
    m, n = data.shape
    shape = x.shape

    def vjp(g):
        return (g.reshape(m, k, n).sum(axis=1).reshape(shape),)

    return _record("repeat_rows", out, (x,), vjp)


def group_mean_rows(x, k: int) -> Value:
    """Average consecutive groups of k rows: (M*k, N) -> (M, N)."""
    x = _as_value(x)
    data = _rows(x.data)
    if data.shape[0] % k != 0:
        raise AutodiffError(
            f"group_mean_rows: {data.shape[0]} rows not divisible by k={k}"
        )
    m = data.shape[0] // k
    out = data.reshape(m, k, data.shape[1]).mean(axis=1)
    shape = x.shape

    def vjp(g):
        return (np.repeat(g / k, k, axis=0).reshape(shape),)

    return _record("group_mean_rows", out, (x,), vjp)


def stop_grad(x) -> Value:
    """Identity in the forward pass, exactly zero gradient in the backward pass."""
    x = _as_value(x)
    out = Value(x.data, stop_grad=True)
    out._op = "stop_grad"
    return out


def straight_through(hard, surrogate: Value) -> Value:
    """hard - stop_grad(surrogate) + surrogate, as a single exact primitive.

    Forward value is bit-for-bit the `hard` array; the backward Jacobian is
    that of `surrogate`.
    """
    hard = _as_value(hard)
    surrogate = _as_value(surrogate)
    if hard.shape != surrogate.shape:
        raise AutodiffError(
            f"straight_through: shape mismatch {hard.shape} vs {surrogate.shape}"
        )
    out = hard.data.copy()

    def vjp(g):
        return (g,)

    return _record("straight_through", out, (surrogate,), vjp)
