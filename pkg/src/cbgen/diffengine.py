"""Reverse-mode differentiation over small dense networks.

Every primitive operation records its inputs on a computation graph, and
every vector-Jacobian product is itself expressed in terms of the same
primitives.  Backpropagating with ``create_graph=True`` therefore yields
gradients that are themselves differentiable nodes, which is how the mixed
second-order derivative d/dtheta of an input gradient is obtained
("double backprop").

Only what small dense energy networks need is implemented: 2-D matmul,
broadcasting elementwise arithmetic, reductions, LogSumExp along the last
axis, sigmoid, exp, and embedding-row gather/scatter.  Everything is
float64.  A module-level checked mode validates finiteness after each
primitive and names the offending operation on failure.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParameterSet",
    "DiffEngineError",
    "NonFiniteValueError",
    "NonSmoothTraceError",
    "set_checked",
    "is_checked",
    "checked",
    "constant",
    "grad",
    "grad_input",
    "grad_params",
    "grad_params_of_input_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "tsum",
    "exp",
    "sigmoid",
    "silu",
    "relu",
    "logsumexp",
    "gather_rows",
    "scatter_rows",
    "square",
    "dot",
]


class DiffEngineError(RuntimeError):
    """Base class for engine failures."""


class NonFiniteValueError(DiffEngineError):
    """A primitive produced NaN/Inf while checked mode was on."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by primitive '{op}'")
        self.op = op


class NonSmoothTraceError(DiffEngineError):
    """A gradient trace that must stay differentiable crossed a
    non-smooth primitive."""

    def __init__(self, op: str):
        super().__init__(
            f"primitive '{op}' is not smooth; its gradient trace cannot be "
            f"differentiated again (use a smooth activation instead)"
        )
        self.op = op


# Primitives whose vector-Jacobian product is not differentiable.  Crossing
# one of these while create_graph=True is rejected.
_NON_SMOOTH_OPS = frozenset({"relu"})

# Mode flags are per-thread (with a process default for checked mode) so
# concurrent evaluations never observe each other's state.
_DEFAULT_CHECKED = True
_tls = threading.local()


def set_checked(flag: bool) -> None:
    """Set the process-wide default for per-primitive finiteness validation."""
    global _DEFAULT_CHECKED
    _DEFAULT_CHECKED = bool(flag)


def is_checked() -> bool:
    return getattr(_tls, "checked", _DEFAULT_CHECKED)


@contextlib.contextmanager
def checked(flag: bool):
    """Temporarily set checked mode for the current thread."""
    had = hasattr(_tls, "checked")
    old = getattr(_tls, "checked", None)
    _tls.checked = bool(flag)
    try:
        yield
    finally:
        if had:
            _tls.checked = old
        else:
            del _tls.checked


def _is_recording() -> bool:
    return getattr(_tls, "recording", True)


@contextlib.contextmanager
def _no_record():
    old = getattr(_tls, "recording", True)
    _tls.recording = False
    try:
        yield
    finally:
        _tls.recording = old


class Tensor:
    """A float64 array plus its position in the computation graph.

    Leaves are created directly; interior nodes are created by primitives
    and keep (parent, vjp) back references.  ``value`` of a leaf may be
    updated in place (this is how the optimizer steps parameters); interior
    node values are never mutated.
    """

    __slots__ = ("value", "requires_grad", "op", "_backrefs")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        op: str | None = None,
        backrefs: tuple = (),
    ):
        v = np.asarray(value, dtype=np.float64)
        if is_checked() and not np.all(np.isfinite(v)):
            raise NonFiniteValueError(op or "leaf")
        self.value = v
        self.requires_grad = requires_grad
        self.op = op
        self._backrefs = backrefs

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.value.shape}, rg={self.requires_grad})"

    # Arithmetic sugar so model code reads plainly.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def constant(value) -> Tensor:
    """Wrap an array/scalar as a non-differentiable leaf."""
    return Tensor(value, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(value: np.ndarray, op: str, backrefs: Sequence[tuple]) -> Tensor:
    """Create an interior node; degrades to a leaf when recording is off or
    no parent needs gradients."""
    if _is_recording() and any(p.requires_grad for p, _ in backrefs):
        return Tensor(value, requires_grad=True, op=op, backrefs=tuple(backrefs))
    return Tensor(value, requires_grad=False, op=op)


# ---------------------------------------------------------------------------
# Primitives.  Each vjp closure maps the output cotangent (a Tensor) to the
# parent's cotangent contribution, built only from primitives so that the
# backward pass itself stays differentiable.
# ---------------------------------------------------------------------------


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast cotangent back to ``shape``."""
    if g.value.shape == shape:
        return g
    extra = g.value.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, s) in enumerate(zip(g.value.shape, shape)) if s == 1 and gs != 1
    )
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value + b.value,
        "add",
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value - b.value,
        "sub",
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(neg(g), b.value.shape)),
        ),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value * b.value,
        "mul",
        (
            (a, lambda g: _unbroadcast(mul(g, b), a.value.shape)),
            (b, lambda g: _unbroadcast(mul(g, a), b.value.shape)),
        ),
    )


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _node(-a.value, "neg", ((a, lambda g: neg(g)),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}"
        )
    return _node(
        a.value @ b.value,
        "matmul",
        (
            (a, lambda g: matmul(g, transpose(b))),
            (b, lambda g: matmul(transpose(a), g)),
        ),
    )


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    if a.value.ndim != 2:
        raise ValueError(f"transpose expects a 2-D operand, got {a.value.shape}")
    return _node(a.value.T, "transpose", ((a, lambda g: transpose(g)),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _wrap(a)
    old = a.value.shape
    return _node(
        a.value.reshape(shape), "reshape", ((a, lambda g: reshape(g, old)),)
    )


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    a = _wrap(a)
    old = a.value.shape
    return _node(
        np.broadcast_to(a.value, shape),
        "broadcast",
        ((a, lambda g: _unbroadcast(g, old)),),
    )


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (None = all)."""
    a = _wrap(a)
    in_shape = a.value.shape

    if axis is None:
        axes = tuple(range(a.value.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.value.ndim,)
    else:
        axes = tuple(ax % a.value.ndim for ax in axis)

    def vjp(g: Tensor) -> Tensor:
        if not keepdims:
            kept = list(in_shape)
            for ax in axes:
                kept[ax] = 1
            g = reshape(g, tuple(kept))
        return broadcast_to(g, in_shape)

    return _node(a.value.sum(axis=axes or None, keepdims=keepdims), "sum", ((a, vjp),))


def exp(a: Tensor) -> Tensor:
    # The vjp re-derives exp(a) rather than closing over this node: a
    # self-referential closure would put every graph behind the cyclic GC.
    a = _wrap(a)
    return _node(np.exp(a.value), "exp", ((a, lambda g: mul(g, exp(a))),))


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    val = np.empty_like(a.value, dtype=np.float64)
    pos = a.value >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    ev = np.exp(a.value[~pos])
    val[~pos] = ev / (1.0 + ev)

    def vjp(g: Tensor) -> Tensor:
        s = sigmoid(a)
        return mul(g, mul(s, sub(constant(1.0), s)))

    return _node(val, "sigmoid", ((a, vjp),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x): the smooth activation used in energy trunks."""
    a = _wrap(a)
    return mul(a, sigmoid(a))


def relu(a: Tensor) -> Tensor:
    """Piecewise-linear rectifier.  Usable for first-order work only; a
    gradient trace through it cannot be differentiated again."""
    a = _wrap(a)
    mask = (a.value > 0).astype(np.float64)
    return _node(a.value * mask, "relu", ((a, lambda g: mul(g, constant(mask))),))


def logsumexp(a: Tensor) -> Tensor:
    """LogSumExp along the last axis (stable; smooth)."""
    a = _wrap(a)
    m = np.max(a.value, axis=-1, keepdims=True)
    val = np.squeeze(m, axis=-1) + np.log(np.sum(np.exp(a.value - m), axis=-1))

    def vjp(g: Tensor) -> Tensor:
        # Cotangent is g (lifted) times softmax(a); exp(a - lse(a)) is the
        # stable softmax and keeps the trace differentiable.
        lse = logsumexp(a)
        lifted = reshape(lse, lse.value.shape + (1,))
        soft = exp(sub(a, broadcast_to(lifted, a.value.shape)))
        glift = broadcast_to(reshape(g, g.value.shape + (1,)), a.value.shape)
        return mul(glift, soft)

    return _node(val, "logsumexp", ((a, vjp),))


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D table by integer index; out[i] = table[idx[i]]."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)
    nrows = table.value.shape[0]
    if idx.ndim != 1 or table.value.ndim != 2:
        raise ValueError("gather_rows expects a 2-D table and 1-D indices")
    if idx.size and (idx.min() < 0 or idx.max() >= nrows):
        raise IndexError(f"gather_rows index out of range [0, {nrows})")
    return _node(
        table.value[idx],
        "gather_rows",
        ((table, lambda g: scatter_rows(g, idx, nrows)),),
    )


def scatter_rows(src: Tensor, idx: np.ndarray, nrows: int) -> Tensor:
    """Adjoint of gather_rows: sum rows of src into a (nrows, H) table."""
    src = _wrap(src)
    idx = np.asarray(idx, dtype=np.int64)
    val = np.zeros((nrows, src.value.shape[1]), dtype=np.float64)
    np.add.at(val, idx, src.value)
    return _node(val, "scatter_rows", ((src, lambda g: gather_rows(g, idx)),))


def square(a: Tensor) -> Tensor:
    a = _wrap(a)
    return mul(a, a)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order over nodes that require gradients."""
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
        for parent, _ in node._backrefs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
) -> tuple[Tensor, ...]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the returned gradients are graph nodes and can
    be differentiated again; the pass refuses to cross non-smooth primitives
    in that case.  Tensors in ``wrt`` that the output does not depend on get
    zero gradients.
    """
    if output.value.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.value.shape}")
    for w in wrt:
        if not isinstance(w, Tensor):
            raise TypeError("wrt entries must be Tensors")

    wrt_ids = {id(w) for w in wrt}
    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = Tensor(np.ones_like(output.value))
        ctx = contextlib.nullcontext() if create_graph else _no_record()
        with ctx:
            for node in reversed(_toposort(output)):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in wrt_ids:
                    grads[id(node)] = g
                if create_graph and node.op in _NON_SMOOTH_OPS:
                    raise NonSmoothTraceError(node.op)
                for parent, vjp in node._backrefs:
                    if not parent.requires_grad:
                        continue
                    contrib = vjp(g)
                    prev = grads.get(id(parent))
                    grads[id(parent)] = contrib if prev is None else add(prev, contrib)

    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = Tensor(np.zeros_like(w.value))
        out.append(g)
    return tuple(out)


# ---------------------------------------------------------------------------
# Parameter collections
# ---------------------------------------------------------------------------


class ParameterSet:
    """Named, shape-frozen collection of parameter tensors."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        names = list(arrays)
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self._tensors: dict[str, Tensor] = {
            name: Tensor(np.array(arr, dtype=np.float64), requires_grad=True)
            for name, arr in arrays.items()
        }

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    @property
    def total_count(self) -> int:
        return sum(t.value.size for t in self._tensors.values())

    def values(self) -> dict[str, np.ndarray]:
        """Copies of the current parameter arrays."""
        return {name: t.value.copy() for name, t in self._tensors.items()}

    def assign(self, name: str, value: np.ndarray) -> None:
        """In-place update; shape is immutable."""
        t = self._tensors[name]
        v = np.asarray(value, dtype=np.float64)
        if v.shape != t.value.shape:
            raise ValueError(
                f"shape of '{name}' is frozen at {t.value.shape}, got {v.shape}"
            )
        if is_checked() and not np.all(np.isfinite(v)):
            raise NonFiniteValueError(f"assign({name})")
        t.value[...] = v

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, v in values.items():
            self.assign(name, v)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.values())


# ---------------------------------------------------------------------------
# Functional entry points
# ---------------------------------------------------------------------------


def grad_input(f: Callable[[Tensor], Tensor], v: np.ndarray) -> np.ndarray:
    """Gradient of scalar f with respect to its array input."""
    vt = Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
    out = f(vt)
    (g,) = grad(out, [vt])
    return g.value


def grad_params(
    f: Callable[[], Tensor], params: ParameterSet
) -> dict[str, np.ndarray]:
    """Gradient of scalar f() with respect to every parameter array."""
    out = f()
    gs = grad(out, params.tensors())
    return {name: g.value for name, g in zip(params.names(), gs)}


def grad_params_of_input_grad(
    energy: Callable[[Tensor], Tensor],
    loss_of_grad: Callable[[Tensor], Tensor],
    params: ParameterSet,
    v: np.ndarray,
) -> dict[str, np.ndarray]:
    """d/dparams of loss(grad_v energy(v)).

    ``energy`` maps the input tensor to a scalar built on ``params``;
    ``loss_of_grad`` maps the (differentiable) input gradient to a scalar.
    The inner gradient is kept on the graph, so the result is the exact
    mixed second-order derivative.
    """
    vt = Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
    e = energy(vt)
    (gv,) = grad(e, [vt], create_graph=True)
    loss = loss_of_grad(gv)
    gs = grad(loss, params.tensors())
    return {name: g.value for name, g in zip(params.names(), gs)}
