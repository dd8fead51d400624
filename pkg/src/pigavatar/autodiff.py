"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

Every differentiable operation appends a node to the active :class:`Tape`
(only when at least one input requires a gradient). ``backward`` walks the
tape in reverse creation order, which is a valid reverse topological order
because parents always exist before their children.

Heavy kernels (grid interpolation, rasterisation, SSIM) register themselves
through :func:`record` with a hand-written backward rule.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numba
import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered list of recorded nodes ``(output, parents, backward_fn)``."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: "Tensor", parents, backward_fn) -> None:
        out._tape = self
        out._is_leaf = False
        self.nodes.append((out, tuple(parents), backward_fn))

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        self.reset()
        return False

    def backward(self, root: "Tensor") -> None:
        if root.data.size != 1:
            raise ShapeError(f"backward: root must be scalar-shaped, got {root.shape}")
        pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        if root._is_leaf:
            if root.requires_grad:
                _accumulate_leaf(root, pending[id(root)])
            self.reset()
            return
        for out, parents, fn in reversed(self.nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            grads = fn(g)
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._is_leaf:
                    _accumulate_leaf(p, pg)
                else:
                    key = id(p)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
        self.reset()


def _accumulate_leaf(p: "Tensor", g: np.ndarray) -> None:
    g = np.asarray(g, dtype=p.data.dtype).reshape(p.data.shape)
    p.grad = g.copy() if p.grad is None else p.grad + g


_DEFAULT_TAPE = Tape()
_TAPE_STACK: list[Tape] = []
_GRAD_ENABLED = [True]


def active_tape() -> Tape:
    return _TAPE_STACK[-1] if _TAPE_STACK else _DEFAULT_TAPE


@contextlib.contextmanager
def no_grad():
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None
        self._is_leaf = True

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def record(kind: str, out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and put it on the tape if needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    out = Tensor(out_data, dtype=out_data.dtype if out_data.dtype.kind == "f" else None)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        active_tape().record(out, parents, backward_fn)
    return out


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``root`` depends on."""
    tape = root._tape if root._tape is not None else active_tape()
    tape.backward(root)


def grad(root: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. ``leaves`` (zeros when unconnected)."""
    for leaf in leaves:
        leaf.grad = None
    backward(root)
    out = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    for leaf in leaves:
        leaf.grad = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(kind, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                             _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                             _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", a.data @ b.data, (a, b), bw)


# -- elementwise unary -----------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sin(x: Tensor) -> Tensor:
    return record("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return record("cos", np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return record("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clip(x: Tensor, lo=None, hi=None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x.data >= lo
    if hi is not None:
        keep &= x.data <= hi
    return record("clip", out, (x,), lambda g: (g * keep,))


def where(cond, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return record("where", out, (a, b),
                  lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                             _unbroadcast(np.where(cond, 0, g), b.shape)))


# -- reductions and reshaping ---------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return record("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return record("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record("slice", np.array(out), (x,), bw)


@numba.njit(cache=True)
def _scatter_rows(out, idx, rows):
    n = out.shape[0]
    for i in range(idx.shape[0]):
        r = idx[i]
        if r < 0:
            r += n
        for j in range(rows.shape[1]):
            out[r, j] += rows[i, j]


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices)
    out = np.take(x.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        if axis % x.ndim == 0 and full.size:
            _scatter_rows(full.reshape(full.shape[0], -1), indices.ravel().astype(np.int64),
                          np.ascontiguousarray(g, dtype=full.dtype).reshape(indices.size, -1))
            return (full,)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return record("take", out, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[y.shape for y in xs]}")
    out = np.concatenate([x.data for x in xs], axis=ax)
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return record("concat", out, xs, lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)
    n = len(xs)
    return record("stack", out, xs,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# -- vector ops -------------------------------------------------------------

def normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit-norm along ``axis``; zero-norm input raises rather than renormalising."""
    norm = np.linalg.norm(x.data, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("normalize: zero-norm input")
    y = x.data / norm

    def bw(g):
        # projection onto the tangent space of the unit sphere
        return ((g - y * np.sum(y * g, axis=axis, keepdims=True)) / norm,)

    return record("normalize", y, (x,), bw)


def cross(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross: need trailing dim 3, got {a.shape} and {b.shape}")
    out = np.cross(a.data, b.data)
    return record("cross", out, (a, b),
                  lambda g: (_unbroadcast(np.cross(b.data, g), a.shape),
                             _unbroadcast(np.cross(g, a.data), b.shape)))


def dot(a: Tensor, b: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sum_(mul(a, b), axis=axis, keepdims=keepdims)


def _einsum_opt(ops) -> bool:
    # contraction paths (and BLAS) only pay off for larger operands
    return len(ops) > 2 or max(o.data.size for o in ops) > 4096


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum without repeated indices inside one operand."""
    ops = [_as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ShapeError(f"einsum: {subscripts} expects {len(in_subs)} operands, got {len(ops)}")
    for s, o in zip(in_subs, ops):
        if len(s) != o.ndim or len(set(s)) != len(s):
            raise ShapeError(f"einsum: subscript '{s}' does not fit shape {o.shape}")
    try:
        out = np.einsum(subscripts, *[o.data for o in ops], optimize=_einsum_opt(ops))
    except ValueError as e:
        raise ShapeError(f"einsum: {e} for shapes {[o.shape for o in ops]}") from None

    def bw(g):
        grads = []
        for i, (s, o) in enumerate(zip(in_subs, ops)):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [(in_subs[j], ops[j].data) for j in range(len(ops)) if j != i]
            avail = set(out_sub).union(*[set(t) for t, _ in others]) if others else set(out_sub)
            keep = "".join(c for c in s if c in avail)
            spec = ",".join([out_sub] + [t for t, _ in others]) + "->" + keep
            r = np.einsum(spec, g, *[d for _, d in others], optimize=_einsum_opt(ops))
            if keep != s:
                r = r.reshape([o.shape[k] if c in keep else 1 for k, c in enumerate(s)])
                r = np.broadcast_to(r, o.shape)
            grads.append(r)
        return tuple(grads)

    return record("einsum", np.asarray(out), ops, bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


OP_KINDS = {
    "matmul": matmul, "add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid,
    "exp": exp, "log": log, "sin": sin, "cos": cos, "sum": sum_,
    "normalize": normalize, "concat": concat, "slice": getitem,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch by op-kind name (the tape records the node)."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op-kind {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **kwargs)
    if kind == "slice":
        return fn(inputs[0], kwargs["index"])
    return fn(*inputs, **kwargs)
