"""Minimal dense-tensor substrate with reverse-mode differentiation.

Every learnable operation in the package is expressed through the small
primitive set below, recorded on a :class:`Tape` and differentiated by a
single reverse sweep. Values are 64-bit floats, row-major, with the batch
as the leading dimension.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError


class Tensor:
    """A node on a tape: a value plus the local backward rule."""

    __slots__ = ("value", "tape", "parents", "backward_fn", "grad")

    def __init__(self, value, tape, parents=(), backward_fn=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    # Convenience overloads; plain arrays/scalars become constants.
    def __add__(self, other):
        return add(self, _wrap(other, self.tape))

    def __radd__(self, other):
        return add(_wrap(other, self.tape), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.tape))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.tape))

    def __rmul__(self, other):
        return mul(_wrap(other, self.tape), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.tape))

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.tape))


class Tape:
    """Ordered record of primitive ops; append order is topological."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def leaf(self, value) -> Tensor:
        t = Tensor(np.asarray(value, dtype=np.float64), self)
        self.nodes.append(t)
        self.leaves.append(t)
        return t

    def constant(self, value) -> Tensor:
        """A leaf whose gradient is computed but never consumed."""
        t = Tensor(np.asarray(value, dtype=np.float64), self)
        self.nodes.append(t)
        return t

    def _record(self, value, parents, backward_fn) -> Tensor:
        t = Tensor(value, self, parents, backward_fn)
        self.nodes.append(t)
        return t

    def backward(self, output: Tensor):
        """Reverse sweep from a scalar output; fills ``.grad`` on every node."""
        if output.tape is not self:
            raise ShapeError("output does not belong to this tape")
        if output.value.shape != ():
            raise ShapeError(f"backward requires a scalar output, got shape {output.value.shape}")
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def gradients(self, output: Tensor) -> dict:
        """Run backward and return {leaf: gradient array}."""
        self.backward(output)
        return {leaf: leaf.grad for leaf in self.leaves}


def _wrap(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ShapeError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands; 1-D operands act as row/column vectors."""
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 1-D or 2-D operands, got {av.ndim}-D and {bv.ndim}-D")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {av.shape} vs {bv.shape}")
    out = av @ bv

    def backward(g):
        if av.ndim == 2 and bv.ndim == 2:
            a.grad += g @ bv.T
            b.grad += av.T @ g
        elif av.ndim == 1 and bv.ndim == 2:
            a.grad += bv @ g
            b.grad += np.outer(av, g)
        elif av.ndim == 2 and bv.ndim == 1:
            a.grad += np.outer(g, bv)
            b.grad += av.T @ g
        else:  # 1-D x 1-D inner product
            a.grad += g * bv
            b.grad += g * av

    return a.tape._record(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        a.grad += g.T

    return a.tape._record(a.value.T, (a,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.value + b.value

    def backward(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad += _unbroadcast(g, b.value.shape)

    return a.tape._record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.value - b.value

    def backward(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad -= _unbroadcast(g, b.value.shape)

    return a.tape._record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.value * b.value

    def backward(g):
        a.grad += _unbroadcast(g * b.value, a.value.shape)
        b.grad += _unbroadcast(g * a.value, b.value.shape)

    return a.tape._record(out, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a.grad += g.reshape(a.value.shape)

    return a.tape._record(a.value.reshape(shape), (a,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    if x.value.size == 0:
        raise ShapeError("softmax of an empty tensor")
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        x.grad += y * (g - inner)

    return x.tape._record(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.value))

    def backward(g):
        x.grad += g * y * (1.0 - y)

    return x.tape._record(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.value, 0.0)

    def backward(g):
        x.grad += g * (x.value > 0.0)

    return x.tape._record(y, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x.grad += g * np.ones_like(x.value)

    return x.tape._record(np.asarray(x.value.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.value.size

    def backward(g):
        x.grad += g * np.full_like(x.value, 1.0 / n)

    return x.tape._record(np.asarray(x.value.mean()), (x,), backward)


def sumsq(x: Tensor) -> Tensor:
    """Sum of squared entries (squared L2 norm)."""
    return sum_all(mul(x, x))


def rows_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product of two (B, d) tensors -> (B,)."""
    if a.value.shape != b.value.shape or a.value.ndim != 2:
        raise ShapeError(f"rows_dot expects matching 2-D shapes, got {a.value.shape} vs {b.value.shape}")
    out = np.einsum("ij,ij->i", a.value, b.value)

    def backward(g):
        a.grad += g[:, None] * b.value
        b.grad += g[:, None] * a.value

    return a.tape._record(out, (a, b), backward)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Per-row cosine similarity of two (B, d) tensors -> (B,).

    Rows where either operand has zero norm get similarity 0 with zero
    gradient, matching the fusion contract for degenerate vectors.
    """
    if a.value.shape != b.value.shape or a.value.ndim != 2:
        raise ShapeError(f"cosine_rows expects matching 2-D shapes, got {a.value.shape} vs {b.value.shape}")
    na = np.linalg.norm(a.value, axis=1)
    nb = np.linalg.norm(b.value, axis=1)
    dot = np.einsum("ij,ij->i", a.value, b.value)
    ok = (na > 0.0) & (nb > 0.0)
    denom = np.where(ok, na * nb, 1.0)
    c = np.where(ok, dot / denom, 0.0)

    def backward(g):
        gm = np.where(ok, g, 0.0)
        na_safe = np.where(ok, na, 1.0)
        nb_safe = np.where(ok, nb, 1.0)
        a.grad += gm[:, None] * (
            b.value / denom[:, None] - (c / na_safe**2)[:, None] * a.value
        )
        b.grad += gm[:, None] * (
            a.value / denom[:, None] - (c / nb_safe**2)[:, None] * b.value
        )

    return a.tape._record(c, (a, b), backward)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    tape = parts[0].tape
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p.grad += g[tuple(idx)]

    return tape._record(out, tuple(parts), backward)


def assert_finite(x: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(x.value)):
        raise NumericError(f"non-finite values in {what}")
    return x


def fd_check(f, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error of the tape gradient vs central finite differences.

    ``f`` maps a leaf Tensor to a scalar Tensor on the leaf's tape. The
    finite-difference side re-evaluates ``f`` on fresh tapes and never
    touches the recorded gradient, keeping the two routes independent.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x)
    out = f(xt)
    if not np.isfinite(out.value):
        raise NumericError("non-finite objective value at the base point")
    tape.backward(out)
    g_ad = xt.grad.copy()

    def eval_at(xv):
        t = Tape()
        v = f(t.leaf(xv)).value
        if not np.isfinite(v):
            raise NumericError("non-finite objective value during finite differencing")
        return float(v)

    g_fd = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        g_fd.reshape(-1)[i] = (eval_at(xp.reshape(x.shape)) - eval_at(xm.reshape(x.shape))) / (2 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if x.size else 0.0
