"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every operation builds a node holding its output value, its parents and a
closure that maps the output gradient to parent gradients. ``backward`` walks
the graph once in reverse topological order.

Broadcasting is deliberately restricted: elementwise binary operations accept
two equal shapes or one scalar operand. Anything else needs an explicit shape
op such as :func:`tile_rows`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; interior nodes come from the functions in
    this module (or the overloaded operators).
    """

    __slots__ = ("data", "grad", "parents", "_backward", "op", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), backward=None):
        if op == "leaf":
            arr = np.array(data, dtype=np.float64)
        else:
            arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._backward = backward
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _node(op: str, value: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    return Tensor(value, op=op, parents=tuple(parents), backward=backward)


# --------------------------------------------------------------------------
# elementwise arithmetic

def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar operands are ever broadcast
    return np.asarray(g.sum())


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _node("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    return _node("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _node("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a: Tensor) -> Tensor:
    return _node("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# --------------------------------------------------------------------------
# reductions

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node("sum", out, (a,), back)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# --------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def back(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # matrix @ vector
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # vector @ matrix
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _node("matmul", out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _node("reshape", out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def index(a: Tensor, idx) -> Tensor:
    """Basic slicing or integer-array row gather along axis 0."""
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node("index", np.array(out, copy=True), (a,), back)


def take_rows(a: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if a.data.ndim != 2 or ids.ndim != 1:
        raise ShapeError("take_rows", a.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise IndexError(f"take_rows: id out of range for {a.shape[0]} rows")
    return index(a, ids)


def pick(a: Tensor, cols) -> Tensor:
    """``out[i] = a[i, cols[i]]`` for a 2-D ``a``."""
    cols = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, cols.shape)
    rows = np.arange(a.shape[0])
    return index(a, (rows, cols))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
                s != r for k, (s, r) in enumerate(zip(p.shape, ref)) if k != axis % len(ref)):
            raise ShapeError("concat", ref, p.shape)
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis)
                     for k in range(len(parts)))

    return _node("concat", out, parts, back)


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of a vector into an ``(n, len(v))`` matrix."""
    if v.data.ndim != 1:
        raise ShapeError("tile_rows", v.shape)
    return _node("tile_rows", np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward value ``hard`` exactly; backward passes gradients to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError("straight_through", soft.shape, hard.shape)
    return _node("straight_through", hard.copy(), (soft,), lambda g: (g,))


# --------------------------------------------------------------------------
# normalisation and distances

def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node("softmax", out, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node("log_softmax", out, (a,), back)


def logsumexp(a: Tensor) -> Tensor:
    """Log-sum-exp over the last axis."""
    m = a.data.max(axis=-1, keepdims=True)
    s = np.exp(a.data - m).sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    p = np.exp(a.data - m) / s

    def back(g):
        return (p * np.expand_dims(g, -1),)

    return _node("logsumexp", out, (a,), back)


def sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared euclidean distances between rows: ``(n, d), (m, d) -> (n, m)``."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("sqdist", a.shape, b.shape)
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("nmd,nmd->nm", diff, diff)

    def back(g):
        w = 2.0 * g[:, :, None] * diff
        return w.sum(axis=1), -w.sum(axis=0)

    return _node("sqdist", out, (a, b), back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row of a 2-D tensor, then apply a per-feature gain and bias."""
    if a.data.ndim != 2 or gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        d = a.shape[1]
        gx = g * gain.data
        ga = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=1, keepdims=True) / d)
        return ga, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node("layer_norm", out, (a, gain, bias), back)


# --------------------------------------------------------------------------
# backward pass

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
        for p in reversed(node.parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(node) through the graph.

    Returns gradients keyed by leaf tensor. Leaves passed in ``leaves`` that are
    not connected to ``root`` get a zero gradient. Leaf ``.grad`` attributes are
    set (overwritten) as a side effect.
    """
    if root.data.ndim != 0 and root.data.size != 1:
        raise ShapeError("backward", root.shape, ())
    _check_finite(root.data, "backward root")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    found: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                found[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for leaf, g in found.items():
        _check_finite(g, "gradient")
        leaf.grad = g
    if leaves is not None:
        for leaf in leaves:
            if leaf not in found:
                leaf.grad = np.zeros_like(leaf.data)
                found[leaf] = leaf.grad
    return found


def grad(fn: Callable[..., Tensor], *arrays: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves built from ``arrays``; return value and gradients."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    g = backward(out, leaves)
    return out.item(), [g[leaf] for leaf in leaves]


def numerical_grad(fn: Callable[..., float], arrays: Sequence[np.ndarray],
                   h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of several arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*arrays)
            flat[i] = orig - h
            fm = fn(*arrays)
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def gradcheck(fn: Callable[..., Tensor], *arrays: np.ndarray, h: float = 1e-5,
              atol: float = 1e-8) -> float:
    """Max relative error between autodiff and central differences.

    The relative error is ``|a - n| / (|a| + atol)`` elementwise, following the
    usual convention of guarding near-zero gradients with a small floor.
    """
    _, analytic = grad(fn, *arrays)

    def scalar(*xs):
        return fn(*[Tensor(x) for x in xs]).item()

    numeric = numerical_grad(scalar, arrays, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / (np.abs(a) + atol))))
    return worst
