"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every operator records a node holding its inputs and a vector-Jacobian
product closure.  A subset of operators additionally provides a
"tensor" VJP built from differentiable operators, so that a backward pass
run with ``create_graph=True`` yields gradients that can themselves be
differentiated (needed for gradient penalties).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "AutodiffError",
    "ShapeError",
    "NumericError",
    "ContractError",
    "DoubleBackwardError",
    "UnsupportedSecondOrderError",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "forward_op",
    "backward",
    "grad",
    "input_gradient",
    "clip_gradient_norm",
    "global_norm",
    "ORDER2_OPS",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NumericError(AutodiffError, FloatingPointError):
    pass


class ContractError(AutodiffError):
    pass


class DoubleBackwardError(AutodiffError):
    pass


class UnsupportedSecondOrderError(AutodiffError):
    pass


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("op", "inputs", "vjp", "vjp_t", "released")

    def __init__(self, op, inputs, vjp, vjp_t):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.vjp_t = vjp_t
        self.released = False


class Tensor:
    """Dense float64 array with an optional link to the node that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __hash__ = object.__hash__

    # -- operators -------------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Operations reachable from a root, in execution (topological) order.

    Replaying ``reversed(tape.nodes)`` visits every operation after all of
    its consumers, which is what the backward pass needs.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        self.tensors = order

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.tensors if t.node is not None]

    def __len__(self) -> int:
        return len(self.nodes)


# ---------------------------------------------------------------------------
# node construction


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"operator '{op}' produced non-finite values")


def _result(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], vjp, vjp_t=None) -> Tensor:
    _check_finite(op, arr)
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        out.node = Node(op, inputs, vjp, vjp_t)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic (order-2 capable)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    def vjp_t(g):
        return sum_to(g, sa), sum_to(g, sb)

    return _result("add", a.data + b.data, (a, b), vjp, vjp_t)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    def vjp_t(g):
        return sum_to(g, sa), sum_to(neg(g), sb)

    return _result("sub", a.data - b.data, (a, b), vjp, vjp_t)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    def vjp_t(g):
        return sum_to(mul(g, b), ad.shape), sum_to(mul(g, a), bd.shape)

    return _result("mul", ad * bd, (a, b), vjp, vjp_t)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("operator 'div' divided by zero")
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    def vjp_t(g):
        ga = div(g, b)
        return sum_to(ga, ad.shape), sum_to(neg(mul(ga, div(a, b))), bd.shape)

    return _result("div", out, (a, b), vjp, vjp_t)


# ---------------------------------------------------------------------------
# linear algebra (order-2 capable)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2:
        raise ShapeError(f"matmul: right operand must be 1-D or 2-D, got {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        g2 = g if b.ndim == 2 else g[..., None]
        b2 = bd if b.ndim == 2 else bd[:, None]
        ga = g2 @ b2.T
        a2 = ad.reshape(-1, ad.shape[-1]) if ad.ndim > 1 else ad[None, :]
        gb = a2.T @ g2.reshape(-1, g2.shape[-1])
        return ga.reshape(ad.shape), gb.reshape(bd.shape)

    def vjp_t(g):
        if a.ndim != 2 or b.ndim != 2:
            raise UnsupportedSecondOrderError("matmul: second order needs 2-D operands")
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _result("matmul", ad @ bd, (a, b), vjp, vjp_t)


def affine(x, W, b=None) -> Tensor:
    """``x @ W + b``; ``x`` is (..., n), ``W`` is (n, m), ``b`` is (m,)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2:
        raise ShapeError(f"affine: weight must be 2-D, got {W.shape}")
    if x.ndim == 0 or x.shape[-1] != W.shape[0]:
        raise ShapeError(
            f"affine: input last dimension {x.shape[-1] if x.ndim else None} "
            f"does not match weight rows {W.shape[0]}"
        )
    inputs: tuple[Tensor, ...]
    if b is None:
        out = x.data @ W.data
        inputs = (x, W)
    else:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"affine: bias shape {b.shape} does not match ({W.shape[1]},)")
        out = x.data @ W.data + b.data
        inputs = (x, W, b)
    xd, Wd = x.data, W.data

    def vjp(g):
        gx = g @ Wd.T
        x2 = xd.reshape(-1, xd.shape[-1])
        gW = x2.T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gW
        return gx, gW, g.reshape(-1, g.shape[-1]).sum(axis=0)

    def vjp_t(g):
        if x.ndim != 2:
            x2 = reshape(x, (-1, x.shape[-1]))
            g2 = reshape(g, (-1, g.shape[-1]))
        else:
            x2, g2 = x, g
        gx = matmul(g, transpose(W))
        gW = matmul(transpose(x2), g2)
        if b is None:
            return gx, gW
        return gx, gW, sum_(g2, axis=0)

    return _result("affine", out, inputs, vjp, vjp_t)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got {a.shape}")
    return _result("transpose", a.data.T, (a,), lambda g: (g.T,), lambda g: (transpose(g),))


# ---------------------------------------------------------------------------
# activations


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    def vjp_t(g):
        yt = tanh(x)
        return (mul(g, sub(1.0, mul(yt, yt))),)

    return _result("tanh", y, (x,), vjp, vjp_t)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(np.float64)

    def vjp(g):
        return (g * mask,)

    def vjp_t(g):
        return (mul(g, Tensor._wrap(mask)),)

    return _result("relu", x.data * mask, (x,), vjp, vjp_t)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # numerically stable for large |x|
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def log(x, floor: float = 0.0) -> Tensor:
    """Natural log; values below ``floor`` are clamped (zero gradient there)."""
    x = as_tensor(x)
    xd = x.data
    if floor > 0:
        clamped = xd < floor
        safe = np.where(clamped, floor, xd)
    else:
        clamped = None
        safe = xd
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(safe)

    def vjp(g):
        gx = g / safe
        if clamped is not None:
            gx = np.where(clamped, 0.0, gx)
        return (gx,)

    return _result("log", y, (x,), vjp)


def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (0/1, broadcastable) zeroes entries exactly."""
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        m = np.broadcast_to(m, xd.shape)
        if not m.any(axis=-1).all():
            raise ShapeError("softmax: every position along the last axis is masked")
        shifted = np.where(m, xd, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.where(m, np.exp(shifted), 0.0)
    else:
        e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (x,), vjp)


def dropout(x, rate: float, rng: np.random.Generator | None = None, train: bool = True) -> Tensor:
    """Inverted dropout: identity at inference, unbiased in expectation at train time."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and structure


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    def vjp_t(g):
        return (broadcast_to(reshape(g, kept), shape),)

    return _result("sum", np.sum(x.data, axis=axes, keepdims=keepdims), (x,), vjp, vjp_t)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def sum_to(x, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast tensor back down to ``shape``."""
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    src = x.shape
    return _result(
        "sum_to",
        _unbroadcast(x.data, tuple(shape)),
        (x,),
        lambda g: (np.broadcast_to(g, src).copy(),),
        lambda g: (broadcast_to(g, src),),
    )


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    src = x.shape
    return _result(
        "broadcast_to",
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, src),),
        lambda g: (sum_to(g, src),),
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(src),), lambda g: (reshape(g, src),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    basic = _is_basic(index)

    def vjp(g):
        full = np.zeros(src)
        if basic:
            # basic indexing never repeats an element, so assignment is the scatter-add
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    def vjp_t(g):
        return (_scatter(g, index, src),)

    return _result("getitem", out.copy(), (x,), vjp, vjp_t)


def _scatter(g: Tensor, index, shape) -> Tensor:
    full = np.zeros(shape)
    full[index] = g.data

    def vjp(h):
        return (h[index],)

    def vjp_t(h):
        return (getitem(h, index),)

    return _result("scatter", full, (g,), vjp, vjp_t)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def _slices(i):
        idx = [slice(None)] * nd
        idx[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
        return tuple(idx)

    def vjp(g):
        return tuple(g[_slices(i)] for i in range(len(ts)))

    def vjp_t(g):
        return tuple(getitem(g, _slices(i)) for i in range(len(ts)))

    out = np.concatenate([t.data for t in ts], axis=ax)
    return _result("concat", out, ts, vjp, vjp_t)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _result("stack", out, ts, vjp)


def take_rows(W, ids) -> Tensor:
    """Embedding lookup: rows of ``W`` selected by an integer array."""
    W = as_tensor(W)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= W.shape[0]):
        raise ShapeError(f"take_rows: id out of range [0, {W.shape[0]})")
    shape = W.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _result("take_rows", W.data[ids], (W,), vjp)


def pick(x, ids) -> Tensor:
    """Select one entry per row along the last axis: ``x[..., ids]``."""
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    lead = np.indices(ids.shape)
    index = tuple(lead) + (ids,)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result("pick", x.data[index], (x,), vjp)


def l2norm(x, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` (gradient at the origin taken as zero)."""
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=axis))
    ax = axis % xd.ndim

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g / safe, ax) * xd,)

    def vjp_t(g):
        nt = l2norm(x, axis=ax)
        safe = add(nt, Tensor._wrap((n == 0).astype(np.float64)))
        return (mul(reshape(div(g, safe), nt.shape[:ax] + (1,) + nt.shape[ax:]), x),)

    return _result("l2norm", n, (x,), vjp, vjp_t)


def mse(a, b) -> Tensor:
    """Squared Euclidean distance along the last axis, averaged over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    rows = max(1, int(np.prod(a.shape[:-1]))) if a.ndim > 1 else 1
    out = np.array(np.sum(diff * diff) / rows)

    def vjp(g):
        ga = (2.0 * g / rows) * diff
        return ga, -ga

    return _result("mse", out, (a, b), vjp)


ORDER2_OPS = frozenset(
    {
        "add", "sub", "neg", "mul", "div", "matmul", "affine", "transpose",
        "tanh", "relu", "sum", "sum_to", "broadcast_to", "reshape", "getitem",
        "scatter", "concat", "l2norm",
    }
)

_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "neg": neg, "mul": mul, "div": div,
    "matmul": matmul, "affine": affine, "transpose": transpose,
    "tanh": tanh, "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log,
    "softmax": softmax, "dropout": dropout, "sum": sum_, "mean": mean,
    "reshape": reshape, "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis), "take_rows": take_rows,
    "pick": pick, "l2norm": l2norm, "mse": mse,
}


def forward_op(name: str, *inputs, **kwargs) -> Tensor:
    """Apply a registered operator by name."""
    try:
        fn = _OPS[name]
    except KeyError:
        raise ContractError(f"unknown operator '{name}'") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward passes


def _run_backward(root: Tensor, seed, create_graph: bool, retain_graph: bool):
    tape = Tape(root)
    grads: dict[int, object] = {id(root): seed}
    for t in reversed(tape.tensors):
        node = t.node
        g = grads.get(id(t))
        if node is None or g is None:
            continue
        if node.released:
            raise DoubleBackwardError(
                "backward through a graph whose buffers were already released; "
                "pass retain_graph=True to the first call"
            )
        if create_graph:
            if node.vjp_t is None or node.op not in ORDER2_OPS:
                raise UnsupportedSecondOrderError(
                    f"operator '{node.op}' does not support differentiable gradients"
                )
            in_grads = node.vjp_t(g)
        else:
            in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            if prev is None:
                grads[id(inp)] = gi
            else:
                grads[id(inp)] = add(prev, gi) if create_graph else prev + gi
    if not retain_graph:
        for t in tape.tensors:
            if t.node is not None:
                t.node.released = True
                t.node.vjp = _released_vjp
                t.node.vjp_t = None
    return tape, grads


def _released_vjp(g):
    raise DoubleBackwardError("graph already released")


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, retain_graph: bool = False):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a map from leaf tensor to its gradient.  Tensors listed in
    ``wrt`` that the loss does not reach map to zeros.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires gradients")
    seed = np.ones_like(loss.data)
    tape, grads = _run_backward(loss, seed, create_graph=False, retain_graph=retain_graph)
    out: dict[Tensor, np.ndarray] = {}
    for t in tape.tensors:
        if t.node is None and t.requires_grad and id(t) in grads:
            g = grads[id(t)]
            t.grad = g.copy() if t.grad is None else t.grad + g
            out[t] = t.grad
    if wrt is not None:
        for t in wrt:
            if t not in out:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                out[t] = t.grad
    return out


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         retain_graph: bool | None = None) -> list:
    """Gradients of a scalar ``output`` with respect to ``inputs`` (no ``.grad`` side effects).

    With ``create_graph=True`` the returned gradients are Tensors recorded on
    a fresh graph and can be differentiated again.
    """
    if output.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    if retain_graph is None:
        retain_graph = create_graph
    if create_graph:
        seed = Tensor._wrap(np.ones_like(output.data))
    else:
        seed = np.ones_like(output.data)
    if not output.requires_grad:
        grads = {}
    else:
        _, grads = _run_backward(output, seed, create_graph=create_graph, retain_graph=retain_graph)
    result = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
            if create_graph:
                g = Tensor._wrap(g)
        result.append(g)
    return result


def input_gradient(f: Callable[[Tensor], Tensor], x) -> Tensor:
    """Differentiable gradient of ``sum(f(x))`` with respect to ``x``.

    ``x`` is treated as a fresh leaf; the result stays connected to any
    parameters ``f`` closes over, so it can be penalised and backpropagated.
    For row-independent ``f`` the rows of the result are per-example gradients.
    """
    xin = Tensor._wrap(np.array(as_tensor(x).data, copy=True), requires_grad=True)
    # the input gradient is a forward value here, so it is taped even under no_grad
    with enable_grad():
        out = f(xin)
        if out.size != 1:
            out = sum_(out)
        (g,) = grad(out, [xin], create_graph=True)
    return g


def global_norm(grads) -> float:
    values = grads.values() if isinstance(grads, dict) else grads
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in values)))


def clip_gradient_norm(grads, max_norm: float):
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Accepts a dict or a list of arrays and returns the same container type.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = global_norm(grads)
    scale = max_norm / total if total > max_norm else 1.0
    if isinstance(grads, dict):
        return {k: g * scale if scale != 1.0 else g for k, g in grads.items()}
    return [g * scale if scale != 1.0 else g for g in grads]
