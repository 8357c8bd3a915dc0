"""Small dense tensor engine with tape-based reverse-mode differentiation.

Values are float64 numpy arrays. Operations are recorded on the active
:class:`Tape` (entered as a context manager) whenever at least one input
requires a gradient; outside a tape everything runs as plain forward math.

Broadcasting is restricted to leading-batch expansion: for binary elementwise
ops the smaller operand's shape must equal the trailing dimensions of the
larger one. Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

OP_KINDS = frozenset(
    {
        "matmul", "add", "mul", "sub", "div", "scale", "concat", "slice",
        "reshape", "transpose", "softmax", "layer_norm", "gelu", "tanh",
        "exp", "log", "softplus", "sum", "mean", "embedding_lookup",
        "dropout", "masked_fill",
    }
)


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, _):
        raise TypeError("use slice(x, axis, start, stop) instead of indexing")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# --------------------------------------------------------------------------- tape

_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("kind", "inputs", "vjp")

    def __init__(self, kind, inputs, vjp):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] | None = None
        self._leaf_ids: dict[int, int] = {}
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _id_of(self, t: Tensor) -> int | None:
        if t.tape is self:
            return t.node_id
        if not t.requires_grad:
            return None
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None))
            self._leaf_ids[key] = nid
            self._leaves.append(t)
        return nid

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, vjp: Callable) -> None:
        if self.grads is not None:
            raise TapeError("tape already consumed by backward(); start a new tape")
        ids = tuple(self._id_of(t) for t in inputs)
        out.node_id = len(self.nodes)
        out.tape = self
        out.requires_grad = True
        self.nodes.append(_Node(kind, ids, vjp))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Populate and return gradients keyed by tape node id."""
        if self.grads is not None:
            raise TapeError("backward() already called on this tape")
        if loss.tape is not self:
            raise TapeError("loss is not on this tape (detached or recorded elsewhere)")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            node = self.nodes[nid]
            g = grads.get(nid)
            if g is None or node.vjp is None:
                continue
            in_grads = node.vjp(g)
            for iid, ig in zip(node.inputs, in_grads):
                if iid is None or ig is None:
                    continue
                prev = grads.get(iid)
                grads[iid] = ig if prev is None else prev + ig
            if node.kind != "leaf":
                del grads[nid]
        self.grads = {nid: g for nid, g in grads.items() if self.nodes[nid].kind == "leaf"}
        return self.grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Gradient of the last backward loss w.r.t. leaf ``t`` (None if unreached)."""
        if self.grads is None:
            raise TapeError("backward() has not been called")
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            return None
        return self.grads.get(nid)

    def reset(self) -> None:
        self.nodes.clear()
        self.grads = None
        self._leaf_ids.clear()
        self._leaves.clear()


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, vjp)
    return out


# --------------------------------------------------------------------------- helpers


def _check_finite(name: str, arr: np.ndarray) -> None:
    if __debug__ and not np.isfinite(arr).all():
        raise FloatingPointError(f"{name} produced non-finite values")


def _expand_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-batch expansion allowed)")


def _unexpand(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


# --------------------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _expand_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unexpand(g, sa), _unexpand(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _expand_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unexpand(g, sa), _unexpand(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _expand_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unexpand(g * bd, ad.shape) if a.requires_grad else None,
                _unexpand(g * ad, bd.shape) if b.requires_grad else None)

    return _emit("mul", (a, b), ad * bd, vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _expand_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (_unexpand(g / bd, ad.shape) if a.requires_grad else None,
                _unexpand(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _emit("div", (a, b), out, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _check_finite("exp", out)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    out = np.log(x)
    _check_finite("log", out)
    return _emit("log", (a,), out, lambda g: (g / x,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    return _emit("softplus", (a,), out, lambda g: (g * _sigmoid(x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (the "gelu_new" variant used by GPT-2)."""
    x = a.data
    x2 = x * x
    inner = _SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", (a,), out, vjp)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, a.data)
    except ValueError as exc:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs input {a.shape}") from exc
    if out.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} would broadcast input {a.shape}")
    return _emit("masked_fill", (a,), out, lambda g: (np.where(mask, 0.0, g),))


def dropout(a: Tensor, p: float, train: bool, key: Sequence[int] = (0,)) -> Tensor:
    """Inverted dropout with a mask drawn from a PRNG stream keyed by ``key``.

    The same key always yields the same mask, which keeps training runs
    reproducible and lets gradient checks freeze the mask.
    """
    if not train or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    rng = np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _emit("dropout", (a,), a.data * keep, lambda g: (g * keep,))


# --------------------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError(f"matmul: scalar operand {a.shape} @ {b.shape}")
    if ad.shape[-1] != bd.shape[0 if bd.ndim == 1 else -2]:
        raise ShapeError(f"matmul: contraction mismatch {a.shape} @ {b.shape}")
    if bd.ndim == 1:
        if ad.ndim != 2:
            raise ShapeError(f"matmul: vector rhs needs a matrix lhs, got {a.shape} @ {b.shape}")

        def vjp(g):
            return np.outer(g, bd), ad.T @ g
    elif ad.ndim == 1:
        if bd.ndim != 2:
            raise ShapeError(f"matmul: vector lhs needs a matrix rhs, got {a.shape} @ {b.shape}")

        def vjp(g):
            return bd @ g, np.outer(ad, g)
    elif bd.ndim == 2:
        k, m = bd.shape

        def vjp(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m) if b.requires_grad else None
            return ga, gb
    elif ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2]:

        def vjp(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb
    else:
        raise ShapeError(f"matmul: unsupported batch layout {a.shape} @ {b.shape}")
    return _emit("matmul", (a, b), ad @ bd, vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {[x.shape for x in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=ax), vjp)


def slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    ax = axis % a.ndim
    n = a.shape[ax]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = [np.s_[:]] * a.ndim
    index[ax] = np.s_[start:stop]
    index = tuple(index)
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _emit("slice", (a,), a.data[index], vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {table.shape}")
    src = table.shape

    def vjp(g):
        full = np.zeros(src)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return _emit("embedding_lookup", (table,), table.data[ids], vjp)


# --------------------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", (a,), out, vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    src = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _emit("mean", (a,), out, vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), out, vjp)


def layer_norm(a: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis (no affine part; compose with mul/add)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit("layer_norm", (a,), xhat, vjp)


# --------------------------------------------------------------------------- dispatcher

_DISPATCH: dict[str, Callable] = {
    "matmul": matmul, "add": add, "mul": mul, "sub": sub, "div": div,
    "scale": scale, "concat": concat, "slice": slice, "reshape": reshape,
    "transpose": transpose, "softmax": softmax, "layer_norm": layer_norm,
    "gelu": gelu, "tanh": tanh, "exp": exp, "log": log, "softplus": softplus,
    "sum": sum, "mean": mean, "embedding_lookup": embedding_lookup,
    "dropout": dropout, "masked_fill": masked_fill,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Apply op ``kind`` by name; ``params`` carry axis/shape/rate arguments."""
    fn = _DISPATCH.get(kind)
    if fn is None:
        raise ValueError(f"unknown op kind {kind!r}")
    if kind == "concat":
        return fn(list(inputs), **params)
    if kind == "embedding_lookup":
        return fn(inputs[0], params["ids"])
    return fn(*inputs, **params)


# --------------------------------------------------------------------------- gradient check


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    Per-coordinate error is ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
        if y.data.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {y.shape}")
        if y.tape is tape:
            tape.backward(y)
            analytic = tape.grad(xt)
        else:
            analytic = None
    if analytic is None:
        analytic = np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xp[i] += eps
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        xp[i] -= 2 * eps
        fm = float(f(Tensor(xp.reshape(x0.shape))).data)
        flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0
