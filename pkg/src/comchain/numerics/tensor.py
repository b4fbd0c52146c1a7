"""Dense tensors with a recording tape for reverse-mode differentiation.

Values are plain numpy arrays. A :class:`Tensor` is an immutable wrapper that
optionally carries a node id on the active :class:`Tape`; primitives applied to
at least one tracked input append a record (op name, input ids, output id and a
vector-Jacobian closure holding the saved activations). :func:`backward` walks
the records in reverse.

Precision follows the inputs: float32 arrays train, float64 arrays are used for
gradient checks.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Input shapes do not conform to a primitive's contract."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class ContractError(ValueError):
    """A precondition of a tape-level operation is violated."""


class Tensor:
    __slots__ = ("data", "node", "name")

    def __init__(self, data, node: int | None = None, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" and node is not None:
            raise TypeError("only floating tensors can be tracked")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar over the primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Record:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered log of primitive applications for one forward pass."""

    records: list[Record] = field(default_factory=list)
    leaves: dict[int, str] = field(default_factory=dict)
    leaf_shapes: dict[int, tuple] = field(default_factory=dict)
    _next: int = 0

    def _new_id(self) -> int:
        self._next += 1
        return self._next

    def leaf(self, array, name: str) -> Tensor:
        node = self._new_id()
        t = Tensor(np.asarray(array), node, name)
        self.leaves[node] = name
        self.leaf_shapes[node] = t.shape
        return t

    def watch(self, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.leaf(v, k) for k, v in params.items()}

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


_TAPES: list[Tape | None] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording (teacher inference, evaluation)."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tape = active_tape()
    if tape is None or all(t.node is None for t in inputs):
        return Tensor(out)
    node = tape._new_id()
    tape.records.append(Record(op, tuple(t.node for t in inputs), node, vjp))
    return Tensor(out, node)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    if b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError("matmul", a.shape, b.shape) from None
    A, B = a.data, b.data
    # (..., n, k) @ (k, m) runs as one 2-D GEMM; numpy would loop over the batch
    flat = B.ndim == 2 and A.ndim > 2
    if flat:
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[1],))
    else:
        out = A @ B

    def vjp(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ B.T).reshape(A.shape)
            gb = A.reshape(-1, A.shape[-1]).T @ g2
            return ga, gb
        ga = g @ np.swapaxes(B, -1, -2)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return _unbroadcast(ga, A.shape), gb

    return _emit("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B,
                 lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = a.dtype.type(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError("transpose", a.shape, detail="rank < 2")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError("transpose", a.shape, detail=f"bad permutation {axes}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes),
                 lambda g: (g.transpose(inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", a.shape, tuple(shape)) from None
    src = a.shape
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def slice_(a, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    if not (0 <= start < stop <= n):
        raise DimensionError("slice", a.shape, detail=f"[{start}:{stop}] on axis {ax}")
    idx = (slice(None),) * ax + (slice(start, stop),)
    out = a.data[idx]
    src_shape, dt = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=dt)
        full[idx] = g
        return (full,)

    return _emit("slice", (a,), out, vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat", detail="no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError("concat", *(t.shape for t in ts))
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        return tuple(
            g[(slice(None),) * ax + (slice(int(bounds[i]), int(bounds[i + 1])),)]
            for i in range(len(ts))
        )

    return _emit("concat", ts, out, vjp)


def take(table, indices) -> Tensor:
    """Row gather ``table[indices]`` (embedding lookup); indices are constants."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError("take: indices must be integers")
    if table.ndim != 2:
        raise DimensionError("take", table.shape, detail="table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError("take", table.shape, idx.shape, detail="index out of range")
    out = table.data[idx]
    rows, dt = table.shape, table.dtype

    def vjp(g):
        full = np.zeros(rows, dtype=dt)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, rows[1]))
        return (full,)

    return _emit("take", (table,), out, vjp)


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), out, vjp)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (a,), out, vjp)


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply gain and shift."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm", x.shape, weight.shape, bias.shape)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    W = weight.data
    out = xhat * W + bias.data

    def vjp(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        gx_hat = g * W
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gw, gb

    return _emit("layer_norm", (x, weight, bias), out, vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = _as_tensor(a)
    X = a.data
    c = X.dtype.type(_GELU_C)
    k = X.dtype.type(0.044715)
    x2 = X * X
    th = x2 * k
    th += 1
    th *= X
    th *= c
    np.tanh(th, out=th)
    out = th + 1
    out *= X
    out *= 0.5

    def vjp(g):
        # d/dx = 0.5(1 + th) + 0.5 x (1 - th^2) c (1 + 3k x^2)
        d = x2 * (3 * k)
        d += 1
        d *= c
        d *= X
        t2 = th * th
        np.subtract(1, t2, out=t2)
        d *= t2
        d += th
        d += 1
        d *= 0.5
        d *= g
        return (d,)

    return _emit("gelu", (a,), out, vjp)


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    a = _as_tensor(a)
    X = a.data
    norm = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, X.dtype.type(eps))
    out = X / denom
    clipped = norm < eps

    def vjp(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        gx = (g - out * np.where(clipped, 0.0, proj)) / denom
        return (gx.astype(X.dtype, copy=False),)

    return _emit("l2_normalize", (a,), out, vjp)


def _axes(a: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(a.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % a.ndim for ax in axis)


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _axes(a, axis)
    out = a.data.sum(axis=axes, keepdims=True)
    kept = out.shape
    out = out.reshape([s for i, s in enumerate(a.shape) if i not in axes] or [1])
    src = a.shape
    return _emit("sum", (a,), out, lambda g: (np.broadcast_to(g.reshape(kept), src),))


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _axes(a, axis)
    n = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=True)
    kept = out.shape
    out = out.reshape([s for i, s in enumerate(a.shape) if i not in axes] or [1])
    src, inv = a.shape, a.dtype.type(1.0 / n)
    return _emit("mean", (a,), out,
                 lambda g: (np.broadcast_to(g.reshape(kept) * inv, src),))


def sum_of_squares(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _axes(a, axis)
    X = a.data
    out = (X * X).sum(axis=axes, keepdims=True)
    kept = out.shape
    out = out.reshape([s for i, s in enumerate(a.shape) if i not in axes] or [1])
    return _emit("sum_of_squares", (a,), out, lambda g: (2.0 * X * g.reshape(kept),))


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "transpose": transpose,
    "reshape": reshape,
    "slice": slice_,
    "concat": concat,
    "take": take,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "l2_normalize": l2_normalize,
    "mean": mean,
    "sum": sum_,
    "sum_of_squares": sum_of_squares,
}


def primitive(name: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise KeyError(f"unknown primitive {name!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every leaf registered on ``tape``.

    Leaves that do not reach the loss get zero arrays.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    out = {
        name: np.zeros(tape.leaf_shapes[node], dtype=loss.dtype)
        for node, name in tape.leaves.items()
    }
    if loss.node is None:
        return out
    grads[loss.node] = np.ones(loss.shape, dtype=loss.dtype)
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        parts = rec.vjp(g)
        for node, part in zip(rec.inputs, parts):
            if node is None or part is None:
                continue
            prev = grads.get(node)
            grads[node] = part if prev is None else prev + part
    for node, name in tape.leaves.items():
        if node in grads:
            out[name] = np.ascontiguousarray(grads[node], dtype=loss.dtype)
    return out


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor],
                   params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        leaves = tape.watch(params)
        loss = fn(leaves)
    return loss.item(), backward(tape, loss)


def grad_check(fn: Callable[[dict[str, Tensor]], Tensor],
               point: dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``point`` must hold float64 arrays. Error per coordinate is
    ``|ad - fd| / max(|ad|, 1e-8)``.
    """
    point = {k: np.asarray(v) for k, v in point.items()}
    for k, v in point.items():
        if v.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 inputs; {k} is {v.dtype}")
    _, ad = value_and_grad(fn, point)

    def f(p):
        with no_grad():
            return fn({k: Tensor(v) for k, v in p.items()}).item()

    worst = 0.0
    for k, v in point.items():
        flat = v.reshape(-1)
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += h
            minus[i] -= h
            fp = f({**point, k: plus.reshape(v.shape)})
            fm = f({**point, k: minus.reshape(v.shape)})
            # divide by the step actually taken, not the nominal 2h
            fd = (fp - fm) / (plus[i] - minus[i])
            a = float(ad[k].reshape(-1)[i])
            worst = max(worst, abs(a - fd) / max(abs(a), 1e-8))
    return worst
