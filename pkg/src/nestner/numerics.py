"""Dense float64 tensors with a define-by-run gradient tape.

Only what the tagger needs: 2-D matmul, a handful of elementwise ops,
row/column slicing and concatenation, row gathers and a row softmax.
Arrays are numpy float64; every op checks its output for NaN/Inf.

Usage::

    w = Parameter(np.ones((2, 2)), name="w")
    with Tape() as tape:
        loss = sum_all(mul(matmul(x, w), matmul(x, w)))
    (dw,) = tape.gradient(loss, [w])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFinite, ShapeMismatch

_TAPES: list["Tape"] = []


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFinite(f"non-finite value produced by {what}")


class Tensor:
    """Immutable float64 array that may take part in differentiation."""

    __slots__ = ("_data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor()")
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t._data = arr
        t.requires_grad = False
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    def numpy(self) -> np.ndarray:
        return np.array(self._data)

    def item(self) -> float:
        return float(self._data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor. Only optimizers replace its data."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name

    def assign(self, arr: np.ndarray) -> None:
        arr = np.array(arr, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeMismatch(f"cannot assign {arr.shape} to parameter {self.name} {self.shape}")
        _check_finite(arr, f"assign({self.name})")
        arr.flags.writeable = False
        self._data = arr

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of differentiable ops executed while the tape is active."""

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Reverse-mode sweep from a scalar ``target``; zeros for unreached sources."""
        if target.data.size != 1:
            raise ShapeMismatch(f"gradient target must be scalar, got {target.shape}")
        keep = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, vjp in reversed(self.ops):
            key = id(out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros(s.shape) if g is None else g)
        return out


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def custom_op(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, name: str = "op") -> Tensor:
    """Wrap a computed array as an op output and record ``vjp`` on the active tape.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    value = np.asarray(value, dtype=np.float64)
    _check_finite(value, name)
    out = Tensor._wrap(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append((out, tuple(inputs), vjp))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return custom_op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[n, k] + bias[k] broadcast over rows."""
    if len(x.shape) != 2 or bias.shape != (x.shape[1],):
        raise ShapeMismatch(f"add_bias: {x.shape} + {bias.shape}")
    return custom_op(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    av, bv = a.data, b.data
    return custom_op(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # tanh form: stable for large |x| and exactly 0.5 at 0
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_array(x.data)
    return custom_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return custom_op(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return custom_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def dropout_mask_apply(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant (pre-scaled) mask; the mask gets no gradient."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ShapeMismatch(f"dropout mask {mask.shape} vs input {x.shape}")
    return custom_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: add, mul, tanh, sigmoid, relu, dropout_mask_apply."""
    table = {
        "add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid,
        "relu": relu, "dropout_mask_apply": dropout_mask_apply,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# -- reductions and reshaping -----------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return custom_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(t: Tensor) -> Tensor:
    if len(t.shape) != 2 or t.shape[1] < 2:
        raise ShapeMismatch(f"softmax_rows needs [n, c>=2], got {t.shape}")
    p = softmax_array(t.data)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return custom_op(p, (t,), vjp, "softmax_rows")


def gather_rows(table: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.intp)
    if len(table.shape) != 2:
        raise ShapeMismatch(f"gather_rows needs a 2-D table, got {table.shape}")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(table.data[index], (table,), vjp, "gather_rows")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return custom_op(x.data[start:stop], (x,), vjp, "slice_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return custom_op(x.data[:, start:stop], (x,), vjp, "slice_cols")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeMismatch(f"concat_rows: mismatched trailing shapes {widths}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return custom_op(
        np.concatenate([p.data for p in parts], axis=0), tuple(parts),
        lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))),
        "concat_rows",
    )


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeMismatch(f"concat_cols: mismatched row counts {rows}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return custom_op(
        np.concatenate([p.data for p in parts], axis=1), tuple(parts),
        lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))),
        "concat_cols",
    )


# -- verification -----------------------------------------------------------

def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def _scalar(y: Tensor, what: str) -> float:
    if y.data.size != 1:
        raise ShapeMismatch(f"{what} must return a scalar, got {y.shape}")
    v = float(y.data)
    if not np.isfinite(v):
        raise NonFinite(f"{what} returned {v}")
    return v


def _central_difference(at: Callable[[float], float], eps: float, points: int) -> float:
    """Derivative from ``at(delta)``; 2 points is O(eps^2), 5 points O(eps^4) with less round-off."""
    if points == 2:
        return (at(eps) - at(-eps)) / (2 * eps)
    if points == 5:
        return (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
    raise ValueError(f"points must be 2 or 5, got {points}")


def check_gradient(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, points: int = 2) -> float:
    """Max relative error between the tape gradient of scalar ``f`` at ``x`` and central differences."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    _scalar(y, "f")
    (analytic,) = tape.gradient(y, [xt])
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        def at(delta):
            xp = x0.copy()
            xp[idx] += delta
            return _scalar(f(Tensor(xp)), "f")
        numeric[idx] = _central_difference(at, eps, points)
    return relative_error(analytic, numeric)


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5, points: int = 2
) -> dict[str, float]:
    """Like :func:`check_gradient` but perturbs parameters in place; returns error per parameter."""
    with Tape() as tape:
        loss = loss_fn()
    _scalar(loss, "loss_fn")
    analytic = tape.gradient(loss, params)
    errors = {}
    for p, a in zip(params, analytic):
        base = p.numpy()
        numeric = np.zeros_like(base)
        try:
            for idx in np.ndindex(*base.shape):
                def at(delta):
                    xp = base.copy()
                    xp[idx] += delta
                    p.assign(xp)
                    return _scalar(loss_fn(), "loss_fn")
                numeric[idx] = _central_difference(at, eps, points)
        finally:
            p.assign(base)
        errors[p.name] = relative_error(a, numeric)
    return errors
