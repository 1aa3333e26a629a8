"""Minimal reverse-mode differentiation on numpy arrays.

A ``Tape`` records every primitive applied to ``Var`` handles together with a
vector-Jacobian closure. ``backward`` walks the tape in reverse and returns
the gradient as a ``ParamVector`` laid out like the parameters.

The primitive set is what the EGNN and the CRPS loss need: affine maps,
elementwise arithmetic with row/column broadcasting, SiLU, absolute value,
square and square root, reductions, concatenation, and row gather/scatter-add
over edge index arrays. Primitives also accept plain arrays; when no operand
is a ``Var`` the plain result is returned and nothing is recorded.

Conventions:

* the subgradient of ``|u|`` at ``u = 0`` is 0;
* scatter-add accumulates in ascending index order (``np.add.at``), so
  forward and backward are bit-reproducible single-threaded;
* everything runs in float64.

Copyright (c) Bryn Gwalad 2025
"""

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import ShapeError

Operand = Union["Var", np.ndarray, float, None]


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """A flat float64 vector with a registry of named tensors.

    The registry offsets are contiguous, non-overlapping and cover the vector.
    ``view(name)`` returns a reshaped view, so writes go to the flat vector.
    """

    def __init__(self, layout: Sequence[ParamSpec], values: Optional[np.ndarray] = None) -> None:
        offset = 0
        for spec in layout:
            if spec.offset != offset:
                raise ValueError(f"parameter {spec.name} starts at {spec.offset}, expected {offset}")
            offset += spec.size
        self.layout: Tuple[ParamSpec, ...] = tuple(layout)
        self._index: Dict[str, ParamSpec] = {spec.name: spec for spec in self.layout}
        if len(self._index) != len(self.layout):
            raise ValueError("duplicate parameter names")
        if values is None:
            values = np.zeros(offset, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (offset,):
            raise ValueError(f"expected {offset} values, got shape {values.shape}")
        self.values = values

    @classmethod
    def from_shapes(cls, shapes: Iterable[Tuple[str, Tuple[int, ...]]]) -> "ParamVector":
        layout, offset = [], 0
        for name, shape in shapes:
            spec = ParamSpec(name, tuple(int(s) for s in shape), offset)
            layout.append(spec)
            offset += spec.size
        return cls(layout)

    @property
    def names(self) -> List[str]:
        return [spec.name for spec in self.layout]

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def spec(self, name: str) -> ParamSpec:
        return self._index[name]

    def view(self, name: str) -> np.ndarray:
        spec = self._index[name]
        return self.values[spec.offset:spec.offset + spec.size].reshape(spec.shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.values.copy())

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.layout, np.array(values, dtype=np.float64))


class Var:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", index: int, value: np.ndarray) -> None:
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive applications.

    Node ``i`` only depends on nodes with smaller index, so the record is in
    topological order by construction. A tape made with ``record=False``
    evaluates the same graph without keeping backward closures.
    """

    def __init__(self, record: bool = True) -> None:
        self.record = record
        self._parents: List[Tuple[int, ...]] = []
        self._vjps: List[Optional[VJP]] = []
        self.param_vars: Dict[str, Var] = {}
        self.layout: Tuple[ParamSpec, ...] = ()
        self.input_vars: List[Var] = []
        self.outputs: Tuple[Var, ...] = ()

    def __len__(self) -> int:
        return len(self._vjps)

    def leaf(self, value: np.ndarray) -> Var:
        value = np.asarray(value, dtype=np.float64)
        return self._append(value, (), None)

    def _append(self, value: np.ndarray, parents: Tuple[int, ...], vjp: Optional[VJP]) -> Var:
        if not self.record:
            return Var(self, -1, value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(self, len(self._vjps) - 1, value)

    def gradients(self, outputs: Sequence[Var], cotangents: Sequence[np.ndarray]) -> List[Optional[np.ndarray]]:
        """Accumulate d<cotangents, outputs>/d(node) for every node."""
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        grads: List[Optional[np.ndarray]] = [None] * len(self._vjps)
        for out, cot in zip(outputs, cotangents):
            cot = np.asarray(cot, dtype=np.float64)
            if cot.shape != out.shape:
                raise ShapeError("backward", cot.shape, out.shape)
            grads[out.index] = cot.copy() if grads[out.index] is None else grads[out.index] + cot
        for i in range(len(self._vjps) - 1, -1, -1):
            g, vjp = grads[i], self._vjps[i]
            if g is None or vjp is None:
                continue
            for parent, pg in zip(self._parents[i], vjp(g)):
                if parent < 0 or pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg
        return grads


def _value(x: Operand) -> Optional[np.ndarray]:
    if x is None:
        return None
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _emit(value: np.ndarray, operands: Sequence[Operand], vjp: VJP):
    tape = next((op.tape for op in operands if isinstance(op, Var)), None)
    if tape is None:
        return value
    parents = tuple(op.index if isinstance(op, Var) else -1 for op in operands)
    if any(isinstance(op, Var) and op.tape is not tape for op in operands):
        raise ValueError("operands recorded on different tapes")
    return tape._append(value, parents, vjp)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(name: str, a: Operand, b: Operand, fn):
    av, bv = _value(a), _value(b)
    try:
        return av, bv, fn(av, bv)
    except ValueError as exc:
        raise ShapeError(name, av.shape, bv.shape) from exc


def add(a: Operand, b: Operand):
    av, bv, out = _binary("add", a, b, np.add)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a: Operand, b: Operand):
    av, bv, out = _binary("sub", a, b, np.subtract)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a: Operand, b: Operand):
    av, bv, out = _binary("mul", a, b, np.multiply)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def linear(x: Operand, weight: Operand, bias: Operand = None):
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    xv, wv, bv = _value(x), _value(weight), _value(bias)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError("linear", xv.shape, wv.shape)
    if bv is not None and bv.shape != (wv.shape[0],):
        raise ShapeError("linear", xv.shape, wv.shape, bv.shape)
    out = xv @ wv.T
    if bv is not None:
        out = out + bv

    def vjp(g):
        return g @ wv, g.T @ xv, (g.sum(axis=0) if bv is not None else None)

    return _emit(out, (x, weight, bias), vjp)


def matmul(a: Operand, b: Operand):
    av, bv = _value(a), _value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def silu(x: Operand):
    xv = _value(x)
    s = expit(xv)
    return _emit(xv * s, (x,), lambda g: (g * (s * (1.0 + xv * (1.0 - s))),))


def absolute(x: Operand):
    xv = _value(x)
    return _emit(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def square(x: Operand):
    xv = _value(x)
    return _emit(xv * xv, (x,), lambda g: (2.0 * xv * g,))


def sqrt(x: Operand):
    xv = _value(x)
    out = np.sqrt(xv)
    return _emit(out, (x,), lambda g: (0.5 * g / out,))


def sum_(x: Operand, axis: Optional[int] = None, keepdims: bool = False):
    xv = _value(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _emit(np.asarray(out), (x,), vjp)


def mean(x: Operand):
    xv = _value(x)
    return mul(sum_(x), 1.0 / xv.size)


def reshape(x: Operand, shape: Tuple[int, ...]):
    xv = _value(x)
    try:
        out = xv.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", xv.shape, tuple(shape)) from exc
    return _emit(out, (x,), lambda g: (g.reshape(xv.shape),))


def concat(parts: Sequence[Operand], axis: int = 1):
    values = [_value(p) for p in parts]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", *(v.shape for v in values)) from exc
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _emit(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather(x: Operand, index: np.ndarray):
    """Rows ``x[index]``; the backward pass scatter-adds in index order."""
    xv = _value(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= xv.shape[0]):
        raise ShapeError("gather", xv.shape, index.shape)

    def vjp(g):
        acc = np.zeros_like(xv)
        np.add.at(acc, index, g)
        return (acc,)

    return _emit(xv[index], (x,), vjp)


def scatter_add(x: Operand, index: np.ndarray, n_rows: int):
    """``out[index[e]] += x[e]`` for e ascending; ``out`` has ``n_rows`` rows."""
    xv = _value(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (xv.shape[0],) or (index.size and index.max() >= n_rows):
        raise ShapeError("scatter_add", xv.shape, index.shape)
    out = np.zeros((n_rows,) + xv.shape[1:], dtype=np.float64)
    np.add.at(out, index, xv)
    return _emit(out, (x,), lambda g: (g[index],))


Builder = Callable[..., Union[Var, Sequence[Var]]]


def forward(
    builder: Builder,
    params: ParamVector,
    inputs: Sequence[object] = (),
    track_inputs: bool = False,
    record: bool = True,
) -> Tuple[Tuple[np.ndarray, ...], Tape]:
    """Run ``builder(tape, param_vars, *inputs)`` and return its outputs.

    ``param_vars`` maps parameter names to leaf ``Var`` handles. With
    ``track_inputs`` every float array input becomes a leaf too so that
    ``backward(..., wrt_inputs=True)`` can return input gradients; other
    inputs (index arrays, configs, None) are passed through unchanged.
    """
    tape = Tape(record=record)
    tape.layout = params.layout
    tape.param_vars = {name: tape.leaf(params.view(name)) for name in params.names}
    passed = []
    for item in inputs:
        if track_inputs and isinstance(item, np.ndarray) and item.dtype.kind == "f":
            var = tape.leaf(item)
            tape.input_vars.append(var)
            passed.append(var)
        else:
            passed.append(item)
    result = builder(tape, tape.param_vars, *passed)
    outputs = (result,) if isinstance(result, Var) else tuple(result)
    for out in outputs:
        if not isinstance(out, Var):
            raise TypeError("builder outputs must be recorded on the tape")
    tape.outputs = outputs
    return tuple(out.value for out in outputs), tape


def backward(tape: Tape, output_cotangents: Sequence[np.ndarray], wrt_inputs: bool = False):
    """Reverse pass; returns the parameter gradient (and input gradients).

    The result is the gradient of sum_k <cotangent_k, output_k>.
    """
    if len(output_cotangents) != len(tape.outputs):
        raise ShapeError("backward", (len(output_cotangents),), (len(tape.outputs),))
    grads = tape.gradients(tape.outputs, output_cotangents)
    grad = ParamVector(tape.layout)
    for name, var in tape.param_vars.items():
        g = grads[var.index]
        if g is not None:
            grad.view(name)[...] = g
    if not wrt_inputs:
        return grad
    inputs = [
        grads[v.index] if grads[v.index] is not None else np.zeros_like(v.value)
        for v in tape.input_vars
    ]
    return grad, inputs


def value_and_grad(builder: Builder, params: ParamVector, inputs: Sequence[object] = ()) -> Tuple[float, ParamVector]:
    """Scalar-output convenience around forward/backward."""
    (value,), tape = forward(builder, params, inputs)
    if value.shape != ():
        raise ShapeError("value_and_grad", value.shape, ())
    return float(value), backward(tape, [np.ones(())])


def finite_difference_check(
    loss: Callable[[ParamVector], Tuple[float, ParamVector]],
    params: ParamVector,
    eps: float = 1e-4,
    n_probes: int = 16,
    seed: int = 0,
    atol: float = 1e-8,
) -> float:
    """Largest relative deviation between backward() and central differences.

    ``loss`` maps parameters to ``(value, gradient)``. Probes are random
    coordinate directions; each deviation is ``|fd - g| / max(|fd|, |g|, atol)``
    so coordinates where both derivatives vanish count as exact.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, grad = loss(params)
    rng = np.random.default_rng(seed)
    n = params.size
    coords = rng.choice(n, size=min(n_probes, n), replace=False)
    worst = 0.0
    for c in coords:
        plus, minus = params.copy(), params.copy()
        plus.values[c] += eps
        minus.values[c] -= eps
        fd = (loss(plus)[0] - loss(minus)[0]) / (2.0 * eps)
        g = grad.values[c]
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), atol))
    return float(worst)
