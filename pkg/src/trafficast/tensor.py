"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation in this package is built from the primitives
here. Values are stored row-major as flat float64 arrays with an explicit
shape; the supported broadcasting forms are deliberately narrow (equal
shapes, a trailing-axis vector, or a scalar) so that every backward rule
stays auditable.

Ops record themselves onto the innermost active :class:`Tape`. A tape is
rebuilt on every forward pass, which makes data-dependent loop lengths
(e.g. an autoregressive decoder) trivial to differentiate.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "sigmoid",
    "tanh",
    "relu",
    "absolute",
    "softmax",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "slice_axis",
    "finite_diff_check",
    "GradCheckReport",
    "dump_tensor",
    "load_dump",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


def _as_array(values, shape=None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense float64 array plus optional gradient storage.

    `data` is always C-contiguous; `values` and `grad` expose the flat
    row-major views the file formats and debug dumps use. Scalars are
    shape (1,).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, values, shape=None, requires_grad: bool = False):
        self.data = _as_array(values, shape)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    # -- structure ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.reshape(self.data.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return absolute(self)

    def softmax(self, axis: int):
        return softmax(self, axis)

    def sum(self, axis: Optional[int] = None):
        return reduce_sum(self, axis)

    def mean(self, axis: Optional[int] = None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, perm: Sequence[int]):
        return transpose(self, perm)

    def slice_axis(self, axis: int, start: int, stop: int):
        return slice_axis(self, axis, start, stop)


class _Record:
    """One executed primitive: its inputs, output and backward rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_tapes = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tapes, "stack", None)
    if stack is None:
        stack = []
        _tapes.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitives executed while the tape is active.

    Tapes nest; ops record onto the innermost one. A tape and the tensors
    it references are confined to a single thread.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs, output, backward_fn) -> None:
        self.records.append(_Record(tuple(inputs), output, backward_fn))
        self._outputs.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def clear(self) -> None:
        self.records.clear()
        self._outputs.clear()


def _emit(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap a primitive's result and record it on the active tape."""
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every requires_grad tensor.

    Repeated calls without zeroing grads accumulate. Replays the tape's
    backward rules in reverse execution order, carrying per-pass adjoints
    separately from the persistent `.grad` fields so that accumulation
    semantics stay exact across calls.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss) and loss.requires_grad:
        raise ValueError("loss was not produced on this tape")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for rec in reversed(tape.records):
        g_out = adjoints.get(id(rec.output))
        if g_out is None:
            continue
        input_grads = rec.backward_fn(g_out)
        for inp, g in zip(rec.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adjoints:
                adjoints[key] = adjoints[key] + g
            else:
                adjoints[key] = g
                holders[key] = inp

    for key, g in adjoints.items():
        t = holders[key]
        if t.requires_grad:
            t.accumulate_grad(g)


# ---------------------------------------------------------------------------
# elementwise binary ops with restricted broadcasting
# ---------------------------------------------------------------------------

def _broadcast_mode(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "equal"
    if b.shape == (1,):
        return "scalar"
    if len(b.shape) == 1 and len(a.shape) >= 1 and a.shape[-1] == b.shape[0]:
        return "trailing"
    raise ShapeError(
        f"binary op needs equal shapes, a trailing-axis vector, or a scalar; "
        f"got {list(a.shape)} vs {list(b.shape)}"
    )


def _reduce_to(g: np.ndarray, mode: str, b_shape: tuple) -> np.ndarray:
    if mode == "equal":
        return g
    if mode == "scalar":
        return g.sum().reshape(1)
    return g.reshape(-1, b_shape[0]).sum(axis=0)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    mode = _broadcast_mode(a, b)
    out = a.data + b.data

    def bwd(g):
        return g, _reduce_to(g, mode, b.shape)

    return _emit((a, b), out, bwd)


def sub(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    mode = _broadcast_mode(a, b)
    out = a.data - b.data

    def bwd(g):
        return g, -_reduce_to(g, mode, b.shape)

    return _emit((a, b), out, bwd)


def mul(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    mode = _broadcast_mode(a, b)
    out = a.data * b.data

    def bwd(g):
        return g * b.data, _reduce_to(g * a.data, mode, b.shape)

    return _emit((a, b), out, bwd)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _emit((a,), y, bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _emit((a,), y, bwd)


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0, for determinism
    y = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _emit((a,), y, bwd)


def absolute(a: Tensor) -> Tensor:
    y = np.abs(a.data)

    def bwd(g):
        return (g * np.sign(a.data),)  # sign(0) == 0: subgradient at ties

    return _emit((a,), y, bwd)


# ---------------------------------------------------------------------------
# softmax / concat / slice / reduce / reshape / transpose / matmul
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    if not -len(a.shape) <= axis < len(a.shape):
        raise ShapeError(f"softmax axis {axis} invalid for shape {list(a.shape)}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit((a,), y, bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    first = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(first) or any(
            t.shape[i] != first[i] for i in range(len(first)) if i != axis % len(first)
        ):
            raise ShapeError(
                f"concat shapes differ off-axis: {list(first)} vs {list(t.shape)}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def bwd(g):
        gs = []
        for i in range(len(extents)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            gs.append(g[tuple(idx)])
        return gs

    return _emit(tuple(tensors), out, bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    rank = len(a.shape)
    axis = axis % rank
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(
            f"slice [{start}:{stop}] out of range for axis {axis} of {list(a.shape)}"
        )
    idx = [slice(None)] * rank
    idx[axis] = slice(start, stop)
    out = a.data[tuple(idx)].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[tuple(idx)] = g
        return (full,)

    return _emit((a,), out, bwd)


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        out = a.data.sum().reshape(1)

        def bwd(g):
            return (np.full_like(a.data, g.reshape(-1)[0]),)

        return _emit((a,), out, bwd)

    axis = axis % len(a.shape)
    out = a.data.sum(axis=axis)
    if out.ndim == 0:
        out = out.reshape(1)

    def bwd_axis(g):
        return (np.broadcast_to(np.expand_dims(g.reshape(out.shape), axis), a.shape).copy(),)

    return _emit((a,), out, bwd_axis)


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        n = a.size
        out = a.data.mean().reshape(1)

        def bwd(g):
            return (np.full_like(a.data, g.reshape(-1)[0] / n),)

        return _emit((a,), out, bwd)

    axis = axis % len(a.shape)
    n = a.shape[axis]
    out = a.data.mean(axis=axis)
    if out.ndim == 0:
        out = out.reshape(1)

    def bwd_axis(g):
        return (np.broadcast_to(np.expand_dims(g.reshape(out.shape) / n, axis), a.shape).copy(),)

    return _emit((a,), out, bwd_axis)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {list(a.shape)} to {list(shape)}")
    out = a.data.reshape(shape).copy()

    def bwd(g):
        return (g.reshape(a.shape),)

    return _emit((a,), out, bwd)


def transpose(a: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(len(a.shape))):
        raise ShapeError(f"bad permutation {list(perm)} for rank {len(a.shape)}")
    out = np.ascontiguousarray(a.data.transpose(perm))
    inv = np.argsort(perm)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _emit((a,), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul needs [m,k]x[k,n], got {list(a.shape)} and {list(b.shape)}"
        )
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit((a, b), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Outcome of a central-difference gradient check."""

    def __init__(self, max_rel_error: float, tol: float, analytic: np.ndarray, numeric: np.ndarray):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.analytic = analytic
        self.numeric = numeric

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_rel_error={self.max_rel_error:.3e}, tol={self.tol:.1e})"


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    # Denominator floored so dead units (both grads ~0) do not divide by zero
    # and central-difference cancellation noise is not amplified.
    floor = 1e-3 * (1.0 + np.abs(numeric).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Check d f(x)/dx against central differences, elementwise.

    `f` must return a scalar Tensor and must be re-runnable (it is called
    2*size(x)+1 times). Returns the max relative error and pass/fail at
    `tol`.
    """
    if h <= 0:
        raise ValueError("finite_diff_check needs h > 0")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        if out.size != 1:
            raise ShapeError("finite_diff_check needs a scalar-valued f")
        backward(out, tape)
    analytic = (
        probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)
    )

    numeric = np.zeros_like(x.data)
    flat = numeric.reshape(-1)
    base = x.data.copy().reshape(-1)
    for i in range(base.size):
        for sign in (+1.0, -1.0):
            bumped = base.copy()
            bumped[i] += sign * h
            val = f(Tensor(bumped.reshape(x.shape))).item()
            flat[i] += sign * val / (2.0 * h)

    max_err = float(_rel_errors(analytic, numeric).max(initial=0.0))
    return GradCheckReport(max_err, tol, analytic, numeric)


# ---------------------------------------------------------------------------
# debug dump (text fixtures)
# ---------------------------------------------------------------------------

def dump_tensor(t: Tensor, path) -> None:
    """Write shape line plus one value per line, 17 significant digits."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(" ".join(str(d) for d in t.shape) + "\n")
        for v in t.values:
            fh.write(f"{v:.17g}\n")


def load_dump(path) -> Tensor:
    with open(path, "r", encoding="ascii") as fh:
        shape = tuple(int(s) for s in fh.readline().split())
        vals = [float(line) for line in fh if line.strip()]
    return Tensor(vals, shape=shape)
