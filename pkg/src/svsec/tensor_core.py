"""Minimal tensor type with tape-based reverse-mode differentiation.

Storage is float32 by default. Every op promotes its operands to float64,
computes, and casts the result back to the storage dtype, so reductions and
products accumulate in 64 bits. :func:`precision` switches the storage dtype
(finite-difference checks run under ``precision(np.float64)``).

Recording is explicit: ops append to the innermost active :class:`Tape`, and
only when at least one input requires a gradient. Outside a tape nothing is
recorded, which is the inference path.

Random numbers come from :class:`Rng`, a thin wrapper over numpy's PCG64
bit generator seeded with a 64-bit integer.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "Rng",
    "precision",
    "get_dtype",
    "tensor",
    "tensor_create",
    "zeros",
    "constant",
    "normal",
    "add",
    "bias_add",
    "add_constant",
    "sub",
    "mul",
    "scale",
    "matmul",
    "bmm",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "roll",
    "tsum",
    "mean",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


_state = threading.local()
_node_counter = itertools.count()


def get_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype for newly created tensors."""
    prev = get_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


class Tensor:
    """An n-d float array, optionally tracked for gradients.

    ``data`` is a numpy array in the storage dtype. ``grad`` is ``None`` until
    :func:`backward` fills it.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        dtype = arr.dtype.type if arr.dtype.kind == "f" and arr.dtype.itemsize >= 4 else get_dtype()
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = next(_node_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all routes go through the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence]


@dataclass
class Tape:
    """Ordered log of differentiable ops recorded during one forward pass.

    Use as a context manager; nested tapes shadow outer ones.
    """

    records: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def node_ids(self) -> set:
        ids = set()
        for rec in self.records:
            ids.add(rec.output.node_id)
            ids.update(t.node_id for t in rec.inputs)
        return ids

    def clear(self) -> None:
        self.records.clear()


class Rng:
    """Seeded generator: numpy PCG64 with a 64-bit unsigned seed.

    ``state`` round-trips through JSON so checkpoints can resume the stream.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value

    def normal(self, mean: float, std: float, size=None):
        return mean + std * self._gen.standard_normal(size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream, a pure function of (seed, key)."""
        mixed = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, int(key)])
        return Rng(int(mixed.generate_state(1, np.uint64)[0]))


# ---------------------------------------------------------------------------
# creation


def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    return shape


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_dtype()), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=get_dtype()), requires_grad)


def constant(shape, c: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), c, dtype=get_dtype()), requires_grad)


def normal(shape, mean: float, std: float, rng: Rng, requires_grad: bool = False) -> Tensor:
    shape = _check_shape(shape)
    return Tensor(rng.normal(mean, std, shape).astype(get_dtype()), requires_grad)


def tensor_create(shape, init="zeros", *, c: float = 0.0, mean: float = 0.0, std: float = 1.0,
                  rng: Rng | None = None, requires_grad: bool = False) -> Tensor:
    if init == "zeros":
        return zeros(shape, requires_grad)
    if init == "constant":
        return constant(shape, c, requires_grad)
    if init == "normal":
        if rng is None:
            raise ValueError("normal init needs an rng")
        return normal(shape, mean, std, rng, requires_grad)
    raise ValueError(f"unknown init {init!r}")


# ---------------------------------------------------------------------------
# op plumbing


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _result_dtype(inputs: Iterable[Tensor]):
    dtypes = [t.data.dtype for t in inputs]
    return np.result_type(*dtypes) if dtypes else get_dtype()


def _make(value: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(value.astype(_result_dtype(inputs), copy=False))
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1].records.append(_Record(inputs, out, backward_fn))
    return out


def _require_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "add")
    return _make(_f64(a) + _f64(b), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "sub")
    return _make(_f64(a) - _f64(b), (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "mul")
    av, bv = _f64(a), _f64(b)
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(_f64(a) * c, (a,), lambda g: (g * c,))


def bias_add(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-d bias along ``axis``; the only broadcasting op."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    return _make(_f64(x) + _f64(b).reshape(view), (x, b),
                 lambda g: (g, g.sum(axis=reduce_axes)))


def add_constant(x: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array that broadcasts against ``x`` (e.g. an attention mask)."""
    const = np.asarray(const, dtype=np.float64)
    if np.broadcast_shapes(x.shape, const.shape) != x.shape:
        raise ShapeError(f"add_constant: {const.shape} does not broadcast to {x.shape}")
    return _make(_f64(x) + const, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    xv = _f64(x)
    mask = xv > 0
    return _make(np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))


_SQRT_HALF = np.sqrt(0.5)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    from scipy.special import erf

    xv = _f64(x)
    cdf = 0.5 * (1.0 + erf(xv * _SQRT_HALF))
    pdf = np.exp(-0.5 * xv * xv) / np.sqrt(2.0 * np.pi)
    return _make(xv * cdf, (x,), lambda g: (g * (cdf + xv * pdf),))


# ---------------------------------------------------------------------------
# products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents {a.shape[1]} and {b.shape[0]} differ")
    av, bv = _f64(a), _f64(b)
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over identical leading dims: [..., M, K] @ [..., K, N]."""
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"bmm: incompatible batch shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: inner extents {a.shape[-1]} and {b.shape[-2]} differ")
    av, bv = _f64(a), _f64(b)
    return _make(av @ bv, (a, b),
                 lambda g: (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    try:
        value = _f64(x).reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc
    return _make(value, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(_f64(x), axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=np.float64)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(_f64(x)[index]), (x,), back)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref.shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    value = np.concatenate([_f64(t) for t in tensors], axis=axis)
    return _make(value, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(shifts) if isinstance(shifts, (tuple, list)) else (shifts,)
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)
    neg = tuple(-s for s in shifts)
    return _make(np.roll(_f64(x), shifts, axes), (x,), lambda g: (np.roll(g, neg, axes),))


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    value = np.sum(_f64(x), axis=axis)

    def back(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(value), (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis), 1.0 / float(n))


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xv = _f64(x)
    e = np.exp(xv - xv.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xv = _f64(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * x_hat + beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs channels {c}")
    xv = _f64(x)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv, bv = _f64(gamma), _f64(beta)
    lead = tuple(range(x.ndim - 1))

    def back(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gv + bv, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape, leaves: Iterable[Tensor] = (), wrt: Iterable[Tensor] | None = None) -> None:
    """Propagate d(loss) back through ``tape`` into every ``requires_grad`` leaf.

    Leaf gradients are overwritten, not accumulated. Tensors in ``leaves`` that
    the loss does not depend on get zero gradients. With ``wrt`` only those
    tensors receive gradients and every other grad slot is left untouched.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {rec.output.node_id for rec in tape.records}
    if loss.node_id not in produced:
        raise ValueError("loss was not recorded on this tape")
    grads = {loss.node_id: np.ones(loss.shape, dtype=np.float64)}
    leaf_ids = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if not inp.requires_grad or gi is None:
                continue
            gi = np.asarray(gi, dtype=np.float64)
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + gi
            else:
                grads[inp.node_id] = gi
            if inp.node_id not in produced:
                leaf_ids[inp.node_id] = inp
    if wrt is not None:
        wrt = list(wrt)
        keep = {t.node_id for t in wrt}
        leaf_ids = {nid: t for nid, t in leaf_ids.items() if nid in keep}
        leaves = list(leaves) + wrt
    for nid, leaf in leaf_ids.items():
        leaf.grad = grads[nid].astype(leaf.data.dtype).reshape(leaf.shape)
    for leaf in leaves:
        if leaf.node_id not in leaf_ids:
            leaf.grad = np.zeros_like(leaf.data)
    tape.clear()


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst: tuple | None = None
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def grad_check(f: Callable, x: Tensor | Sequence[Tensor], h: float = 1e-3, tol: float = 1e-3,
               coords: Sequence | int | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central finite differences.

    ``x`` is a tensor (``f(x)``) or a list of tensors (``f()`` closes over
    them, the usual case for model parameters). ``coords`` restricts the
    check to a subsample: element indices for a single tensor,
    ``(tensor_position, element_index)`` pairs for a list, or an int for a
    fixed-seed random subset of that size.

    Per coordinate the relative error is ``|a - n| / max(|a|, |n|, floor)``.
    Run under ``precision(np.float64)``; points within ``h`` of a ReLU or
    max-pool kink give spurious failures and should be resampled.
    """
    single = isinstance(x, Tensor)
    tensors = [x] if single else list(x)

    def evaluate():
        out = f(x) if single else f()
        return float(np.asarray(out.data, dtype=np.float64).sum())

    for t in tensors:
        t.requires_grad = True
    with Tape() as tape:
        out = f(x) if single else f()
    backward(out, tape, leaves=tensors)
    grads = [t.grad.astype(np.float64) for t in tensors]

    if coords is None or isinstance(coords, (int, np.integer)):
        every = [(k, idx) for k, t in enumerate(tensors) for idx in np.ndindex(t.shape)]
        if coords is not None and coords < len(every):
            pick = np.sort(np.random.default_rng(0).choice(len(every), int(coords), replace=False))
            every = [every[i] for i in pick]
        coords = every
    elif single:
        coords = [(0, tuple(idx)) for idx in coords]
    else:
        coords = [(k, tuple(idx)) for k, idx in coords]

    analytic = np.empty(len(coords))
    numeric = np.empty(len(coords))
    for n, (k, idx) in enumerate(coords):
        data = tensors[k].data
        orig = data[idx]
        data[idx] = orig + h
        plus = evaluate()
        data[idx] = orig - h
        minus = evaluate()
        data[idx] = orig
        numeric[n] = (plus - minus) / (2.0 * h)
        analytic[n] = grads[k][idx]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom if len(coords) else np.zeros(0)
    worst = coords[int(np.argmax(rel))] if len(coords) else None
    return GradCheckReport(
        max_rel_error=float(rel.max()) if len(coords) else 0.0,
        tol=tol,
        checked=len(coords),
        worst=worst,
        analytic=analytic,
        numeric=numeric,
    )
