"""Dense float64 tensors with tape-based reverse-mode differentiation.

Forward ops run eagerly on numpy arrays. When a Tape is active and at least
one operand participates in the tape (``grad_enabled``), the op records a
vector-Jacobian closure; ``backward`` replays the records in reverse
execution order, which is a reverse topological order by construction.
Tensors are treated as immutable values: no op writes into an operand.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import GradientError, ShapeError
from .rng import RngStream

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Immutable dense array of float64 values, row-major."""

    __slots__ = ("data", "grad_enabled")

    def __init__(self, data, grad_enabled: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad_enabled = bool(grad_enabled)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def with_grad(self, flag: bool = True) -> "Tensor":
        """A view of the same values with tape participation switched."""
        t = _wrap(self.data)
        t.grad_enabled = bool(flag)
        return t

    def copy(self) -> "Tensor":
        t = _wrap(self.data.copy())
        t.grad_enabled = self.grad_enabled
        return t

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", grad" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}{flag})"


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad_enabled = False
    return t


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data) -> Tensor:
    """A grad-enabled leaf tensor."""
    return Tensor(data, grad_enabled=True)


# --- tape ---------------------------------------------------------------

_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered op record for one forward pass, single-threaded."""

    __slots__ = ("_records", "_outputs")

    def __init__(self):
        self._records = []
        self._outputs = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self._records.append((out, tuple(inputs), vjp))
        self._outputs.add(id(out))

    def knows(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def register_op(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Attach a vjp to the active tape if any input participates in it.

    ``vjp(g)`` must return one cotangent array (or None) per input. This is
    the extension point used by ops defined outside this module.
    """
    tape = active_tape()
    if tape is not None and any(t.grad_enabled for t in inputs):
        out.grad_enabled = True
        tape.record(out, inputs, vjp)
    return out


def backward(loss: Tensor, tape: Tape) -> dict:
    """Gradients of a scalar loss for every grad-enabled leaf on the tape.

    Returns a map Tensor -> ndarray. Leaves with grad_enabled False get no
    entry, matching the frozen-parameter contract.
    """
    if loss.shape != ():
        raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.knows(loss):
        raise GradientError("loss is not a product of this tape (detached)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for out, inputs, vjp in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parts = vjp(g)
        for t, p in zip(inputs, parts):
            if p is None or not t.grad_enabled:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + p
            else:
                grads[key] = p
            if key not in tape._outputs:
                leaves[key] = t
    return {leaves[k]: grads[k] for k in leaves}


# --- broadcasting helpers -----------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# --- elementwise ops ----------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out = _wrap(a.data + s)
        return register_op(out, (a,), lambda g: (g,))
    _broadcast_check(a, b, "add")
    out = _wrap(a.data + b.data)
    ash, bsh = a.shape, b.shape
    return register_op(
        out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))
    )


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out = _wrap(a.data - s)
        return register_op(out, (a,), lambda g: (g,))
    _broadcast_check(a, b, "sub")
    out = _wrap(a.data - b.data)
    ash, bsh = a.shape, b.shape
    return register_op(
        out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))
    )


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out = _wrap(a.data * s)
        return register_op(out, (a,), lambda g: (g * s,))
    _broadcast_check(a, b, "mul")
    out = _wrap(a.data * b.data)
    ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    return register_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)),
    )


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _broadcast_check(a, b, "div")
    out = _wrap(a.data / b.data)
    ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    return register_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ash),
            _unbroadcast(-g * ad / (bd * bd), bsh),
        ),
    )


def neg(a: Tensor) -> Tensor:
    out = _wrap(-a.data)
    return register_op(out, (a,), lambda g: (-g,))


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    out = _wrap(root)
    return register_op(out, (a,), lambda g: (g * (0.5 / root),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _wrap(x * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return register_op(out, (a,), vjp)


# --- structural ops -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _wrap(a.data @ b.data)
    ad, bd = a.data, b.data
    return register_op(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got shape {a.shape}")
    out = _wrap(np.ascontiguousarray(a.data.T))
    return register_op(out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = _wrap(a.data.reshape(shape))
    orig = a.shape
    return register_op(out, (a,), lambda g: (g.reshape(orig),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of one axis."""
    if not 0 <= axis < a.ndim:
        raise ShapeError(f"narrow: axis {axis} invalid for shape {a.shape}")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: slice [{start}:{start + length}] exceeds axis {axis} "
            f"of shape {a.shape}"
        )
    key = tuple(
        slice(start, start + length) if d == axis else slice(None)
        for d in range(a.ndim)
    )
    out = _wrap(np.ascontiguousarray(a.data[key]))
    orig = a.shape

    def vjp(g):
        full = np.zeros(orig)
        full[key] = g
        return (full,)

    return register_op(out, (a,), vjp)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    if not 0 <= axis < parts[0].ndim:
        raise ShapeError(f"concat: axis {axis} invalid for shape {parts[0].shape}")
    out = _wrap(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(sizes))
        )

    return register_op(out, parts, vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (B, m, k) @ (B, k, n) -> (B, m, n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out = _wrap(np.matmul(a.data, b.data))
    ad, bd = a.data, b.data
    return register_op(
        out,
        (a, b),
        lambda g: (
            np.matmul(g, bd.transpose(0, 2, 1)),
            np.matmul(ad.transpose(0, 2, 1), g),
        ),
    )


def bmm_nt(a: Tensor, b: Tensor) -> Tensor:
    """Batched product against transposed b: (B, m, k) @ (B, n, k)^T -> (B, m, n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"bmm_nt: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = _wrap(np.matmul(ad, bd.transpose(0, 2, 1)))
    return register_op(
        out,
        (a, b),
        lambda g: (np.matmul(g, bd), np.matmul(g.transpose(0, 2, 1), ad)),
    )


def transpose_last2(a: Tensor) -> Tensor:
    """Swap the last two axes of a rank-3 tensor."""
    if a.ndim != 3:
        raise ShapeError(f"transpose_last2 expects rank 3, got shape {a.shape}")
    out = _wrap(np.ascontiguousarray(a.data.transpose(0, 2, 1)))
    return register_op(out, (a,), lambda g: (g.transpose(0, 2, 1),))


def tile_rows(a: Tensor, count: int) -> Tensor:
    """Stack a (R, D) tensor into (count, R, D) copies."""
    if a.ndim != 2:
        raise ShapeError(f"tile_rows expects rank 2, got shape {a.shape}")
    out = _wrap(np.broadcast_to(a.data, (count,) + a.shape).copy())
    return register_op(out, (a,), lambda g: (g.sum(axis=0),))


def repeat_interleave0(a: Tensor, repeats: int) -> Tensor:
    """Repeat each leading-axis entry `repeats` times: (B, ...) -> (B*r, ...)."""
    if a.ndim < 1 or repeats < 1:
        raise ShapeError(f"repeat_interleave0: bad shape {a.shape} or repeats {repeats}")
    out = _wrap(np.repeat(a.data, repeats, axis=0))
    b = a.shape[0]
    rest = a.shape[1:]
    return register_op(
        out, (a,), lambda g: (g.reshape((b, repeats) + rest).sum(axis=1),)
    )


def split_heads(a: Tensor, heads: int) -> Tensor:
    """(B, L, D) -> (B*heads, L, D/heads), one block per attention head."""
    if a.ndim != 3 or a.shape[2] % heads:
        raise ShapeError(f"split_heads: shape {a.shape} not divisible into {heads} heads")
    b, l, d = a.shape
    hd = d // heads
    out = _wrap(
        np.ascontiguousarray(
            a.data.reshape(b, l, heads, hd).transpose(0, 2, 1, 3).reshape(b * heads, l, hd)
        )
    )

    def vjp(g):
        back = g.reshape(b, heads, l, hd).transpose(0, 2, 1, 3).reshape(b, l, d)
        return (np.ascontiguousarray(back),)

    return register_op(out, (a,), vjp)


def merge_heads(a: Tensor, heads: int) -> Tensor:
    """Inverse of split_heads: (B*heads, L, hd) -> (B, L, heads*hd)."""
    if a.ndim != 3 or a.shape[0] % heads:
        raise ShapeError(f"merge_heads: leading axis {a.shape} not divisible by {heads}")
    bh, l, hd = a.shape
    b = bh // heads
    out = _wrap(
        np.ascontiguousarray(
            a.data.reshape(b, heads, l, hd).transpose(0, 2, 1, 3).reshape(b, l, heads * hd)
        )
    )

    def vjp(g):
        back = g.reshape(b, l, heads, hd).transpose(0, 2, 1, 3).reshape(bh, l, hd)
        return (np.ascontiguousarray(back),)

    return register_op(out, (a,), vjp)


# --- normalization and reductions ---------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    """Softmax along one axis, stabilized by max subtraction."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    y = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y *= 1.0 / y.sum(axis=axis, keepdims=True)
    out = _wrap(y)

    def vjp(g):
        dx = g * y
        dx -= y * dx.sum(axis=axis, keepdims=True)
        return (dx,)

    return register_op(out, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ShapeError(f"layer_norm: eps must be positive, got {eps}")
    dim = x.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match "
            f"last axis of {x.shape}"
        )
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xc, xc)[..., None] / dim
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data
    y += bias.data
    out = _wrap(y)
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        # dL/dx for y = (x - mu)/sqrt(var + eps) * gain + bias, var biased
        dxhat = g * gd
        a = np.einsum("...i,...i->...", dxhat, xhat)[..., None] / dim
        b = dxhat.mean(axis=-1, keepdims=True)
        dx = dxhat - xhat * a
        dx -= b
        dx *= inv
        if lead:
            dgain = np.einsum("ri,ri->i", g.reshape(-1, dim), xhat.reshape(-1, dim))
            dbias = g.sum(axis=lead)
        else:
            dgain = g * xhat
            dbias = g
        return (dx, dgain, dbias)

    return register_op(out, (x, gain, bias), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = _wrap(np.asarray(a.data.sum()))
    shape = a.shape
    return register_op(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = _wrap(np.asarray(a.data.mean()))
    shape = a.shape
    return register_op(
        out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


# --- sampling and verification ------------------------------------------


def sample_gaussian(shape, rng: RngStream) -> Tensor:
    """Standard normal tensor, deterministic per the stream's identity."""
    return _wrap(rng.normal(tuple(shape)))


def finite_diff_check(f, x: Tensor, h: float = 1e-5):
    """Worst relative disagreement between reverse-mode and central differences.

    ``f`` maps a Tensor to a scalar Tensor. Returns (max_rel_err, flat_index)
    where the relative error uses max(|analytic|, |numeric|, 1) as denominator
    so near-zero gradient entries are judged on absolute error.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")
    x0 = Tensor(np.array(x.data, copy=True), grad_enabled=True)
    with Tape() as tape:
        y = f(x0)
    if y.shape != ():
        raise GradientError(f"finite_diff_check: f must return a scalar, got {y.shape}")
    if tape.knows(y):
        analytic = backward(y, tape).get(x0)
        if analytic is None:
            analytic = np.zeros(x0.shape)
    else:
        analytic = np.zeros(x0.shape)  # f ignored x entirely

    flat = x0.data.ravel()
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        fp = f(_wrap(bumped.reshape(x0.shape))).item()
        bumped[i] = flat[i] - h
        fm = f(_wrap(bumped.reshape(x0.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * h)

    a = analytic.ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1.0)
    rel = np.abs(a - numeric) / denom
    idx = int(np.argmax(rel))
    return float(rel[idx]), idx
