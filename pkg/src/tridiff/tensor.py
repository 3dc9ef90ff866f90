"""Reverse-mode autodiff over dense numpy arrays.

The engine records every primitive application as a node in an implicit
graph (each output tensor keeps references to its parents and a closure
that maps the output adjoint to parent adjoints). `backward` walks that
graph once in reverse topological order and returns gradients for the
requested leaf parameters.

Conventions:
  * float32 is the training dtype, float64 the verification dtype.
    Operands of a primitive must share a dtype; there is no promotion.
  * No broadcasting except scalar-with-tensor (a scalar is shape ()).
    All other shape alignment is explicit at the call site.
  * Primitives never mutate their inputs; outputs own their storage.
  * Every primitive output is checked for NaN/Inf and raises
    NumericFaultError on the first non-finite value.
  * Graph recording is controlled by a process-global flag (see
    `no_grad`); recording is single-threaded by contract.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class NumericFaultError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward called on something that is not a scalar graph output."""


_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording.

    Forward values are still computed and finiteness-checked; the outputs
    simply carry no parents, so they are constants to any later backward.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense row-major array plus graph bookkeeping."""

    __slots__ = ("data", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf",
                 parents: tuple = ()):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, op="leaf")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op!r})"

    # Operator sugar; scalars are wrapped as constants of matching dtype.
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), op="const")


def const(x, dtype=np.float32) -> Tensor:
    """Graph constant (no gradient ever flows into it)."""
    return Tensor(np.asarray(x, dtype=dtype), op="const")


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFaultError(f"non-finite value produced by primitive '{op}'")


def _node(out: np.ndarray, op: str, parents: tuple, backward_fn) -> Tensor:
    _check_finite(out, op)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        t = Tensor(out, requires_grad=True, op=op, parents=parents)
        t._backward = backward_fn
        return t
    return Tensor(out, requires_grad=False, op=op)


def _same_dtype(op: str, *ts: Tensor) -> None:
    d0 = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d0:
            raise ShapeError(f"{op}: mixed dtypes {d0.name} and {t.dtype.name}")


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    # Adjoint of the scalar-with-tensor case: the scalar operand
    # receives the full sum of the incoming adjoint.
    if shape == () and grad.shape != ():
        return np.asarray(grad.sum(), dtype=grad.dtype)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    _binary_shapes("add", a, b)

    def bwd(g):
        return (_reduce_to(g, a.shape), _reduce_to(g, b.shape))

    return _node(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("sub", a, b)
    _binary_shapes("sub", a, b)

    def bwd(g):
        return (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))

    return _node(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (same shape) or scalar-with-tensor product."""
    _same_dtype("mul", a, b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape))

    return _node(ad * bd, "mul", (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return (g @ bd.T, ad.T @ g)

    return _node(ad @ bd, "matmul", (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape

    def bwd(g):
        return (np.ascontiguousarray(g).reshape(old),)

    return _node(a.data.reshape(shape).copy(), "reshape", (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    _same_dtype("concat", *tensors)
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise ShapeError("concat: rank mismatch")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(out, "concat", tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis` starting at `start`."""
    dim = a.shape[axis]
    if start < 0 or length < 0 or start + length > dim:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _node(a.data[idx].copy(), "slice", (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    """2-D transpose; its own adjoint."""
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: operand must be 2-D, got {a.shape}")

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return _node(np.ascontiguousarray(a.data.T), "transpose", (a,), bwd)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def bwd(g):
            return (np.full(a.shape, g, dtype=a.dtype),)

        return _node(np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,), bwd)

    def bwd_axis(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=True),)

    return _node(a.data.sum(axis=axis), "sum", (a,), bwd_axis)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size

        def bwd(g):
            return (np.full(a.shape, g / n, dtype=a.dtype),)

        return _node(np.asarray(a.data.mean(), dtype=a.dtype), "mean", (a,), bwd)

    n = a.shape[axis]

    def bwd_axis(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).astype(a.dtype, copy=True),)

    return _node(a.data.mean(axis=axis), "mean", (a,), bwd_axis)


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis, max-shifted for stability."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, "softmax", (a,), bwd)


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, max-shifted; adjoint is softmax."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m).reshape(x.shape[:-1])
    soft = e / s

    def bwd(g):
        return (soft * np.expand_dims(g, -1),)

    return _node(out, "logsumexp", (a,), bwd)


LAYER_NORM_EPS = 1e-5


def layer_norm(a: Tensor) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LAYER_NORM_EPS, dtype=x.dtype))
    out = xc * inv
    n = x.shape[-1]

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    del n
    return _node(out, "layer_norm", (a,), bwd)


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def bwd(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _node(out, "silu", (a,), bwd)


def sine(a: Tensor) -> Tensor:
    x = a.data

    def bwd(g):
        return (g * np.cos(x),)

    return _node(np.sin(x), "sine", (a,), bwd)


def cosine(a: Tensor) -> Tensor:
    x = a.data

    def bwd(g):
        return (-g * np.sin(x),)

    return _node(np.cos(x), "cosine", (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out),)

    return _node(out, "sqrt", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _node(out, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    x = a.data

    def bwd(g):
        return (g / x,)

    return _node(np.log(x), "log", (a,), bwd)


L2_EPS = 1e-12


def l2_normalize(a: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm.

    A tiny epsilon guards the degenerate all-zero row; for any input of
    practical magnitude the output norm is 1 to float precision.
    """
    x = a.data
    sq = (x * x).sum(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(sq + np.asarray(L2_EPS, dtype=x.dtype))
    out = x * inv

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (inv * (g - out * dot),)

    return _node(out, "l2_normalize", (a,), bwd)


# Registry used by the finite-difference sweep. Each entry maps a name to
# (fn, arity, input_domain) where input_domain constrains sampling:
# "any" for smooth-everywhere primitives, "positive" where the derivative
# blows up at zero (sqrt, log), "row" where rows must stay away from the
# zero vector (l2_normalize). There are no kinked primitives in the set;
# domain restrictions are the only sampling exclusions.
PRIMITIVES = {
    "add": (add, 2, "any"),
    "sub": (sub, 2, "any"),
    "mul": (mul, 2, "any"),
    "scalar_mul": (lambda a, s: mul(a, s), 2, "scalar_second"),
    "matmul": (matmul, 2, "matmul"),
    "transpose": (transpose, 1, "matrix"),
    "reshape": (lambda a: reshape(a, (a.size,)), 1, "any"),
    "concat": (lambda a, b: concat([a, b], axis=0), 2, "any"),
    "slice": (lambda a: narrow(a, 0, 1, max(1, a.shape[0] - 1)), 1, "any"),
    "sum": (tsum, 1, "any"),
    "sum_axis": (lambda a: tsum(a, axis=-1), 1, "any"),
    "mean": (tmean, 1, "any"),
    "mean_axis": (lambda a: tmean(a, axis=-1), 1, "any"),
    "softmax": (softmax, 1, "any"),
    "logsumexp": (logsumexp, 1, "any"),
    "layer_norm": (layer_norm, 1, "any"),
    "silu": (silu, 1, "any"),
    "sine": (sine, 1, "any"),
    "cosine": (cosine, 1, "any"),
    "sqrt": (sqrt, 1, "positive"),
    "exp": (exp, 1, "any"),
    "log": (log, 1, "positive"),
    "l2_normalize": (l2_normalize, 1, "row"),
}


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> dict:
    """Gradients of a scalar loss w.r.t. leaf tensors.

    Visits every reachable node exactly once. Returns a dict keyed by
    Tensor identity. When `params` is given, the result has an entry for
    each (zeros for parameters the loss does not reach, which is the
    documented behavior for detached parameters); otherwise all reachable
    requires_grad leaves are returned.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(np.broadcast_to(g, node.shape) if g.shape != node.shape else g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not (p.requires_grad or p._backward is not None):
                continue
            pid = id(p)
            by_id[pid] = p
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg)

    if params is None:
        return {
            by_id[i]: g for i, g in grads.items()
            if by_id[i].parents == () and by_id[i].requires_grad
        }
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = np.zeros(p.shape, dtype=p.dtype) if g is None else np.broadcast_to(g, p.shape).astype(p.dtype, copy=True) if g.shape != p.shape else g
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor. The error at each coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12); the maximum
    over coordinates is returned. Run in float64 for meaningful bounds.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    analytic = backward(f(x64), [x64])[x64]
    numeric = np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x64).item()
            flat[i] = orig - eps
            lo = f(x64).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * eps)
    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
