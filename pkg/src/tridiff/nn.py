"""Small module system: parameter containers and layers over the autodiff core.

Batching convention: a batch of B token sequences of length T and width D
is laid out as a single (B*T, D) matrix. Per-sample structure (attention
scope, pooling, per-sample bias rows) is expressed through constant
matrices built by the helpers at the bottom, so every layer stays inside
the primitive set (2-D matmul, elementwise ops, softmax, ...).
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Container whose tensor-valued attributes are trainable parameters.

    Traversal covers Tensor attributes, nested Modules, and lists/dicts
    of either, in deterministic attribute order.
    """

    def named_parameters(self, prefix: str = ""):
        for name in self._attr_order():
            obj = getattr(self, name)
            yield from _walk(prefix + name, obj)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def _attr_order(self):
        return [k for k in self.__dict__ if not k.startswith("_")]

    def freeze(self):
        for _, p in self.named_parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for _, p in self.named_parameters():
            p.requires_grad = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ValueError(f"state '{name}': shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def digest(self) -> str:
        """SHA-256 over all parameters in name order (shape, dtype, raw bytes)."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(str(p.shape).encode())
            h.update(p.dtype.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _walk(name, obj):
    if isinstance(obj, Tensor):
        yield name, obj
    elif isinstance(obj, Module):
        yield from obj.named_parameters(name + ".")
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(f"{name}.{i}", item)
    elif isinstance(obj, dict):
        for k in obj:
            yield from _walk(f"{name}.{k}", obj[k])


def copy_params_into(dst: Module, src: Module) -> None:
    """Bit-copy src parameters into dst (matching names and shapes)."""
    dst.load_state_dict(src.state_dict())


def param(shape, rng: np.random.Generator, scale: float | None = None,
          dtype=np.float32) -> Tensor:
    """Gaussian-initialized trainable tensor; default scale is 1/sqrt(fan_in)."""
    shape = tuple(shape)
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        scale = 1.0 / np.sqrt(max(1, fan_in))
    data = rng.standard_normal(shape) * scale
    return Tensor(data.astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    """y = x @ W + b with W of shape (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, scale: float | None = None, dtype=np.float32):
        self.w = param((d_in, d_out), rng, scale=scale, dtype=dtype)
        self.b = zeros_param((d_out,), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = T.add(y, tile_rows(self.b, y.shape[0]))
        return y


class ZeroLinear(Module):
    """1x1 projection with weight and bias exactly zero at construction.

    Applied tokenwise over channels; the zero init guarantees the layer
    contributes nothing until trained, while d(Wx)/dW = x keeps its
    gradient alive from the first step.
    """

    def __init__(self, width: int, dtype=np.float32):
        self.w = zeros_param((width, width), dtype=dtype)
        self.b = zeros_param((width,), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), tile_rows(self.b, x.shape[0]))


class LayerNorm(Module):
    """Last-axis normalization with learned gain and bias."""

    def __init__(self, width: int, dtype=np.float32):
        self.gain = Tensor(np.ones((width,), dtype=dtype), requires_grad=True)
        self.bias = zeros_param((width,), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        y = T.layer_norm(x)
        y = T.mul(y, tile_rows(self.gain, n))
        return T.add(y, tile_rows(self.bias, n))


class MLP(Module):
    """Linear -> SiLU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype=dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


# ---------------------------------------------------------------------------
# constant structure matrices (cached per shape/dtype)
# ---------------------------------------------------------------------------

_cache: dict = {}


def _cached(key, build):
    hit = _cache.get(key)
    if hit is None:
        hit = T.const(build(), dtype=key[-1])
        _cache[key] = hit
    return hit


def tile_rows(vec: Tensor, n: int) -> Tensor:
    """Stack a (D,) vector into n identical rows, in-graph."""
    ones = _cached(("ones", n, vec.dtype.name, vec.dtype), lambda: np.ones((n, 1)))
    return T.matmul(ones, T.reshape(vec, (1, vec.shape[0])))


def expand_per_sample(x: Tensor, batch: int, length: int) -> Tensor:
    """Repeat each of `batch` rows `length` times: (B, D) -> (B*L, D)."""

    def build():
        m = np.zeros((batch * length, batch))
        for i in range(batch):
            m[i * length:(i + 1) * length, i] = 1.0
        return m

    return T.matmul(_cached(("expand", batch, length, x.dtype), build), x)


def pool_per_sample(x: Tensor, batch: int, length: int) -> Tensor:
    """Mean over each sample's rows: (B*L, D) -> (B, D)."""

    def build():
        m = np.zeros((batch, batch * length))
        for i in range(batch):
            m[i, i * length:(i + 1) * length] = 1.0 / length
        return m

    return T.matmul(_cached(("pool", batch, length, x.dtype), build), x)


def halve_rows(x: Tensor, batch: int, length: int) -> Tensor:
    """Average adjacent row pairs within each sample: (B*L, D) -> (B*L/2, D)."""
    if length % 2 != 0:
        raise T.ShapeError(f"halve_rows: odd per-sample length {length}")

    def build():
        m = np.zeros((batch * length // 2, batch * length))
        for r in range(batch * length // 2):
            m[r, 2 * r] = 0.5
            m[r, 2 * r + 1] = 0.5
        return m

    return T.matmul(_cached(("halve", batch, length, x.dtype), build), x)


def double_rows(x: Tensor, batch: int, length: int) -> Tensor:
    """Repeat every row twice in place: (B*L, D) -> (B*2L, D)."""

    def build():
        m = np.zeros((batch * length * 2, batch * length))
        for r in range(batch * length):
            m[2 * r, r] = 1.0
            m[2 * r + 1, r] = 1.0
        return m

    return T.matmul(_cached(("double", batch, length, x.dtype), build), x)


ATTENTION_MASK_FILL = -1e9


def block_attention_mask(batch: int, length: int, dtype) -> Tensor:
    """(B*T, B*T) additive mask: 0 within a sample's block, -1e9 across.

    After max-shifted softmax the cross-sample weights underflow to exact
    zero, so batched attention matches per-sample attention scope.
    """

    def build():
        m = np.full((batch * length, batch * length), ATTENTION_MASK_FILL)
        for i in range(batch):
            m[i * length:(i + 1) * length, i * length:(i + 1) * length] = 0.0
        return m

    return _cached(("attnmask", batch, length, np.dtype(dtype)), build)
