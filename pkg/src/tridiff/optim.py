"""Bias-corrected Adam over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Standard Adam with bias correction.

    Parameters are updated in place (the only sanctioned mutation of
    tensor storage in the package). A parameter whose gradient is absent
    or zero is left bit-identical: zero first and second moments give a
    zero update regardless of the epsilon guard.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        ids = set()
        for p in self.params:
            if id(p) in ids:
                raise ValueError("Adam: duplicate parameter")
            ids.add(id(p))
        self._ids = ids
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def owns(self, p: Tensor) -> bool:
        return id(p) in self._ids

    def step(self, grads: dict) -> None:
        """Apply one update from a {tensor: gradient array} map."""
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape, dtype=np.float64)
            g = np.asarray(g, dtype=np.float64)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.data -= upd.astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers plus step count, for checkpointing."""
        out = {"adam.t": np.asarray([self.t], dtype=np.int64)}
        for i in range(len(self.params)):
            out[f"adam.m.{i}"] = self.m[i]
            out[f"adam.v.{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for i in range(len(self.params)):
            self.m[i] = np.asarray(arrays[f"adam.m.{i}"], dtype=np.float64).copy()
            self.v[i] = np.asarray(arrays[f"adam.v.{i}"], dtype=np.float64).copy()
