"""Shared fixtures-in-plain-code for the test suite.

Two jobs live here: the finite-difference sweep over the primitive
registry (used by both the module tests and the acceptance gate, at
different trial counts) and a miniature end-to-end loss assembled from
the same primitives in float64, so the full chain rule can be checked
against central differences at a meaningful tolerance.
"""

from __future__ import annotations

import hashlib

import numpy as np

from tridiff import tensor as T
from tridiff.config import RunConfig
from tridiff.tensor import Tensor, grad_check


def sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _draw(domain: str, rng: np.random.Generator, shape=(3, 4)) -> np.ndarray:
    if domain == "positive":
        return 0.5 + np.abs(rng.standard_normal(shape))
    if domain == "row":
        # keep every row well away from the zero vector
        return rng.uniform(0.3, 1.5, shape) * rng.choice([-1.0, 1.0], shape)
    return rng.standard_normal(shape)


def _scalarize(out_shape, rng: np.random.Generator):
    """Random linear functional so the FD loss sees every output coordinate."""
    w = rng.standard_normal(out_shape) if out_shape else rng.standard_normal(())
    wt = T.const(np.asarray(w, dtype=np.float64), dtype=np.float64)

    def reduce(t: Tensor) -> Tensor:
        return T.tsum(T.mul(t, wt))

    return reduce


def primitive_fd_sweep(trials_per_case: int, seed: int = 0,
                       tol: float = 1e-4) -> tuple[int, float, dict]:
    """Run central-difference checks over every registry entry.

    Binary primitives are checked once per operand. Returns the total
    number of grad_check calls, the worst relative error seen, and a
    per-case map of maxima. Raises nothing itself; callers assert.
    """
    rng = np.random.default_rng(seed)
    total = 0
    worst = 0.0
    per_case: dict[str, float] = {}
    for name, (fn, arity, domain) in T.PRIMITIVES.items():
        for trial in range(trials_per_case):
            if arity == 1:
                x = Tensor(_draw(domain, rng))
                probe = fn(Tensor(x.data.astype(np.float64)))
                reduce = _scalarize(probe.shape, rng)
                cases = [(f"{name}", lambda v, fn=fn, r=reduce: r(fn(v)), x)]
            elif domain == "matmul":
                a = Tensor(rng.standard_normal((3, 4)))
                b = Tensor(rng.standard_normal((4, 2)))
                a64 = T.const(a.data.astype(np.float64), dtype=np.float64)
                b64 = T.const(b.data.astype(np.float64), dtype=np.float64)
                reduce = _scalarize((3, 2), rng)
                cases = [
                    (f"{name}[0]", lambda v, r=reduce, c=b64: r(fn(v, c)), a),
                    (f"{name}[1]", lambda v, r=reduce, c=a64: r(fn(c, v)), b),
                ]
            elif domain == "scalar_second":
                a = Tensor(rng.standard_normal((3, 4)))
                s = Tensor(np.asarray(rng.standard_normal()))
                a64 = T.const(a.data.astype(np.float64), dtype=np.float64)
                s64 = T.const(np.asarray(float(s.data)), dtype=np.float64)
                reduce = _scalarize((3, 4), rng)
                cases = [
                    (f"{name}[0]", lambda v, r=reduce, c=s64: r(fn(v, c)), a),
                    (f"{name}[1]", lambda v, r=reduce, c=a64: r(fn(c, v)), s),
                ]
            else:
                a = Tensor(_draw(domain, rng))
                b = Tensor(_draw(domain, rng))
                b64 = T.const(b.data.astype(np.float64), dtype=np.float64)
                a64 = T.const(a.data.astype(np.float64), dtype=np.float64)
                probe = fn(Tensor(a.data.astype(np.float64)),
                           Tensor(b.data.astype(np.float64)))
                reduce = _scalarize(probe.shape, rng)
                cases = [
                    (f"{name}[0]", lambda v, r=reduce, c=b64: r(fn(v, c)), a),
                    (f"{name}[1]", lambda v, r=reduce, c=a64: r(fn(c, v)), b),
                ]
            for label, f, x in cases:
                err = grad_check(f, x)
                total += 1
                per_case[label] = max(per_case.get(label, 0.0), err)
                worst = max(worst, err)
    return total, worst, per_case


class MiniatureNet:
    """Tiny attention pipeline in float64, assembled straight from primitives.

    Two samples of four tokens run through embedding, positions, one
    masked-attention block, an MLP with residual, pooling, a unit-norm
    projection and a decode head; the loss is a noise-prediction MSE plus
    a softmax cross-entropy on the pooled logits. Every parameter of the
    chain is exposed for finite-difference checking.
    """

    B, L, DIN, W, DLAT = 2, 4, 3, 6, 5

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        n = self.B * self.L
        self.x = np.asarray(rng.standard_normal((n, self.DIN)), dtype=np.float64)
        self.target = np.asarray(rng.standard_normal((n, self.DIN)), dtype=np.float64)
        self.labels = np.zeros((self.B, self.DLAT))
        self.labels[np.arange(self.B), rng.integers(0, self.DLAT, self.B)] = 1.0
        mask = np.full((n, n), -1e9)
        for i in range(self.B):
            mask[i * self.L:(i + 1) * self.L, i * self.L:(i + 1) * self.L] = 0.0
        self.mask = mask
        pool = np.zeros((self.B, n))
        for i in range(self.B):
            pool[i, i * self.L:(i + 1) * self.L] = 1.0 / self.L
        self.pool = pool
        self.tile = np.tile(np.eye(self.L), (self.B, 1))
        p = lambda *shape: Tensor(rng.standard_normal(shape) * 0.3, requires_grad=True)
        self.params = {
            "we": p(self.DIN, self.W), "pos": p(self.L, self.W),
            "wq": p(self.W, self.W), "wk": p(self.W, self.W), "wv": p(self.W, self.W),
            "w1": p(self.W, 2 * self.W), "w2": p(2 * self.W, self.W),
            "wp": p(self.W, self.DLAT), "wd": p(self.W, self.DIN),
            "log_tau": Tensor(np.asarray(-1.0), requires_grad=True),
        }

    def loss(self, override: dict | None = None) -> Tensor:
        q = dict(self.params)
        if override:
            q.update(override)
        c = lambda a: T.const(np.asarray(a, dtype=np.float64), dtype=np.float64)
        h = T.add(T.matmul(c(self.x), q["we"]), T.matmul(c(self.tile), q["pos"]))
        qq = T.matmul(h, q["wq"])
        kk = T.matmul(h, q["wk"])
        vv = T.matmul(h, q["wv"])
        scores = T.add(T.mul(T.matmul(qq, T.transpose(kk)),
                             c(1.0 / np.sqrt(self.W))), c(self.mask))
        h = T.layer_norm(T.add(h, T.matmul(T.softmax(scores), vv)))
        mlp = T.matmul(T.silu(T.matmul(h, q["w1"])), q["w2"])
        h = T.layer_norm(T.add(h, mlp))
        z = T.l2_normalize(T.matmul(T.matmul(c(self.pool), h), q["wp"]))
        logits = T.mul(z, T.exp(T.mul(q["log_tau"], c(-1.0))))
        ce = T.tmean(T.sub(T.logsumexp(logits),
                           T.tsum(T.mul(logits, c(self.labels)), axis=-1)))
        diff = T.sub(T.matmul(h, q["wd"]), c(self.target))
        return T.add(T.tmean(T.mul(diff, diff)), ce)

    def fd_check_all(self) -> dict[str, float]:
        out = {}
        for name, p in self.params.items():
            out[name] = grad_check(lambda v, n=name: self.loss({n: v}), p)
        return out


def tiny_config(seed: int = 0) -> RunConfig:
    """Budgets small enough for CLI and pipeline plumbing tests.

    Eval sizes stay above the d+1 = 33 floor the distribution metric
    needs; everything else is cut to a few steps.
    """
    cfg = RunConfig()
    cfg.seed = seed
    cfg.data.n_unimodal = 64
    cfg.data.n_paired = 40
    cfg.data.n_test = 40
    cfg.mae.steps = 3
    cfg.mae.batch = 8
    cfg.align.anchor_steps = 3
    cfg.align.finetune_steps = 3
    cfg.align.batch = 8
    cfg.diffusion.timesteps = 10
    cfg.diffusion.train_steps = 3
    cfg.diffusion.batch = 4
    cfg.sample.n_samples = 4
    cfg.eval.n_eval = 36
    cfg.eval.probe_steps = 5
    return cfg
