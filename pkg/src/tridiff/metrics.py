"""Evaluation harness: retrieval, distributional distance, condition
consistency, and attribute probing.

The feature space for distributional comparison is the frozen alignment
latent space, so generated and real samples are compared where the
model's own conditioning lives.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import nn
from . import tensor as T
from .data import N_BINS, N_FACTORS, ModalitySample, concept_bins
from .encoders import encode_batch
from .optim import Adam
from .tensor import Tensor

EIG_CLAMP_TOL = 1e-10


def retrieval_accuracy(queries: np.ndarray, gallery: np.ndarray, k: int = 1) -> float:
    """Top-k retrieval by cosine; query i's true partner is gallery i."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or q.shape != g.shape:
        raise ValueError(f"queries {q.shape} and gallery {g.shape} must match (n, d)")
    n = q.shape[0]
    if n < 1:
        raise ValueError("retrieval_accuracy: empty inputs")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    scores = qn @ gn.T
    # stable descending order makes ties deterministic
    order = np.argsort(-scores, axis=1, kind="stable")
    hits = (order[:, :k] == np.arange(n)[:, None]).any(axis=1)
    return float(hits.mean())


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    neg = vals[vals < 0.0]
    if neg.size and abs(float(neg.min())) > EIG_CLAMP_TOL * max(1.0, float(np.abs(vals).max())):
        warnings.warn(
            f"covariance eigenvalue {float(neg.min()):.3e} clamped to 0 "
            "(beyond the clamping tolerance)", RuntimeWarning, stacklevel=3)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
    square root taken through the symmetric eigendecomposition of
    S_a^{1/2} S_b S_a^{1/2} and eigenvalues clamped at zero. Arguments
    are ordered canonically before computing, so the result is exactly
    symmetric. Each set needs at least d+1 rows for a full-rank
    covariance estimate.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be (n, d) with equal d: {a.shape}, {b.shape}")
    d = a.shape[1]
    for name, x in (("first", a), ("second", b)):
        if x.shape[0] < d + 1:
            raise ValueError(
                f"{name} feature set has {x.shape[0]} rows; need at least d+1={d + 1}")
    if a.tobytes() > b.tobytes():
        a, b = b, a
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False, ddof=1)
    cov_b = np.cov(b, rowvar=False, ddof=1)
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigh((inner + inner.T) / 2.0)[0]
    neg = vals[vals < 0.0]
    if neg.size and abs(float(neg.min())) > EIG_CLAMP_TOL * max(1.0, float(np.abs(vals).max())):
        warnings.warn(
            f"product eigenvalue {float(neg.min()):.3e} clamped to 0 "
            "(beyond the clamping tolerance)", RuntimeWarning, stacklevel=2)
    tr_root = 2.0 * float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = mu_a - mu_b
    fd = float(diff @ diff) + float(np.trace(cov_a) + np.trace(cov_b)) - tr_root
    return max(fd, 0.0)


def condition_consistency(generated: list[ModalitySample],
                          conditions: list, encoders: dict) -> float:
    """Mean cosine between re-encoded outputs and their condition latents."""
    if not generated or len(generated) != len(conditions):
        raise ValueError("need equally many generated samples and conditions")
    cos = []
    with T.no_grad():
        for g, c in zip(generated, conditions):
            z = encode_batch(encoders[g.modality], [g]).data[0].astype(np.float64)
            v = np.asarray(c.v, dtype=np.float64)
            cos.append(float(z @ v / (np.linalg.norm(z) * np.linalg.norm(v))))
    return float(np.mean(cos))


# ---------------------------------------------------------------------------
# attribute probe
# ---------------------------------------------------------------------------

class ProbeClassifier(nn.Module):
    """Frozen-after-training MLP from a continuous payload to factor bins."""

    def __init__(self, modality: str, rng: np.random.Generator, hidden: int = 64):
        if modality not in ("image", "audio"):
            raise ValueError("probe supports continuous payloads (image/audio); "
                             "text is scored by token identity")
        dim = {"image": 256, "audio": 64}[modality]
        self.fc1 = nn.Linear(dim, hidden, rng)
        self.fc2 = nn.Linear(hidden, N_FACTORS * N_BINS, rng)
        self._modality = modality

    @property
    def modality(self) -> str:
        return self._modality

    def logits(self, payloads: np.ndarray) -> Tensor:
        """(B, payload_dim) -> (B * n_factors, n_bins) bin logits."""
        x = T.const(payloads.astype(np.float32), dtype=np.float32)
        h = self.fc2(T.silu(self.fc1(x)))
        return T.reshape(h, (payloads.shape[0] * N_FACTORS, N_BINS))


def _flat_payloads(samples: list[ModalitySample]) -> np.ndarray:
    return np.stack([s.payload.reshape(-1).astype(np.float32) for s in samples])


def train_probe(modality: str, samples: list[ModalitySample],
                concepts: np.ndarray, rng: np.random.Generator,
                steps: int = 300, batch: int = 64, lr: float = 3e-3) -> ProbeClassifier:
    """Fit the probe on real rendered samples, then freeze it."""
    probe = ProbeClassifier(modality, rng)
    X = _flat_payloads(samples)
    bins = concept_bins(concepts)
    opt = Adam(probe.parameters(), lr=lr)
    n = X.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch, n))
        logits = probe.logits(X[idx])
        onehot = np.zeros((idx.size * N_FACTORS, N_BINS), dtype=np.float32)
        onehot[np.arange(idx.size * N_FACTORS), bins[idx].reshape(-1)] = 1.0
        lse = T.logsumexp(logits)
        picked = T.tsum(T.mul(logits, T.const(onehot, dtype=np.float32)), axis=-1)
        loss = T.tmean(T.sub(lse, picked))
        opt.step(T.backward(loss, opt.params))
    probe.freeze()
    return probe


def probe_accuracy(probe: ProbeClassifier, samples: list[ModalitySample],
                   target_bins: np.ndarray) -> float:
    """Mean per-attribute bin accuracy of generated payloads.

    `target_bins` is the (n, 8) bin matrix of the conditioning concepts.
    An empty sample list is an error, not a vacuous pass.
    """
    if not samples:
        raise ValueError("probe_accuracy: empty sample list")
    target_bins = np.asarray(target_bins)
    if target_bins.shape != (len(samples), N_FACTORS):
        raise ValueError(
            f"target_bins shape {target_bins.shape} != ({len(samples)}, {N_FACTORS})")
    for s in samples:
        if s.modality != probe.modality:
            raise ValueError(f"probe for '{probe.modality}' got '{s.modality}'")
    with T.no_grad():
        logits = probe.logits(_flat_payloads(samples)).data
    pred = logits.reshape(len(samples), N_FACTORS, N_BINS).argmax(axis=-1)
    return float((pred == target_bins).mean())


def text_bin_accuracy(samples: list[ModalitySample], target_bins: np.ndarray) -> float:
    """Token-level analogue of the probe for generated text payloads."""
    from .data import attribute_token
    if not samples:
        raise ValueError("text_bin_accuracy: empty sample list")
    target_bins = np.asarray(target_bins)
    hits = []
    for s, bins in zip(samples, target_bins):
        want = np.array([attribute_token(k, bins[k]) for k in range(N_FACTORS)])
        got = s.payload[1:1 + N_FACTORS]
        hits.append((got == want).astype(np.float64))
    return float(np.mean(hits))
