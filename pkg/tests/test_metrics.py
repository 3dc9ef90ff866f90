"""Evaluation metrics: retrieval, distribution distance, the attribute
probe, and condition consistency."""

from __future__ import annotations

import numpy as np
import pytest

from tridiff.data import (N_FACTORS, attribute_token, build_dataset,
                          concept_bins, render_text)
from tridiff.encoders import encode_batch, make_encoders
from tridiff.metrics import (ProbeClassifier, condition_consistency,
                             frechet_distance, probe_accuracy,
                             retrieval_accuracy, text_bin_accuracy,
                             train_probe)
from tridiff.rng import philox


def test_retrieval_identity_is_perfect():
    q = np.eye(8)
    assert retrieval_accuracy(q, q) == 1.0
    assert retrieval_accuracy(q, q, k=3) == 1.0


def test_retrieval_random_is_near_chance():
    rng = philox(0, 0)
    q = rng.standard_normal((100, 32))
    g = rng.standard_normal((100, 32))
    acc = retrieval_accuracy(q, g)
    assert acc < 0.08, f"chance-level retrieval came out at {acc}"


def test_retrieval_scale_invariance():
    rng = philox(1, 0)
    q = rng.standard_normal((20, 8))
    g = q + 0.01 * rng.standard_normal((20, 8))
    assert retrieval_accuracy(q, g) == retrieval_accuracy(3.0 * q, 0.5 * g)


def test_retrieval_validation():
    q = np.eye(4)
    with pytest.raises(ValueError):
        retrieval_accuracy(q, np.eye(5))
    with pytest.raises(ValueError):
        retrieval_accuracy(q, q, k=0)
    with pytest.raises(ValueError):
        retrieval_accuracy(q, q, k=5)


def test_frechet_self_distance_vanishes():
    x = philox(2, 0).standard_normal((200, 6))
    assert frechet_distance(x, x) <= 1e-6


def test_frechet_exactly_symmetric():
    rng = philox(3, 0)
    a = rng.standard_normal((50, 5))
    b = 1.5 * rng.standard_normal((60, 5)) + 0.3
    assert frechet_distance(a, b) == frechet_distance(b, a)


def test_frechet_mean_shift_closed_form():
    # same covariance, means apart by mu: the distance is |mu|^2
    rng = philox(4, 0)
    n, d = 10_000, 4
    mu = np.asarray([1.0, -0.5, 2.0, 0.25])
    a = rng.standard_normal((n, d))
    b = rng.standard_normal((n, d)) + mu
    want = float(mu @ mu)
    got = frechet_distance(a, b)
    assert abs(got - want) / want < 0.05, f"{got} vs {want}"


def test_frechet_variance_scaling_closed_form():
    # N(0, I) vs N(0, 4I) in d dims: trace term d * (1 + 4 - 2*2) = d
    rng = philox(5, 0)
    n, d = 10_000, 4
    a = rng.standard_normal((n, d))
    b = 2.0 * rng.standard_normal((n, d))
    got = frechet_distance(a, b)
    assert abs(got - d) / d < 0.1, f"{got} vs {d}"


def test_frechet_needs_full_rank_sample():
    with pytest.raises(ValueError, match="d\\+1"):
        frechet_distance(np.zeros((4, 4)), np.zeros((10, 4)))
    with pytest.raises(ValueError):
        frechet_distance(np.zeros((10, 3)), np.zeros((10, 4)))


@pytest.fixture(scope="module")
def probe_world():
    ds = build_dataset(500, 80, 40, seed=21)
    uni = ds.indices("train-unimodal")
    samples = [ds.samples["image"][int(i)] for i in uni]
    concepts = ds.concepts[uni]
    probe = train_probe("image", samples, concepts, philox(21, 1), steps=300)
    return ds, probe


def test_probe_reads_bins_off_real_payloads(probe_world):
    ds, probe = probe_world
    test_idx = ds.indices("test")
    samples = [ds.samples["image"][int(i)] for i in test_idx]
    bins = concept_bins(ds.concepts[test_idx])
    acc = probe_accuracy(probe, samples, bins)
    assert acc >= 0.9, f"probe accuracy on held-out real payloads: {acc}"


def test_probe_is_at_chance_on_noise(probe_world):
    ds, probe = probe_world
    rng = philox(22, 0)
    fakes = [type(s)("image", rng.uniform(-1, 1, (16, 16)).astype(np.float32))
             for s in [ds.samples["image"][0]] * 40]
    bins = concept_bins(ds.concepts[ds.indices("test")])
    acc = probe_accuracy(probe, fakes, bins)
    assert 0.1 < acc < 0.45, f"expected near 1/4 chance, got {acc}"


def test_probe_validation(probe_world):
    ds, probe = probe_world
    with pytest.raises(ValueError):
        ProbeClassifier("text", philox(0, 0))
    with pytest.raises(ValueError, match="empty"):
        probe_accuracy(probe, [], np.zeros((0, N_FACTORS)))
    s = ds.samples["image"][0]
    with pytest.raises(ValueError):
        probe_accuracy(probe, [s], np.zeros((2, N_FACTORS)))
    with pytest.raises(ValueError):
        probe_accuracy(probe, [ds.samples["audio"][0]],
                       np.zeros((1, N_FACTORS)))


def test_probe_logits_shape(probe_world):
    _, probe = probe_world
    out = probe.logits(np.zeros((3, 256), dtype=np.float32))
    assert out.shape == (3 * N_FACTORS, 4)


def test_text_bin_accuracy_exact_counting():
    rng = philox(6, 0)
    concepts = [rng.uniform(-1, 1, N_FACTORS) for _ in range(5)]
    samples = [render_text(c) for c in concepts]
    bins = concept_bins(np.stack(concepts))
    assert text_bin_accuracy(samples, bins) == 1.0
    # corrupt a single attribute slot in one sample
    samples[2].payload[3] = attribute_token(2, (bins[2][2] + 1) % 4)
    got = text_bin_accuracy(samples, bins)
    assert abs(got - (1.0 - 1.0 / (5 * N_FACTORS))) < 1e-12


def test_condition_consistency_perfect_match():
    ds = build_dataset(6, 3, 2, seed=7)
    encs = make_encoders(philox(7, 0))
    for e in encs.values():
        e.freeze()
    samples = ds.samples["image"][:4]
    z = encode_batch(encs["image"], samples).data
    conds = [type("C", (), {"v": z[i]})() for i in range(4)]
    val = condition_consistency(samples, conds, encs)
    assert abs(val - 1.0) < 1e-6
    with pytest.raises(ValueError):
        condition_consistency(samples, conds[:2], encs)
    with pytest.raises(ValueError):
        condition_consistency([], [], encs)
