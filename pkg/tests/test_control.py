"""Control branch: no-harm at attachment, exact fusion algebra, the
single-condition bypass, and gradient flow through the zero projections."""

from __future__ import annotations

import numpy as np
import pytest

from tridiff import tensor as T
from tridiff.control import (COPIED_SUBMODULES, compound_denoise,
                             control_forward, copied_digest, denoise, fuse,
                             init_control_branch)
from tridiff.denoiser import ConditionalDenoiser, default_config, unet_forward
from tridiff.rng import philox
from tridiff.tensor import Tensor


def _base(modality="audio", seed=0, live_output=True):
    m = ConditionalDenoiser(default_config(modality), philox(seed, 0))
    if live_output:
        # fresh models output exactly zero; give the head signal so
        # no-harm comparisons are not trivially 0 == 0
        m.out_proj.w.data[:] = 0.02
        m.out_proj.b.data[:] = 0.01
    return m


def test_copied_submodules_match_base_bitwise():
    base = _base()
    ctrl = init_control_branch(base, philox(1, 0))
    assert copied_digest(ctrl) == copied_digest(base)
    assert set(COPIED_SUBMODULES) == {"time_mlp", "cond_mlp", "in_proj",
                                      "enc_blocks", "downs", "mid"}
    # no storage sharing: training the branch must not move the base
    ctrl.in_proj.w.data += 1.0
    assert copied_digest(ctrl) != copied_digest(base)


def test_attachment_changes_nothing_at_init():
    base = _base()
    ctrl = init_control_branch(base, philox(2, 0))
    rng = philox(3, 0)
    for _ in range(20):
        z = rng.standard_normal((16, 4)).astype(np.float32)
        c = rng.standard_normal(32).astype(np.float32)
        t = int(rng.integers(0, 100))
        alone, _ = unet_forward(base, z, t, c)
        with T.no_grad():
            joint = denoise(base, ctrl, T.const(z, dtype=np.float32),
                            np.asarray([t]),
                            T.const(c.reshape(1, -1), dtype=np.float32),
                            [T.const(c.reshape(1, -1), dtype=np.float32)],
                            scale=0.1, batch=1)
        np.testing.assert_array_equal(joint.data, alone)


def test_control_residuals_zero_at_init_nonzero_after_training_signal():
    base = _base()
    ctrl = init_control_branch(base, philox(4, 0))
    z = T.const(philox(5, 0).standard_normal((16, 4)).astype(np.float32),
                dtype=np.float32)
    c = T.const(philox(5, 1).standard_normal((1, 32)).astype(np.float32),
                dtype=np.float32)
    with T.no_grad():
        residuals = control_forward(ctrl, z, np.asarray([7]), c, batch=1)
    assert all(np.all(r.data == 0.0) for r in residuals)
    # the zero weights still receive gradient: d(Wx)/dW = x != 0
    loss = T.tsum(T.mul(denoise(base, ctrl, z, np.asarray([7]), c, [c],
                               scale=1.0, batch=1), T.const(
                                   np.ones((16, 4), dtype=np.float32),
                                   dtype=np.float32)))
    grads = T.backward(loss, [zp.w for zp in ctrl.zero_projs])
    nonzero = [float(np.abs(g).sum()) > 0 for g in grads.values()]
    assert any(nonzero)


def _dyadic_stack(shapes, rng):
    # small-integer float64 values keep every fuse operation exact
    return [Tensor(rng.integers(-8, 9, s).astype(np.float64)) for s in shapes]


def test_fuse_additivity_and_homogeneity_exact():
    rng = np.random.default_rng(0)
    shapes = [(6, 3), (4, 5)]
    base = _dyadic_stack(shapes, rng)
    sa = _dyadic_stack(shapes, rng)
    sb = _dyadic_stack(shapes, rng)
    out = fuse(base, [sa, sb], scale=0.5, mode="sum")
    for o, b, x, y in zip(out, base, sa, sb):
        np.testing.assert_array_equal(o.data, b.data + 0.5 * (x.data + y.data))
    # mean over two stacks at scale s equals sum at s/2
    mean_out = fuse(base, [sa, sb], scale=0.5, mode="mean")
    sum_half = fuse(base, [sa, sb], scale=0.25, mode="sum")
    for a, b2 in zip(mean_out, sum_half):
        np.testing.assert_array_equal(a.data, b2.data)
    # doubling the scale doubles the added residual, exactly
    hi = fuse(base, [sa], scale=1.0, mode="sum")
    lo = fuse(base, [sa], scale=0.5, mode="sum")
    for h, l, b3 in zip(hi, lo, base):
        np.testing.assert_array_equal(h.data - b3.data, 2.0 * (l.data - b3.data))


def test_fuse_scale_zero_passes_base_through():
    rng = np.random.default_rng(1)
    base = _dyadic_stack([(3, 3)], rng)
    stack = _dyadic_stack([(3, 3)], rng)
    out = fuse(base, [stack], scale=0.0)
    assert out[0] is base[0]
    out2 = fuse(base, [], scale=0.7)
    assert out2[0] is base[0]


def test_fuse_validation():
    rng = np.random.default_rng(2)
    base = _dyadic_stack([(3, 3), (2, 2)], rng)
    with pytest.raises(ValueError, match="fusion mode"):
        fuse(base, [base], 0.1, mode="max")
    with pytest.raises(T.ShapeError):
        fuse(base, [_dyadic_stack([(3, 3)], rng)], 0.1)


def test_single_condition_bypasses_trained_branch():
    # Perturb the zero projections so the branch would contribute if it
    # ran; a single condition must still bypass it bitwise.
    base = _base()
    ctrl = init_control_branch(base, philox(6, 0))
    for zp in ctrl.zero_projs:
        zp.w.data[:] = 0.3
        zp.b.data[:] = -0.2
    rng = philox(7, 0)
    z = rng.standard_normal((16, 4)).astype(np.float32)
    c = rng.standard_normal((1, 32)).astype(np.float32)
    alone, _ = unet_forward(base, z, 12, c[0])
    with T.no_grad():
        joint = compound_denoise(base, ctrl, T.const(z, dtype=np.float32),
                                 np.asarray([12]), [c], scale=0.1, batch=1)
        pair = compound_denoise(base, ctrl, T.const(z, dtype=np.float32),
                                np.asarray([12]), [c, c], scale=0.1, batch=1)
    np.testing.assert_array_equal(joint.data, alone)
    assert not np.array_equal(pair.data, alone)


def test_compound_denoise_weight_validation():
    base = _base(live_output=False)
    ctrl = init_control_branch(base)
    z = T.const(np.zeros((16, 4), dtype=np.float32), dtype=np.float32)
    c = np.zeros((1, 32), dtype=np.float32)
    with pytest.raises(ValueError):
        compound_denoise(base, ctrl, z, np.asarray([1]), [], batch=1)
    with pytest.raises(ValueError, match="non-negative"):
        compound_denoise(base, ctrl, z, np.asarray([1]), [c, c],
                         weights=[1.5, -0.5], batch=1)
    with pytest.raises(ValueError, match="sum to 1"):
        compound_denoise(base, ctrl, z, np.asarray([1]), [c, c],
                         weights=[0.7, 0.7], batch=1)


def test_base_condition_is_interpolated_mixture():
    # The base network must see the weighted mean of the condition sets:
    # identical sets with any weights give the same prediction as one set.
    base = _base()
    ctrl = init_control_branch(base, philox(8, 0))
    rng = philox(9, 0)
    z = T.const(rng.standard_normal((16, 4)).astype(np.float32), dtype=np.float32)
    ca = rng.standard_normal((1, 32)).astype(np.float32)
    with T.no_grad():
        even = compound_denoise(base, ctrl, z, np.asarray([5]), [ca, ca],
                                weights=[0.25, 0.75], batch=1)
        solo = compound_denoise(base, ctrl, z, np.asarray([5]), [ca], batch=1)
    np.testing.assert_allclose(even.data, solo.data, atol=1e-6)
