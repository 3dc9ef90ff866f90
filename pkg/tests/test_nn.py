"""Module containers, parameter traversal, and the batched-row helpers."""

from __future__ import annotations

import numpy as np
import pytest

from tridiff import nn
from tridiff import tensor as T
from tridiff.tensor import Tensor


def _rng():
    return np.random.default_rng(0)


def test_linear_matches_manual_affine():
    lin = nn.Linear(3, 2, _rng())
    lin.w.data = np.arange(6, dtype=np.float32).reshape(3, 2)
    lin.b.data = np.asarray([1.0, -1.0], dtype=np.float32)
    x = np.asarray([[1.0, 0.0, 2.0]], dtype=np.float32)
    y = lin(Tensor(x)).data
    np.testing.assert_allclose(y, x @ lin.w.data + lin.b.data, rtol=1e-6)


def test_zero_linear_is_exactly_zero_at_init():
    zl = nn.ZeroLinear(5)
    x = Tensor(np.random.default_rng(1).standard_normal((7, 5)).astype(np.float32))
    assert np.all(zl(x).data == 0.0)


def test_zero_linear_gradient_alive_at_init():
    # d(xW)/dW = x: the zero weights must not zero the gradient.
    zl = nn.ZeroLinear(3)
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    grads = T.backward(T.tsum(zl(x)), zl.parameters())
    assert float(np.abs(grads[zl.w]).sum()) > 0.0


def test_param_default_scale_tracks_fan_in():
    big = nn.param((400, 10), _rng())
    assert abs(float(big.data.std()) - 1.0 / 20.0) < 0.01


def test_named_parameters_walks_nested_containers():
    class Box(nn.Module):
        def __init__(self):
            self.lin = nn.Linear(2, 2, _rng())
            self.stack = [nn.ZeroLinear(2), nn.ZeroLinear(2)]
            self.lut = {"a": nn.param((2,), _rng())}

    names = {n for n, _ in Box().named_parameters()}
    assert names == {"lin.w", "lin.b", "stack.0.w", "stack.0.b",
                     "stack.1.w", "stack.1.b", "lut.a"}


def test_state_dict_roundtrip_bitwise():
    a = nn.Linear(4, 3, _rng())
    b = nn.Linear(4, 3, np.random.default_rng(9))
    b.load_state_dict(a.state_dict())
    assert a.digest() == b.digest()


def test_load_state_dict_rejects_mismatched_keys():
    lin = nn.Linear(2, 2, _rng())
    state = lin.state_dict()
    state["ghost"] = np.zeros(1)
    with pytest.raises(KeyError):
        lin.load_state_dict(state)
    with pytest.raises(KeyError):
        lin.load_state_dict({"w": np.zeros((2, 2))})


def test_load_state_dict_rejects_bad_shape():
    lin = nn.Linear(2, 2, _rng())
    state = lin.state_dict()
    state["w"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        lin.load_state_dict(state)


def test_digest_sensitive_to_any_parameter_bit():
    lin = nn.Linear(3, 3, _rng())
    d0 = lin.digest()
    lin.b.data[1] += np.float32(1e-7)
    assert lin.digest() != d0


def test_freeze_unfreeze_toggle_requires_grad():
    lin = nn.Linear(2, 2, _rng()).freeze()
    assert not any(p.requires_grad for p in lin.parameters())
    lin.unfreeze()
    assert all(p.requires_grad for p in lin.parameters())


def test_tile_rows_and_expand_and_pool_shapes():
    v = Tensor(np.asarray([1.0, 2.0], dtype=np.float32))
    assert nn.tile_rows(v, 3).shape == (3, 2)
    np.testing.assert_allclose(nn.tile_rows(v, 3).data, np.tile(v.data, (3, 1)))

    x = Tensor(np.arange(8, dtype=np.float32).reshape(4, 2))
    up = nn.expand_per_sample(Tensor(np.asarray([[1.0, 2.0], [3.0, 4.0]],
                                                dtype=np.float32)), 2, 3)
    assert up.shape == (6, 2)
    np.testing.assert_allclose(up.data[0], up.data[2])

    pooled = nn.pool_per_sample(x, 2, 2)
    np.testing.assert_allclose(pooled.data, [[1.0, 2.0], [5.0, 6.0]])


def test_halve_then_double_rows():
    x = Tensor(np.repeat(np.arange(4, dtype=np.float32)[:, None], 3, axis=1))
    h = nn.halve_rows(x, 1, 4)
    np.testing.assert_allclose(h.data[:, 0], [0.5, 2.5])
    d = nn.double_rows(h, 1, 2)
    assert d.shape == (4, 3)
    np.testing.assert_allclose(d.data[:, 0], [0.5, 0.5, 2.5, 2.5])
    with pytest.raises(T.ShapeError):
        nn.halve_rows(Tensor(np.zeros((3, 2), dtype=np.float32)), 1, 3)


def test_block_attention_mask_separates_samples():
    m = nn.block_attention_mask(2, 3, np.float32).data
    assert m.shape == (6, 6)
    assert np.all(m[:3, :3] == 0.0) and np.all(m[3:, 3:] == 0.0)
    assert np.all(m[:3, 3:] == nn.ATTENTION_MASK_FILL)
    # after max-shifted softmax the cross weights must underflow to exact zero
    w = T.softmax(Tensor(m + np.random.default_rng(0)
                         .standard_normal((6, 6)).astype(np.float32))).data
    assert np.all(w[:3, 3:] == 0.0) and np.all(w[3:, :3] == 0.0)


def test_copy_params_into_is_bit_copy():
    src = nn.Linear(3, 3, _rng())
    dst = nn.Linear(3, 3, np.random.default_rng(4))
    nn.copy_params_into(dst, src)
    assert dst.w.data.tobytes() == src.w.data.tobytes()
    assert dst.w is not src.w
