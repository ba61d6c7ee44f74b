import numpy as np
import pytest

from deform_conv import (
    DeformConvLayer,
    GRAD_KEYS,
    deform_conv_backward,
    deform_conv_forward,
    deform_conv_forward_naive,
)
from diagnostics import _randomize_deform_layer, check_module
from tensor_core import ContractViolation, conv2d_backward, conv2d_forward, sigmoid_forward


def _unit_mask(layer):
    # sigmoid(40) rounds to exactly 1.0 in float64
    layer.params["mask_bias"][...] = 40.0
    return layer


def test_predictor_shapes_and_zero_init(rng):
    layer = DeformConvLayer(3, 5, rng)
    assert layer.params["offset_weight"].shape == (18, 3, 3, 3)
    assert layer.params["mask_weight"].shape == (9, 3, 3, 3)
    x = rng.normal(size=(2, 3, 4, 4))
    assert not layer.sampling_offsets(x).any()
    np.testing.assert_array_equal(layer.modulation_mask(x), 0.5)


def test_unit_mask_zero_offsets_is_regular_conv(rng):
    layer = _unit_mask(DeformConvLayer(3, 4, rng))
    layer.params["bias"][...] = rng.normal(size=4)
    x = rng.normal(size=(2, 3, 6, 5))
    expected = conv2d_forward(x, None, layer.params["weight"], layer.params["bias"])
    np.testing.assert_allclose(deform_conv_forward(x, layer), expected, rtol=0, atol=1e-9)


def test_constant_input_constant_mask(rng):
    layer = DeformConvLayer(2, 3, rng)
    layer.params["bias"][...] = [0.1, -0.2, 0.3]
    layer.params["mask_bias"][...] = 0.7
    m = float(sigmoid_forward(np.array(0.7)))
    v = 1.5
    out = deform_conv_forward(np.full((1, 2, 5, 5), v), layer)
    for o in range(3):
        expected = m * v * layer.params["weight"][o].sum() + layer.params["bias"][o]
        np.testing.assert_allclose(out[0, o, 1:4, 1:4], expected, rtol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_forward_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    b_n, c_n, h_n, w_n = (int(rng.integers(1, hi + 1)) for hi in (2, 4, 6, 6))
    layer = DeformConvLayer(c_n, int(rng.integers(1, 5)), rng)
    # wide offsets push some taps off the map
    _randomize_deform_layer(layer, rng, scale=1.5 if seed % 2 else 0.5)
    x = rng.normal(size=(b_n, c_n, h_n, w_n))
    np.testing.assert_allclose(deform_conv_forward(x, layer), deform_conv_forward_naive(x, layer), rtol=0, atol=1e-12)


def test_zero_upstream_gives_zero_gradients(rng):
    layer = DeformConvLayer(2, 3, rng)
    _randomize_deform_layer(layer, rng)
    x = rng.normal(size=(1, 2, 4, 4))
    grads = deform_conv_backward(x, layer, np.zeros((1, 3, 4, 4)))
    assert set(grads) == set(GRAD_KEYS)
    for g in grads.values():
        assert not g.any()


def test_degenerate_weight_gradient_equals_conv(rng):
    layer = _unit_mask(DeformConvLayer(3, 4, rng))
    x = rng.normal(size=(2, 3, 5, 5))
    g = rng.normal(size=(2, 4, 5, 5))
    grads = deform_conv_backward(x, layer, g)
    gx, gw, gb = conv2d_backward(x, layer.params["weight"], g)
    np.testing.assert_allclose(grads["weight"], gw, atol=1e-10)
    np.testing.assert_allclose(grads["bias"], gb, atol=1e-10)
    assert not grads["mask_weight"].any()


@pytest.mark.parametrize("seed", range(20))
def test_all_parameter_groups_pass_finite_differences(seed):
    rng = np.random.default_rng(seed)
    layer = DeformConvLayer(2, 3, rng)
    _randomize_deform_layer(layer, rng)
    err, where = check_module(layer, rng.normal(size=(1, 2, 4, 4)), rng, 1e-5, 6)
    assert err < 1e-4, where


def test_channel_mismatch(rng):
    with pytest.raises(ContractViolation, match="channels mismatch"):
        deform_conv_forward(rng.normal(size=(1, 3, 4, 4)), DeformConvLayer(2, 2, rng))


def test_backward_shape_mismatch(rng):
    layer = DeformConvLayer(2, 2, rng)
    with pytest.raises(ContractViolation, match="height mismatch"):
        deform_conv_backward(rng.normal(size=(1, 2, 4, 4)), layer, np.zeros((1, 2, 3, 4)))
