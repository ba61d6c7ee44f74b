import copy

import numpy as np
import pytest

from diagnostics import _randomize_deform_layer, check_module
from head_blocks import (
    ConvBlock,
    DeformInceptionBlock,
    InceptionBlock,
    deform_inception_backward,
    deform_inception_forward,
    inception_backward,
    inception_forward,
    plain_block_forward,
    plain_stack,
)
from layers import Sequential
from tensor_core import ContractViolation


def _regular_twin(block: DeformInceptionBlock) -> DeformInceptionBlock:
    """Copy of `block` whose deformable path is a regular ConvBlock with the same weights."""
    twin = copy.deepcopy(block)
    name, seq = twin.branches[-1]
    deform = seq.layers[0]
    regular = ConvBlock(deform.in_channels, deform.out_channels, 3, deform.order)
    regular.conv.params["weight"][...] = deform.conv.params["weight"]
    regular.conv.params["bias"][...] = deform.conv.params["bias"]
    regular.bn.params["gamma"][...] = deform.bn.params["gamma"]
    regular.bn.params["beta"][...] = deform.bn.params["beta"]
    twin.branches[-1] = (name, Sequential([regular]))
    return twin


@pytest.mark.parametrize("channels", [4, 8, 256])
def test_inception_preserves_channels(channels, rng):
    block = InceptionBlock(channels, rng=rng)
    h = 3 if channels == 256 else 5
    out = inception_forward(rng.normal(size=(2, channels, h, h + 1)), block)
    assert out.shape == (2, channels, h, h + 1)


@pytest.mark.parametrize("hw", [(1, 1), (2, 7), (6, 6)])
def test_blocks_preserve_spatial_dims(hw, rng):
    x = rng.normal(size=(2, 4) + hw)
    assert inception_forward(x, InceptionBlock(4, rng=rng)).shape == x.shape
    assert deform_inception_forward(x, DeformInceptionBlock(4, rng=rng)).shape == x.shape


def test_branch_counts_and_widths(rng):
    inc = InceptionBlock(8, rng=rng)
    assert inc.branch_count == 4 and inc.width == 2
    din = DeformInceptionBlock(8, rng=rng)
    assert din.branch_count == 2 and din.width == 4
    only = DeformInceptionBlock(8, rng=rng, include_regular=False)
    assert only.branch_count == 1
    assert InceptionBlock(3, rng=rng).width == 1


def test_channel_mismatch_is_rejected(rng):
    with pytest.raises(ContractViolation, match="channels mismatch"):
        inception_forward(rng.normal(size=(1, 5, 4, 4)), InceptionBlock(4, rng=rng))
    with pytest.raises(ContractViolation):
        ConvBlock(4, 4, order="bn_first")


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("order", ["conv_relu_bn", "conv_bn_relu"])
def test_inception_gradients(order, seed):
    rng = np.random.default_rng(seed)
    block = InceptionBlock(4, order=order, rng=rng)
    err, where = check_module(block, rng.normal(size=(1, 4, 5, 5)), rng, 1e-5, 4)
    assert err < 1e-3, where


@pytest.mark.parametrize("seed", range(20))
def test_deform_inception_gradients(seed):
    rng = np.random.default_rng(seed)
    block = DeformInceptionBlock(4, rng=rng)
    _randomize_deform_layer(block.branches[-1][1].layers[0].conv, rng)
    err, where = check_module(block, rng.normal(size=(1, 4, 5, 5)), rng, 1e-5, 4)
    assert err < 1e-3, where


def test_functional_backward_returns_input_gradient(rng):
    block = InceptionBlock(4, rng=rng)
    x = rng.normal(size=(1, 4, 3, 3))
    out = inception_forward(x, block)
    assert inception_backward(block, np.ones_like(out)).shape == x.shape
    dblock = DeformInceptionBlock(4, rng=rng)
    out = deform_inception_forward(x, dblock)
    assert deform_inception_backward(dblock, np.ones_like(out)).shape == x.shape


def test_degenerate_deform_inception_equals_regular_block(rng):
    block = DeformInceptionBlock(4, rng=rng)
    block.branches[-1][1].layers[0].conv.params["mask_bias"][...] = 40.0
    twin = _regular_twin(block)
    x = rng.normal(size=(2, 4, 5, 5))
    np.testing.assert_allclose(block.forward(x), twin.forward(x), rtol=0, atol=1e-9)


def _impulse_support(seq: Sequential, channels: int) -> np.ndarray:
    seq.eval()
    for name, p in seq.named_parameters():
        if name.endswith("conv.weight"):
            p[...] = 0.1 + np.abs(p)
    x = np.zeros((1, channels, 9, 9))
    x[0, :, 4, 4] = 1.0
    out = seq.forward(x)
    return np.argwhere(np.abs(out[0]).sum(axis=0) > 0)


def _extent(cells: np.ndarray):
    return tuple(int(v) for v in cells.max(axis=0) - cells.min(axis=0) + 1)


def test_inception_branch_receptive_fields(rng):
    block = InceptionBlock(4, rng=rng)
    branches = dict(block.branches)
    assert _extent(_impulse_support(branches["branch_a"], 4)) == (1, 1)
    assert _extent(_impulse_support(branches["branch_b"], 4)) == (3, 3)
    assert _extent(_impulse_support(branches["branch_c"], 4)) == (5, 5)
    assert _extent(_impulse_support(branches["branch_d"], 4)) == (3, 3)


def test_plain_stack_empty_is_identity(rng):
    x = rng.normal(size=(1, 3, 4, 4))
    np.testing.assert_array_equal(plain_block_forward(x, []), x)
    np.testing.assert_array_equal(plain_block_forward(x, plain_stack(3, depth=0)), x)


def test_plain_identity_block_is_relu(rng):
    block = ConvBlock(3, 3, kernel=1, rng=rng)
    block.conv.params["weight"][...] = np.eye(3).reshape(3, 3, 1, 1)
    block.bn.state.epsilon = 0.0
    block.eval()
    x = rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_allclose(plain_block_forward(x, [block]), np.maximum(x, 0.0))


@pytest.mark.parametrize("seed", range(20))
def test_plain_stack_gradients(seed):
    rng = np.random.default_rng(seed)
    err, where = check_module(plain_stack(3, 2, rng=rng), rng.normal(size=(1, 3, 4, 4)), rng, 1e-5, 4)
    assert err < 1e-3, where


def test_plain_stack_channel_mismatch(rng):
    with pytest.raises(ContractViolation, match="plain stack"):
        plain_block_forward(rng.normal(size=(1, 2, 4, 4)), plain_stack(3, 1, rng=rng))
