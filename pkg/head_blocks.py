#!/usr/bin/env python3
"""
head_blocks.py - Block bodies for the box-regression head

- ConvBlock: conv -> ReLU -> BatchNorm (or conv -> BN -> ReLU)
- InceptionBlock: four parallel paths (1x1 | 1x1,3x3 | 1x1,3x3,3x3 |
  avgpool,1x1), concatenated and reduced back to the input width by 1x1
- DeformInceptionBlock: regular 3x3 path + deformable 3x3 path,
  concatenated and reduced by 1x1; without the regular path it is the
  "deformable only" body
- plain stack: sequential ConvBlocks, the baseline head body

Two stacked 3x3 convs give a 5x5 support, not 7x7.
"""

from typing import List, Optional, Sequence

import numpy as np

from deform_conv import DeformConvLayer
from layers import AvgPoolLayer, BatchNormLayer, ConvLayer, Module, ReLULayer, Sequential
from tensor_core import ContractViolation, ConvSpec, concat_channels, split_channels

BLOCK_ORDERS = ("conv_relu_bn", "conv_bn_relu")


def _check_order(order: str) -> str:
    if order not in BLOCK_ORDERS:
        raise ContractViolation(f"unknown block order {order!r}; expected one of {BLOCK_ORDERS}")
    return order


class _GatedBlock(Module):
    """A conv-like layer followed by ReLU and BatchNorm in the configured order."""

    def __init__(self, conv: Module, out_channels: int, order: str):
        super().__init__()
        self.order = _check_order(order)
        self.conv = conv
        self.relu = ReLULayer()
        self.bn = BatchNormLayer(out_channels)
        self._steps = [self.conv, self.relu, self.bn] if order == "conv_relu_bn" else [self.conv, self.bn, self.relu]

    def children(self):
        return [("conv", self.conv), ("bn", self.bn)]

    def forward(self, x):
        for step in self._steps:
            x = step.forward(x)
        return x

    def backward(self, grad_output):
        for step in reversed(self._steps):
            grad_output = step.backward(grad_output)
        return grad_output


class ConvBlock(_GatedBlock):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 order: str = "conv_relu_bn", rng: Optional[np.random.Generator] = None):
        self.spec = ConvSpec(in_channels, out_channels, (kernel, kernel))
        super().__init__(ConvLayer(self.spec, rng), out_channels, order)
        self.in_channels = in_channels
        self.out_channels = out_channels


class DeformConvBlock(_GatedBlock):
    def __init__(self, in_channels: int, out_channels: int,
                 order: str = "conv_relu_bn", rng: Optional[np.random.Generator] = None):
        super().__init__(DeformConvLayer(in_channels, out_channels, rng), out_channels, order)
        self.in_channels = in_channels
        self.out_channels = out_channels


class MultiBranchBlock(Module):
    """Parallel branches -> channel concat -> reducer back to the input width."""

    def __init__(self, channels: int, branches: Sequence[tuple], reducer: ConvBlock):
        super().__init__()
        self.channels = channels
        self.branches = list(branches)  # (name, module)
        self.reducer = reducer
        if reducer.out_channels != channels:
            raise ContractViolation(f"reducer maps to {reducer.out_channels} channels, block width is {channels}")
        self._sizes: List[int] = []

    @property
    def branch_count(self) -> int:
        return len(self.branches)

    def children(self):
        return list(self.branches) + [("reducer", self.reducer)]

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ContractViolation(
                f"{type(self).__name__}: channels mismatch (got {x.shape[1]}, expected {self.channels})")
        outs = [branch.forward(x) for _, branch in self.branches]
        self._sizes = [o.shape[1] for o in outs]
        return self.reducer.forward(concat_channels(outs))

    def backward(self, grad_output):
        parts = split_channels(self.reducer.backward(grad_output), self._sizes)
        grad_x = None
        for (_, branch), part in zip(self.branches, parts):
            g = branch.backward(part)
            grad_x = g if grad_x is None else grad_x + g
        return grad_x


class InceptionBlock(MultiBranchBlock):
    def __init__(self, channels: int, width: Optional[int] = None,
                 order: str = "conv_relu_bn", rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        w = width or max(1, channels // 4)
        self.width = w
        branches = [
            ("branch_a", Sequential([ConvBlock(channels, w, 1, order, rng)])),
            ("branch_b", Sequential([ConvBlock(channels, w, 1, order, rng),
                                     ConvBlock(w, w, 3, order, rng)])),
            ("branch_c", Sequential([ConvBlock(channels, w, 1, order, rng),
                                     ConvBlock(w, w, 3, order, rng),
                                     ConvBlock(w, w, 3, order, rng)])),
            ("branch_d", Sequential([AvgPoolLayer(), ConvBlock(channels, w, 1, order, rng)])),
        ]
        super().__init__(channels, branches, ConvBlock(4 * w, channels, 1, order, rng))


class DeformInceptionBlock(MultiBranchBlock):
    def __init__(self, channels: int, width: Optional[int] = None,
                 order: str = "conv_relu_bn", rng: Optional[np.random.Generator] = None,
                 include_regular: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        w = width or max(1, channels // 2)
        self.width = w
        self.include_regular = include_regular
        branches = []
        if include_regular:
            branches.append(("branch_r", Sequential([ConvBlock(channels, w, 3, order, rng)])))
        branches.append(("branch_d", Sequential([DeformConvBlock(channels, w, order, rng)])))
        super().__init__(channels, branches, ConvBlock(len(branches) * w, channels, 1, order, rng))


def plain_stack(channels: int, depth: int = 1, order: str = "conv_relu_bn",
                rng: Optional[np.random.Generator] = None) -> Sequential:
    rng = rng if rng is not None else np.random.default_rng(0)
    return Sequential([ConvBlock(channels, channels, 3, order, rng) for _ in range(depth)])


# ----------------------------- functional surface -----------------------------

def inception_forward(x, block: InceptionBlock):
    return block.forward(x)


def inception_backward(block: InceptionBlock, grad_output):
    return block.backward(grad_output)


def deform_inception_forward(x, block: DeformInceptionBlock):
    return block.forward(x)


def deform_inception_backward(block: DeformInceptionBlock, grad_output):
    return block.backward(grad_output)


def plain_block_forward(x, stack: Sequence[ConvBlock]):
    """Empty stack is the identity."""
    seq = stack if isinstance(stack, Sequential) else Sequential(stack)
    for block in seq.layers:
        if x.shape[1] != block.in_channels:
            raise ContractViolation(
                f"plain stack: channels mismatch (got {x.shape[1]}, expected {block.in_channels})")
        x = block.forward(x)
    return x
