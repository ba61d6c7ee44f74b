#!/usr/bin/env python3
"""
layers.py - Stateful wrappers around the tensor_core primitives

A Module owns named parameters with paired gradient storage, optional
buffers (batch-norm running stats), and a forward/backward pair that
caches what backward needs. Parameter arrays are updated in place by
the optimizer, so references handed out by named_parameters stay valid.
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from tensor_core import (
    DTYPE,
    BatchNormState,
    ContractViolation,
    ConvSpec,
    avg_pool3x3_backward,
    avg_pool3x3_same,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    relu_backward,
    relu_forward,
)


def uniform_fan_in(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Uniform in +-sqrt(1/fan_in), fan_in = in_channels * kh * kw."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Module:
    def __init__(self):
        self.params: Dict[str, np.ndarray] = OrderedDict()
        self.grads: Dict[str, np.ndarray] = OrderedDict()
        self.training = True

    # -- structure --
    def children(self) -> List[Tuple[str, "Module"]]:
        return []

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def set_buffer(self, name: str, value: np.ndarray):
        raise ContractViolation(f"{type(self).__name__} has no buffer {name!r}")

    def add_param(self, name: str, value: np.ndarray):
        self.params[name] = np.ascontiguousarray(value, dtype=DTYPE)
        self.grads[name] = np.zeros_like(self.params[name])

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_gradients(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for k, v in self.grads.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_gradients(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for k, v in self.buffers().items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def _modules_by_prefix(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child._modules_by_prefix(f"{prefix}{name}.")

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0
        for _, child in self.children():
            child.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    # -- checkpoint state --
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.copy()
        for name, b in self.named_buffers():
            state[name] = b.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Copy values in place; the first name or shape mismatch is an error."""
        expected = list(self.state_dict().items())
        names = list(state.keys())
        for i, (name, ref) in enumerate(expected):
            if i >= len(names) or names[i] != name:
                got = names[i] if i < len(names) else "<missing>"
                raise ContractViolation(f"state mismatch at parameter {name!r}: checkpoint has {got!r}")
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != ref.shape:
                raise ContractViolation(
                    f"state mismatch at parameter {name!r}: shape {value.shape} vs expected {ref.shape}")
        if len(names) > len(expected):
            raise ContractViolation(f"state mismatch: unexpected extra parameter {names[len(expected)]!r}")

        modules = dict(self._modules_by_prefix())
        for name, value in state.items():
            prefix, _, leaf = name.rpartition(".")
            owner = modules[prefix + "." if prefix else ""]
            if leaf in owner.params:
                owner.params[leaf][...] = value
            else:
                owner.set_buffer(leaf, np.array(value, dtype=DTYPE))

    # -- compute --
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


class ConvLayer(Module):
    def __init__(self, spec: ConvSpec, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("weight", uniform_fan_in(rng, spec.weight_shape))
        self.add_param("bias", np.zeros(spec.out_channels))
        self._x = None

    def forward(self, x):
        self._x = x
        return conv2d_forward(x, self.spec, self.params["weight"], self.params["bias"])

    def backward(self, grad_output):
        gx, gw, gb = conv2d_backward(self._x, self.params["weight"], grad_output)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx


class BatchNormLayer(Module):
    def __init__(self, channels: int, epsilon: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.state = BatchNormState.fresh(channels, epsilon, momentum)
        self.params["gamma"] = self.state.gamma
        self.params["beta"] = self.state.beta
        self.grads["gamma"] = np.zeros(channels, dtype=DTYPE)
        self.grads["beta"] = np.zeros(channels, dtype=DTYPE)
        self._cache = None

    def buffers(self):
        return OrderedDict([("running_mean", self.state.running_mean), ("running_var", self.state.running_var)])

    def set_buffer(self, name, value):
        if name not in ("running_mean", "running_var"):
            super().set_buffer(name, value)
        setattr(self.state, name, value)

    def train(self, mode: bool = True):
        self.state.mode = "train" if mode else "eval"
        return super().train(mode)

    def forward(self, x):
        out, self._cache = batchnorm_forward(x, self.state)
        return out

    def backward(self, grad_output):
        gx, gg, gb = batchnorm_backward(grad_output, self.state, self._cache)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx


class ReLULayer(Module):
    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, grad_output):
        return relu_backward(self._x, grad_output)


class AvgPoolLayer(Module):
    """3x3 same-padded average pool, divisor 9."""

    def forward(self, x):
        return avg_pool3x3_same(x)

    def backward(self, grad_output):
        return avg_pool3x3_backward(grad_output)


class Sequential(Module):
    def __init__(self, layers: Sequence[Module] = ()):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return [(str(i), m) for i, m in enumerate(self.layers)]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_output):
        for layer in reversed(self.layers):
            grad_output = layer.backward(grad_output)
        return grad_output
