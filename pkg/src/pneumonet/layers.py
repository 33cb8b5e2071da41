"""Parameterized layers and the named-block grouping used by both models.

A Block is a bag of layers under one name with a single trainable flag; the
flag simply toggles requires_grad on every parameter tensor, which the
autodiff engine and the optimizer both respect. Parameter iteration order is
construction order, and the checkpoint layout depends on it staying fixed.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


class Conv2d:
    """3x3 or 1x1 convolution with bias, stride 1.

    He-normal weight init (std = sqrt(2/fan_in)) suits the relu layers;
    output heads override init_std so early predictions sit near neutral.
    """

    def __init__(self, cin: int, cout: int, ksize: int, padding: int,
                 rng: np.random.Generator, dtype=np.float32,
                 init_std: float | None = None):
        std = init_std if init_std is not None else np.sqrt(2.0 / (cin * ksize * ksize))
        w = rng.normal(0.0, std, size=(cout, cin, ksize, ksize))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)

    def named_params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def named_buffers(self):
        return []


class DenseLayer:
    """Fully connected layer; small init_std keeps head logits near zero."""

    def __init__(self, fin: int, fout: int, rng: np.random.Generator,
                 dtype=np.float32, init_std: float = 0.01):
        w = rng.normal(0.0, init_std, size=(fin, fout))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)

    def named_params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def named_buffers(self):
        return []


class BatchNorm2d:
    """Per-channel batch norm; running statistics live outside the graph."""

    def __init__(self, channels: int, dtype=np.float32,
                 eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = ops.RunningStats(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.stats,
                               training, eps=self.eps, momentum=self.momentum)

    def named_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self):
        # getter/setter pairs: RunningStats.update reassigns its arrays, so
        # checkpoint load must write through the attribute, not the array
        stats = self.stats
        return [
            ("running_mean",
             lambda s=stats: s.mean,
             lambda arr, s=stats: setattr(s, "mean", arr)),
            ("running_var",
             lambda s=stats: s.var,
             lambda arr, s=stats: setattr(s, "var", arr)),
        ]


class Block:
    """Named group of layers sharing one trainable flag."""

    def __init__(self, name: str, named_layers):
        self.name = name
        self.named_layers = list(named_layers)   # [(layer_name, layer)]
        self._trainable = True

    @property
    def trainable(self) -> bool:
        return self._trainable

    def set_trainable(self, flag: bool):
        self._trainable = bool(flag)
        for _, layer in self.named_layers:
            for _, tensor in layer.named_params():
                tensor.requires_grad = self._trainable

    def parameters(self):
        """[(qualified_name, Tensor)] in fixed construction order."""
        out = []
        for lname, layer in self.named_layers:
            for tname, tensor in layer.named_params():
                out.append((f"{self.name}.{lname}.{tname}", tensor))
        return out

    def buffers(self):
        """[(qualified_name, getter, setter)] for non-parameter state."""
        out = []
        for lname, layer in self.named_layers:
            for tname, get, set_ in layer.named_buffers():
                out.append((f"{self.name}.{lname}.{tname}", get, set_))
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())
