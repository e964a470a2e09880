"""Thin module system: parameter registration, init, and common layers."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor, default_dtype

__all__ = ["Module", "Conv2d", "BatchNorm2d", "Linear", "kaiming_uniform"]


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """He-uniform draw: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Module:
    """Base class tracking parameters, buffers and children by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield (f"{prefix}{name}", b)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def bind_names(self, prefix: str = ""):
        """Assign dotted name paths to all parameters; names must be unique."""
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name

    def train(self):
        self.training = True
        for c in self._children.values():
            c.train()
        return self

    def eval(self):
        self.training = False
        for c in self._children.values():
            c.eval()
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), fan_in=cin * k * k))
        self.bias = Parameter(np.zeros(cout, default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(c, default_dtype()))
        self.beta = Parameter(np.zeros(c, default_dtype()))
        self.register_buffer("running_mean", np.zeros(c, np.float64))
        self.register_buffer("running_var", np.ones(c, np.float64))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int, bias: bool = True, zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((cin, cout), default_dtype())
        else:
            w = kaiming_uniform(rng, (cin, cout), fan_in=cin)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        if self.bias is not None:
            y = F.add(y, self.bias)
        return y
