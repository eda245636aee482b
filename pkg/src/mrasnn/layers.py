"""Parameter containers wrapping the tensor ops."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as tc
from .tensor import Tensor


class Module:
    """Minimal container: named parameters, buffers, child modules, train/eval flag."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self.training = True

    def __setattr__(self, key, value):
        if isinstance(value, Module) and key != "_parent":
            self.__dict__.setdefault("_children", OrderedDict())[key] = value
        object.__setattr__(self, key, value)

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        self._buffers[name] = data
        return data

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._children.items())

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for path, mod in self.modules(prefix):
            for name, p in mod._params.items():
                yield (f"{path}.{name}" if path else name), p

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{path}.{name}" if path else name), b

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def reset_state(self) -> None:
        """Zero every membrane potential below this module."""
        for _, m in self.modules():
            hook = getattr(m, "_reset_membrane", None)
            if hook is not None:
                hook()


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(tc.default_dtype())


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=None, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        bound = 1.0 / np.sqrt(c_in * kernel)
        self.add_param("weight", _uniform(rng, bound, (c_out, c_in, kernel)))
        self.bias = self.add_param("bias", _uniform(rng, bound, (c_out,))) if bias else None

    def output_length(self, s: int) -> int:
        return (s + 2 * self.padding - self.kernel) // self.stride + 1

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm1d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.add_param("gamma", np.ones(channels, dtype=tc.default_dtype()))
        self.add_param("beta", np.zeros(channels, dtype=tc.default_dtype()))
        self.running = tc.RunningStats(channels)
        self.add_buffer("running_mean", self.running.mean)
        self.add_buffer("running_var", self.running.var)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.batchnorm1d(
            x, self.gamma, self.beta, self.running, self.training, self.eps, self.momentum
        )


class Linear(Module):
    def __init__(self, n_in, n_out, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(n_in)
        self.add_param("weight", _uniform(rng, bound, (n_out, n_in)))
        self.bias = self.add_param("bias", _uniform(rng, bound, (n_out,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tc.fully_connected(x, self.weight, self.bias)
