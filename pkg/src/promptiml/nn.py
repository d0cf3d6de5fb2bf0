"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from promptiml.tensor import Tensor, conv2d, layer_norm, linear


class Parameter(Tensor):
    """A trainable leaf tensor.  ``requires_grad=False`` marks it frozen."""

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.array(data), requires_grad=requires_grad)

    @property
    def frozen(self) -> bool:
        return not self.requires_grad


class Module:
    """Minimal module base: parameters are discovered from instance attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        lim = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-lim, lim, size=(d_in, d_out)).astype(dtype))
        self.bias = Parameter(rng.uniform(-lim, lim, size=d_out).astype(dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def zero_(self) -> "Linear":
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0
        return self


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, bias: bool = True, dtype=np.float32):
        lim = 1.0 / np.sqrt(c_in * k * k)
        self.weight = Parameter(rng.uniform(-lim, lim, size=(c_out, c_in, k, k)).astype(dtype))
        self.bias = Parameter(rng.uniform(-lim, lim, size=c_out).astype(dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MLP(Module):
    """Two linear layers with an activation in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float32, act: str = "gelu"):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        h = h.gelu() if self.act == "gelu" else h.relu()
        return self.fc2(h)
