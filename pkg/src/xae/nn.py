"""Small module system over :mod:`xae.tensor`: parameters, layers, init."""
from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, conv2d, gru_cell, layer_norm, matmul, softmax

__all__ = [
    "Module", "Linear", "Conv2d", "GRUCell", "GRU", "LayerNorm", "MLP",
    "MultiHeadSelfAttention", "TransformerBlock", "param_count",
]


class Module:
    """Container with named parameters and child modules, in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    """y = x W + b, with W stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = _uniform(rng, (d_in, d_out), d_in, dtype)
        self.bias = _uniform(rng, (d_out,), d_in, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear({self.d_in}->{self.d_out}): got input {x.shape}")
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = _uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype)
        self.bias = _uniform(rng, (c_out,), fan_in, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class GRUCell(Module):
    """Three gates with separate input-hidden and hidden-hidden biases."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.d_in, self.d_hidden = d_in, d_hidden
        self.w_ih = _uniform(rng, (d_in, 3 * d_hidden), d_hidden, dtype)
        self.w_hh = _uniform(rng, (d_hidden, 3 * d_hidden), d_hidden, dtype)
        self.b_ih = _uniform(rng, (3 * d_hidden,), d_hidden, dtype)
        self.b_hh = _uniform(rng, (3 * d_hidden,), d_hidden, dtype)

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


class GRU(Module):
    """Unrolls a GRUCell over axis 1 of a (B, T, d_in) input; returns the last hidden state."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cell = GRUCell(d_in, d_hidden, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] < 1:
            raise ShapeError(f"GRU: expected non-empty (B, T, d) input, got {x.shape}")
        h = Tensor(np.zeros((x.shape[0], self.cell.d_hidden), dtype=x.dtype))
        for t in range(x.shape[1]):
            h = self.cell(x[:, t], h)
        return h


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


_ACTIVATIONS = {"tanh": Tensor.tanh, "relu": Tensor.relu, "gelu": Tensor.gelu}


class MLP(Module):
    """FC-act-FC chain."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 act: str = "tanh", dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden, rng, dtype=dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype=dtype)
        self.act = _ACTIVATIONS[act]

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ValueError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor):
        """Return (output, attention) with attention shaped (B, heads, N, N)."""
        B, N, D = x.shape
        hd = D // self.heads
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = softmax(matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd)), axis=-1)
        out = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, N, D)
        return self.proj(out), att


class TransformerBlock(Module):
    """Pre-norm encoder block: x + attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, rng, act="gelu", dtype=dtype)

    def forward(self, x: Tensor):
        a, att = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, att


def param_count(obj) -> int:
    """Number of trainable scalars in a Module, a ModelSpec, or an iterable of tensors/groups."""
    if obj is None:
        return 0
    if isinstance(obj, Module):
        return sum(p.size for p in obj.parameters())
    if isinstance(obj, Tensor):
        return obj.size if obj.requires_grad else 0
    if hasattr(obj, "build"):  # ModelSpec
        return param_count(obj.build(np.random.default_rng(0)))
    if hasattr(obj, "params"):  # ParamGroup
        return sum(param_count(p) for p in obj.params)
    return sum(param_count(item) for item in obj)
