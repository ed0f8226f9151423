"""Layer modules shared by the codec, GPT, retrieval, and face models."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .losses import NEG_INF
from .tensor import Parameter, ShapeError, Tensor


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def normal_embedding(rng: np.random.Generator, shape: tuple, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Module:
    """Minimal parameter container; children are discovered via attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def name_parameters(self, prefix: str = "") -> None:
        """Stamp checkpoint names onto every parameter."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, blocks: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in blocks:
                raise KeyError(f"missing parameter block '{name}'")
            p.assign_(np.asarray(blocks[name], dtype=np.float64))


class Linear(Module):
    """Affine map; the weight is stored (in, out) so no transpose is needed."""

    def __init__(self, rng, in_features: int, out_features: int, bias: bool = True):
        self.weight = Parameter(uniform_fan_in(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = ops.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        y = ops.matmul(flat, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        if x.ndim != 2:
            y = ops.reshape(y, lead + (self.weight.shape[1],))
        return y


class Conv1d(Module):
    def __init__(self, rng, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0):
        fan_in = in_channels * kernel
        self.weight = Parameter(uniform_fan_in(rng, (out_channels, in_channels, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(width))
        self.bias = Parameter(np.zeros(width))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, eps=self.eps)


class Embedding(Module):
    def __init__(self, rng, count: int, width: int):
        self.table = Parameter(normal_embedding(rng, (count, width)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ops.embedding_lookup(self.table, ids)


class ResConv1dBlock(Module):
    """Two kernel-3 convolutions with relu and a skip connection."""

    def __init__(self, rng, channels: int):
        self.conv1 = Conv1d(rng, channels, channels, 3, padding=1)
        self.conv2 = Conv1d(rng, channels, channels, 3, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(ops.relu(self.conv1(ops.relu(x))))
        return ops.add(x, h)


class MultiHeadSelfAttention(Module):
    def __init__(self, rng, width: int, heads: int):
        if width % heads:
            raise ShapeError(f"attention width {width} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = Linear(rng, width, width)
        self.k_proj = Linear(rng, width, width)
        self.v_proj = Linear(rng, width, width)
        self.out = Linear(rng, width, width)

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return ops.transpose(ops.reshape(x, (b, t, self.heads, self.head_dim)),
                             (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        b, t, w = x.shape
        q = self._split(self.q_proj(x), b, t)               # (B, H, T, hd)
        k = self._split(self.k_proj(x), b, t)
        v = self._split(self.v_proj(x), b, t)
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))),
                           1.0 / np.sqrt(self.head_dim))    # (B, H, T, T)
        if mask is not None:
            scores = ops.add_mask(scores, mask)
        attn = ops.softmax(scores, axis=-1)
        ctx = ops.matmul(attn, v)                           # (B, H, T, hd)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, t, w))
        return self.out(ctx)


class TransformerBlock(Module):
    """Pre-norm block: attention and a gelu MLP, both with residuals."""

    def __init__(self, rng, width: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadSelfAttention(rng, width, heads)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(rng, width, mlp_ratio * width)
        self.fc2 = Linear(rng, mlp_ratio * width, width)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = ops.add(x, self.attn(self.ln1(x), mask))
        h = self.fc2(ops.gelu(self.fc1(self.ln2(x))))
        return ops.add(x, h)


class TransformerStack(Module):
    def __init__(self, rng, layers: int, width: int, heads: int,
                 mlp_ratio: int = 4):
        self.blocks = [TransformerBlock(rng, width, heads, mlp_ratio)
                       for _ in range(layers)]
        self.ln_out = LayerNorm(width)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_out(x)


def causal_mask(t: int) -> np.ndarray:
    """Additive (T, T) mask: 0 where position i may attend to j (i >= j),
    effectively -inf on future positions."""
    if t < 1:
        raise ShapeError("causal_mask: T must be >= 1")
    mask = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, NEG_INF)
    return mask


def padding_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    """Additive (B, 1, 1, T) key mask blocking positions past each length."""
    lengths = np.asarray(lengths)
    cols = np.arange(t)[None, :]
    blocked = cols >= lengths[:, None]
    return np.where(blocked, NEG_INF, 0.0)[:, None, None, :]
