"""Parameter containers and transformer building blocks on top of ``tensor``."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def causal_mask(n: int) -> np.ndarray:
    """(n, n) additive mask: 0 on and below the diagonal, MASK_VALUE above."""
    return np.triu(np.full((n, n), T.MASK_VALUE), k=1)


def param(shape, rng: np.random.Generator | None = None, std: float = 0.02) -> Tensor:
    data = np.zeros(shape) if rng is None or std == 0 else rng.normal(0.0, std, size=shape)
    return Tensor(data, requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data[...] = value

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = param((d_in, d_out), rng, std)
        self.bias = param((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = param((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Attention(Module):
    """Multi-head scaled dot-product attention.

    With ``context`` given the queries come from ``x`` and keys/values from
    ``context`` (cross-attention). The most recent attention probabilities are
    kept in ``last_weights`` for inspection.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise ValueError("dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, context: Tensor | None = None,
                 mask: np.ndarray | None = None) -> Tensor:
        ctx = x if context is None else context
        b, n, d = x.shape
        q, k, v = self._heads(self.q(x)), self._heads(self.k(ctx)), self._heads(self.v(ctx))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // self.n_heads))
        if mask is not None:
            scores = scores + mask
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(mixed)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block with optional cross-attention sublayer."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, cross: bool = False,
                 mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, n_heads, rng)
        if cross:
            self.ln_cross = LayerNorm(dim)
            self.cross = Attention(dim, n_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)
        self.has_cross = cross

    def __call__(self, x: Tensor, context: Tensor | None = None, mask=None,
                 rng=None, p: float = 0.0) -> Tensor:
        x = x + T.dropout(self.attn(self.ln1(x), mask=mask), p, rng)
        if self.has_cross:
            if context is None:
                raise ValueError("cross-attention block needs a context")
            x = x + T.dropout(self.cross(self.ln_cross(x), context=context), p, rng)
        return x + T.dropout(self.mlp(self.ln2(x)), p, rng)
