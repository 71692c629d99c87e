"""Parameters, module containers and the layers shared by every model part."""

from __future__ import annotations

import contextlib
import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_SHAPE_ONLY = False


@contextlib.contextmanager
def shape_only():
    """Build modules with zero-cost placeholder weights (parameter audits only)."""
    global _SHAPE_ONLY
    prev = _SHAPE_ONLY
    _SHAPE_ONLY = True
    try:
        yield
    finally:
        _SHAPE_ONLY = prev


class Parameter(Tensor):
    """A trainable leaf tensor.  ``frozen`` parameters are skipped by optimisers."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = frozen


def _init(shape, rng: np.random.Generator | None, std: float, dtype, fill: float | None = None):
    if _SHAPE_ONLY:
        return np.broadcast_to(np.zeros((), dtype=dtype), shape)
    if fill is not None:
        return np.full(shape, fill, dtype=dtype)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Module:
    """Attribute-walking container: Parameters, Modules and lists of Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_modules(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            unexpected = set(state) - set(params)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, bias: bool = True,
                 std: float | None = None, dtype=np.float64):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = Parameter(_init((d_in, d_out), rng, std, dtype) if std else
                                _init((d_in, d_out), rng, 0.0, dtype, fill=0.0))
        self.bias = Parameter(_init((d_out,), rng, 0.0, dtype, fill=0.0)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        self.gamma = Parameter(_init((dim,), None, 0.0, dtype, fill=1.0))
        self.beta = Parameter(_init((dim,), None, 0.0, dtype, fill=0.0))
        self.eps = eps

    def forward(self, x: Tensor, gamma: Tensor | None = None) -> Tensor:
        return ad.layer_norm(x, self.gamma if gamma is None else gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng=None, std: float = 0.02, dtype=np.float64):
        self.weight = Parameter(_init((n, dim), rng, std, dtype))

    def forward(self, ids) -> Tensor:
        return ad.take_rows(self.weight, ids)


class FeedForward(Module):
    """Two linear maps with an exact GeLU in between."""

    def __init__(self, dim: int, hidden: int, rng=None, dtype=np.float64):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    """Additive (n, n) mask: 0 on and below the diagonal, -1e9 above."""
    return np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)


def key_padding_mask(lengths, total: int, dtype=np.float64) -> np.ndarray:
    """Additive (B, 1, 1, total) mask hiding keys at positions >= length."""
    lengths = np.asarray(lengths)
    pad = np.arange(total)[None, :] >= lengths[:, None]
    return np.where(pad, -1e9, 0.0).astype(dtype)[:, None, None, :]


class MultiHeadAttention(Module):
    """Scaled dot-product attention with query/key/value/output projections.

    ``mode='diagonal'`` is an ablation hook: every query attends only to the
    key at its own position (requires equal query and key lengths).
    """

    def __init__(self, dim: int, n_heads: int, rng=None, kv_dim: int | None = None,
                 dtype=np.float64):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.query = Linear(dim, dim, rng, dtype=dtype)
        self.key = Linear(kv_dim, dim, rng, bias=False, dtype=dtype)
        self.value = Linear(kv_dim, dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)
        self.n_heads = n_heads
        self.mode = "full"
        self.last_weights: np.ndarray | None = None
        self.keep_weights = False

    def _heads(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, context: Tensor | None = None, mask=None) -> Tensor:
        """x: (B, Tq, D); context: (B, Tk, D_kv) or None for self-attention.

        ``mask`` is an additive array broadcastable to (B, H, Tq, Tk).
        """
        context = x if context is None else context
        b, tq, d = x.shape
        q = self._heads(self.query(x))
        k = self._heads(self.key(context))
        v = self._heads(self.value(context))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.n_heads))
        if self.mode == "diagonal":
            tk = context.shape[1]
            if tk != tq:
                raise ValueError("diagonal attention needs equal query/key lengths")
            scores = scores + np.where(np.eye(tq, dtype=bool), 0.0, -1e9).astype(x.dtype)
        if mask is not None:
            scores = scores + np.asarray(mask, dtype=x.dtype)
        weights = ad.softmax(scores, axis=-1)
        if self.keep_weights:
            self.last_weights = weights.data.copy()
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self.out(ctx)


def sinusoids(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal position table (length, dim), Whisper encoder style."""
    half = dim // 2
    scale = math.log(10000) / max(half - 1, 1)
    inv = np.exp(-scale * np.arange(half))
    ang = np.arange(length)[:, None] * inv[None, :]
    table = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if table.shape[1] < dim:
        table = np.pad(table, ((0, 0), (0, dim - table.shape[1])))
    return table.astype(dtype)


class Adam:
    """Adam without weight decay; frozen parameters are left untouched."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def step(self) -> float:
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)
        return norm
