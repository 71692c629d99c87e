"""Embedding-driven target-speaker conditioning between the conv block and
the encoder: additive, concatenation, FiLM and conditional layer norm.

The speaker embedding itself comes from a fixed seeded projection of the
enrollment's mean log-Mel vector; it stands in for a trained verifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, Module, Parameter, _init

EMBED_SEED = 20240601


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray
    speaker_id: str


def _projection(d_in: int, d_out: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, d_in, d_out]).standard_normal((d_in, d_out)) / np.sqrt(d_in)


def embed_enrollment(enrollment: np.ndarray, dim: int, seed: int = EMBED_SEED) -> np.ndarray:
    """Unit-norm ``dim`` vector from an enrollment feature matrix (T_e, F)."""
    feats = np.asarray(enrollment, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("enrollment must be a non-empty (frames, bins) matrix")
    mean = feats.mean(axis=0)
    # centre across bins: the shared log-floor offset would otherwise dominate every vector
    mean = mean - mean.mean()
    vec = mean @ _projection(feats.shape[1], dim, seed)
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ValueError("enrollment has no spectral contrast; embedding undefined")
    return vec / norm


def embed_speaker(speaker_id: str, enrollment: np.ndarray, dim: int = 32,
                  seed: int = EMBED_SEED) -> SpeakerEmbedding:
    return SpeakerEmbedding(embed_enrollment(enrollment, dim, seed), speaker_id)


def _repeat_time(e: Tensor, t: int) -> Tensor:
    """(B, D_e) -> (B, T, D_e)."""
    b, d = e.shape
    return e.reshape(b, 1, d) * np.ones((1, t, 1), dtype=e.dtype)


def adapt_add(h: Tensor, e: Tensor, w: Linear) -> Tensor:
    """H + repeat_T(w(e))."""
    b = e.shape[0]
    return h + w(e).reshape(b, 1, -1)


def adapt_cat(h: Tensor, e: Tensor, w: Linear) -> Tensor:
    """w([H, repeat_T(e)]) with w: D_h + D_e -> D_h."""
    return w(ad.concat([h, _repeat_time(e, h.shape[1])], axis=-1))


def adapt_film(h: Tensor, e: Tensor, w: Linear, b: Linear) -> Tensor:
    """w(e) * H + b(e), broadcast over time."""
    n = e.shape[0]
    return w(e).reshape(n, 1, -1) * h + b(e).reshape(n, 1, -1)


def cln_scale(e: Tensor, gamma: Tensor, w: Linear, b: Linear) -> Tensor:
    """Speaker-specific LN scale w(e) * gamma + b(e), shaped (B, 1, D_h)."""
    n = e.shape[0]
    return (w(e) * gamma + b(e)).reshape(n, 1, -1)


def adapt_cln(h: Tensor, e: Tensor, gamma: Tensor, beta: Tensor, w: Linear, b: Linear,
              eps: float = 1e-5) -> Tensor:
    """Layer norm of H whose scale is modulated by the speaker embedding."""
    return ad.layer_norm(h, cln_scale(e, gamma, w, b), beta, eps)


def _identity_linear(d_in: int, d_out: int, weight: np.ndarray, bias_fill: float, dtype) -> Linear:
    lin = Linear(d_in, d_out, std=0.0, dtype=dtype)
    lin.weight = Parameter(weight.astype(dtype) if weight is not None else _init((d_in, d_out), None, 0, dtype, 0.0))
    lin.bias = Parameter(_init((d_out,), None, 0, dtype, fill=bias_fill))
    return lin


class AddAdapter(Module):
    def __init__(self, d_e: int, d_h: int, dtype=np.float64):
        self.w = _identity_linear(d_e, d_h, None, 0.0, dtype)

    def forward(self, h, e):
        return adapt_add(h, e, self.w)


class CatAdapter(Module):
    def __init__(self, d_e: int, d_h: int, dtype=np.float64):
        weight = np.zeros((d_h + d_e, d_h)) if not _shape_only() else None
        if weight is not None:
            weight[:d_h] = np.eye(d_h)
        self.w = _identity_linear(d_h + d_e, d_h, weight, 0.0, dtype)

    def forward(self, h, e):
        return adapt_cat(h, e, self.w)


class FiLMAdapter(Module):
    def __init__(self, d_e: int, d_h: int, dtype=np.float64):
        self.w = _identity_linear(d_e, d_h, None, 1.0, dtype)
        self.b = _identity_linear(d_e, d_h, None, 0.0, dtype)

    def forward(self, h, e):
        return adapt_film(h, e, self.w, self.b)


class CLNAdapter(Module):
    """Conditional scales for the two layer norms of the first encoder block."""

    def __init__(self, d_e: int, d_h: int, dtype=np.float64):
        self.attn_w = _identity_linear(d_e, d_h, None, 1.0, dtype)
        self.attn_b = _identity_linear(d_e, d_h, None, 0.0, dtype)
        self.mlp_w = _identity_linear(d_e, d_h, None, 1.0, dtype)
        self.mlp_b = _identity_linear(d_e, d_h, None, 0.0, dtype)

    def gammas(self, e: Tensor, attn_ln: LayerNorm, mlp_ln: LayerNorm) -> tuple[Tensor, Tensor]:
        return (cln_scale(e, attn_ln.gamma, self.attn_w, self.attn_b),
                cln_scale(e, mlp_ln.gamma, self.mlp_w, self.mlp_b))


def _shape_only() -> bool:
    from . import nn
    return nn._SHAPE_ONLY


ADAPTERS = {"add": AddAdapter, "cat": CatAdapter, "film": FiLMAdapter, "cln": CLNAdapter}


def build_adapter(variant: str, d_e: int, d_h: int, dtype=np.float64) -> Module | None:
    if variant == "none":
        return None
    try:
        return ADAPTERS[variant](d_e, d_h, dtype)
    except KeyError:
        raise ValueError(f"unknown adapter {variant!r}") from None
