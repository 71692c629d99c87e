"""Speaker-querying Transformer.

A fixed set of trainable queries first reads the enrollment through joint
self-attention (learn), then reads the mixture through cross-attention
(search), and finally each stream passes through its own feed-forward net
(transform).  The query stream that leaves the last block is the speaker
prompt; its row mean is contrasted against the pooled enrollment stream of
the same and of other speakers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, _init, key_padding_mask


@dataclass(frozen=True)
class SQFormerConfig:
    n_blocks: int = 2
    n_heads: int = 4
    d_q: int = 64
    n_queries: int = 4
    enroll_dim: int = 40
    mixture_dim: int = 64
    d_ffn: int = 256

    def __post_init__(self):
        if self.d_q % self.n_heads:
            raise ValueError(f"d_q={self.d_q} not divisible by {self.n_heads} heads")
        if self.n_queries < 1:
            raise ValueError("need at least one query")


@dataclass(frozen=True)
class ContrastiveConfig:
    kappa: float = 0.1
    negatives: int = 10
    alpha: float = 20.0

    def __post_init__(self):
        if self.kappa <= 0 or self.negatives < 1 or self.alpha < 0:
            raise ValueError("need kappa > 0, negatives >= 1, alpha >= 0")


@dataclass
class SpeakerPrompt:
    prompts: Tensor          # (B, L_q, D_q)
    pooled: Tensor           # (B, D_q), row mean of prompts
    enroll_pooled: Tensor    # (B, D_q), masked mean of the enrollment stream
    projected: Tensor | None = None  # (B, L_q, D_h)


def _masked_mean(x: Tensor, lengths) -> Tensor:
    lengths = np.asarray(lengths)
    valid = (np.arange(x.shape[1])[None, :] < lengths[:, None]).astype(x.dtype)
    return (x * valid[..., None]).sum(axis=1) / lengths[:, None].astype(x.dtype)


class SQFormerBlock(Module):
    def __init__(self, cfg: SQFormerConfig, rng, dtype=np.float64):
        d = cfg.d_q
        self.self_ln = LayerNorm(d, dtype=dtype)
        self.self_attn = MultiHeadAttention(d, cfg.n_heads, rng, dtype=dtype)
        self.mixture_proj = Linear(cfg.mixture_dim, d, rng, dtype=dtype)
        self.cross_ln = LayerNorm(d, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d, cfg.n_heads, rng, dtype=dtype)
        self.query_ffn_ln = LayerNorm(d, dtype=dtype)
        self.query_ffn = FeedForward(d, cfg.d_ffn, rng, dtype=dtype)
        self.enroll_ffn_ln = LayerNorm(d, dtype=dtype)
        self.enroll_ffn = FeedForward(d, cfg.d_ffn, rng, dtype=dtype)

    def learn(self, q: Tensor, e: Tensor, enroll_lengths=None) -> tuple[Tensor, Tensor]:
        """Joint self-attention over [queries; enrollment], split back by length."""
        b, lq, _ = q.shape
        te = e.shape[1]
        if te == 0:
            raise ValueError("empty enrollment")
        joint = ad.concat([q, e], axis=1)
        lengths = np.full(b, te) if enroll_lengths is None else np.asarray(enroll_lengths)
        mask = key_padding_mask(lq + lengths, lq + te, joint.dtype)
        joint = joint + self.self_attn(self.self_ln(joint), mask=mask)
        return joint[:, :lq], joint[:, lq:]

    def search(self, q: Tensor, h: Tensor, mixture_lengths=None) -> Tensor:
        """Queries attend to the projected mixture rows."""
        if h.shape[1] == 0:
            raise ValueError("empty mixture")
        kv = self.mixture_proj(h)
        mask = None
        if mixture_lengths is not None:
            mask = key_padding_mask(mixture_lengths, h.shape[1], q.dtype)
        return q + self.cross_attn(self.cross_ln(q), kv, mask=mask)

    def transform(self, p: Tensor, e: Tensor) -> tuple[Tensor, Tensor]:
        p = p + self.query_ffn(self.query_ffn_ln(p))
        e = e + self.enroll_ffn(self.enroll_ffn_ln(e))
        return p, e

    def forward(self, q, e, h, enroll_lengths=None, mixture_lengths=None):
        q, e = self.learn(q, e, enroll_lengths)
        p = self.search(q, h, mixture_lengths)
        return self.transform(p, e)


class SQFormer(Module):
    def __init__(self, cfg: SQFormerConfig, rng: np.random.Generator | None = None,
                 dtype=np.float64, d_model: int | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.queries = Parameter(_init((cfg.n_queries, cfg.d_q), rng, 0.02, dtype))
        self.enroll_proj = Linear(cfg.enroll_dim, cfg.d_q, rng, dtype=dtype)
        self.blocks = [SQFormerBlock(cfg, rng, dtype) for _ in range(cfg.n_blocks)]
        self.query_ln = LayerNorm(cfg.d_q, dtype=dtype)
        self.enroll_ln = LayerNorm(cfg.d_q, dtype=dtype)
        # one D_q -> D_h map shared by the encoder and decoder injection sites
        self.prompt_proj = Linear(cfg.d_q, d_model, rng, dtype=dtype) if d_model else None

    def forward(self, enrollment: Tensor, mixture: Tensor, enroll_lengths=None,
                mixture_lengths=None) -> SpeakerPrompt:
        """enrollment: (B, T_e, D_e) features; mixture: (B, T, D_h) post-conv rows."""
        b, te, _ = enrollment.shape
        if te == 0:
            raise ValueError("empty enrollment")
        q = ad.broadcast_rows(self.queries, b)
        e = self.enroll_proj(enrollment)
        for block in self.blocks:
            q, e = block(q, e, mixture, enroll_lengths, mixture_lengths)
        p = self.query_ln(q)
        e = self.enroll_ln(e)
        lengths = np.full(b, te) if enroll_lengths is None else enroll_lengths
        prompt = SpeakerPrompt(prompts=p, pooled=p.mean(axis=1), enroll_pooled=_masked_mean(e, lengths))
        if self.prompt_proj is not None:
            prompt.projected = self.prompt_proj(p)
        return prompt

    def cross_attention_maps(self) -> list[np.ndarray]:
        return [blk.cross_attn.last_weights for blk in self.blocks]

    def record_attention(self, on: bool = True) -> None:
        for blk in self.blocks:
            blk.cross_attn.keep_weights = on


# -- losses ------------------------------------------------------------------

def speaker_contrastive_loss(pooled: Tensor, positive: Tensor, negatives, kappa: float = 0.1) -> Tensor:
    """-log softmax over cosine similarities, positive first, denominator includes it.

    ``pooled`` and ``positive`` are (D,) vectors; ``negatives`` is a sequence
    of (D,) vectors or a (K, D) tensor.
    """
    if isinstance(negatives, Tensor):
        cands = ad.concat([positive.reshape(1, -1), negatives], axis=0)
    else:
        cands = ad.concat([positive.reshape(1, -1)] + [n.reshape(1, -1) for n in negatives], axis=0)
    sims = ad.cosine_similarity(pooled.reshape(1, -1), cands, axis=-1) * (1.0 / kappa)
    return ad.cross_entropy(sims.reshape(1, -1), np.zeros(1, dtype=np.int64))


def sample_negatives(speakers, k: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean (B, B) candidate matrix: the diagonal plus up to ``k`` other-speaker samples per row."""
    speakers = np.asarray(speakers)
    b = len(speakers)
    cand = np.eye(b, dtype=bool)
    for i in range(b):
        pool = np.flatnonzero(speakers != speakers[i])
        if len(pool) > k:
            pool = rng.choice(pool, size=k, replace=False)
        cand[i, pool] = True
    return cand


def batch_contrastive_loss(pooled: Tensor, enroll_pooled: Tensor, candidates: np.ndarray,
                           kappa: float = 0.1) -> Tensor:
    """Mean over the batch of the per-anchor speaker contrastive loss.

    Row i of ``candidates`` selects which pooled enrollments enter anchor i's
    denominator; column i (its own enrollment) is the positive.
    """
    pn = (pooled * pooled).sum(axis=-1, keepdims=True).sqrt()
    en = (enroll_pooled * enroll_pooled).sum(axis=-1, keepdims=True).sqrt()
    if np.any(pn.data == 0) or np.any(en.data == 0):
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    sims = (pooled / pn) @ (enroll_pooled / en).T * (1.0 / kappa)
    sims = sims + np.where(candidates, 0.0, -1e9).astype(sims.dtype)
    return ad.cross_entropy(sims, np.arange(len(candidates)))


def combined_loss(ce: Tensor, contrastive: Tensor, alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0:
        return ce
    return ce + contrastive * alpha


# -- analysis ----------------------------------------------------------------

def prompt_separation_metric(vectors: np.ndarray, labels) -> float:
    """Mean silhouette coefficient of pooled prompts grouped by speaker (cosine distance)."""
    from sklearn.metrics import silhouette_score

    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("need at least two speakers")
    if counts.min() < 2:
        raise ValueError("need at least two prompts per speaker")
    if np.allclose(vectors, vectors[0]):
        raise ValueError("all prompts identical: single degenerate cluster")
    return float(silhouette_score(vectors, labels, metric="cosine"))


def averaged_attention(maps: list[np.ndarray], index: int = 0, length: int | None = None) -> np.ndarray:
    """Head- and layer-averaged (L_q, T) cross-attention for one batch item."""
    grid = np.mean([m[index].mean(axis=0) for m in maps], axis=0)
    return grid if length is None else grid[:, :length]


def write_attention_grid(path: str | Path, grid: np.ndarray) -> None:
    np.savetxt(path, np.asarray(grid), fmt="%.6f")
