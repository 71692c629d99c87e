"""Whisper-shaped encoder-decoder: conv downsampling, Transformer blocks,
special-token prefix, teacher-forced cross-entropy and greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, SpecialTokens
from .nn import (Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter,
                 _init, causal_mask, key_padding_mask, sinusoids)

PREFIX_LEN = 4  # Prev, SOT, language, task


def conv_lengths(frame_lengths) -> np.ndarray:
    """Valid rows after the stride-2 conv (width 3, padding 1): ceil(T / 2)."""
    return (np.asarray(frame_lengths) + 1) // 2


class ConvBlock(Module):
    def __init__(self, n_mels: int, dim: int, rng, dtype):
        self.kernel1 = Parameter(_init((3, n_mels, dim), rng, 1 / np.sqrt(3 * n_mels), dtype))
        self.bias1 = Parameter(_init((dim,), rng, 0.0, dtype, fill=0.0))
        self.kernel2 = Parameter(_init((3, dim, dim), rng, 1 / np.sqrt(3 * dim), dtype))
        self.bias2 = Parameter(_init((dim,), rng, 0.0, dtype, fill=0.0))

    def forward(self, x: Tensor, frame_mask: np.ndarray | None = None) -> Tensor:
        h = ad.gelu(ad.conv1d(x, self.kernel1, self.bias1, stride=1, padding=1))
        if frame_mask is not None:
            # zero rows past each utterance so padding never leaks into valid rows
            h = h * frame_mask[..., None].astype(h.dtype)
        return ad.gelu(ad.conv1d(h, self.kernel2, self.bias2, stride=2, padding=1))


class EncoderBlock(Module):
    def __init__(self, dim: int, n_heads: int, d_ffn: int, rng, dtype):
        self.attn_ln = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, n_heads, rng, dtype=dtype)
        self.mlp_ln = LayerNorm(dim, dtype=dtype)
        self.mlp = FeedForward(dim, d_ffn, rng, dtype=dtype)

    def forward(self, x: Tensor, mask=None, gammas: tuple | None = None) -> Tensor:
        g_attn, g_mlp = gammas if gammas is not None else (None, None)
        x = x + self.attn(self.attn_ln(x, g_attn), mask=mask)
        return x + self.mlp(self.mlp_ln(x, g_mlp))


class DecoderBlock(Module):
    def __init__(self, dim: int, n_heads: int, d_ffn: int, rng, dtype):
        self.attn_ln = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, n_heads, rng, dtype=dtype)
        self.cross_ln = LayerNorm(dim, dtype=dtype)
        self.cross_attn = MultiHeadAttention(dim, n_heads, rng, dtype=dtype)
        self.mlp_ln = LayerNorm(dim, dtype=dtype)
        self.mlp = FeedForward(dim, d_ffn, rng, dtype=dtype)

    def forward(self, x: Tensor, memory: Tensor, self_mask, memory_mask) -> Tensor:
        x = x + self.attn(self.attn_ln(x), mask=self_mask)
        x = x + self.cross_attn(self.cross_ln(x), memory, mask=memory_mask)
        return x + self.mlp(self.mlp_ln(x))


class AudioEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.conv = ConvBlock(cfg.n_mels, cfg.d_model, rng, dtype)
        self.blocks = [EncoderBlock(cfg.d_model, cfg.n_heads, cfg.d_ffn, rng, dtype)
                       for _ in range(cfg.n_enc_blocks)]
        self.ln_post = LayerNorm(cfg.d_model, dtype=dtype)

    def forward(self, h: Tensor, lengths, prompt: Tensor | None = None,
                block0_gammas: tuple | None = None) -> tuple[Tensor, np.ndarray]:
        """Run the Transformer blocks on post-conv rows ``h`` (B, T, D).

        Prompt rows are prepended and take the leading position slots.
        Returns the encoder output and the per-utterance valid lengths.
        """
        lengths = np.asarray(lengths)
        if prompt is not None:
            h = ad.concat([prompt, h], axis=1)
            lengths = lengths + prompt.shape[1]
        b, t, d = h.shape
        x = h + sinusoids(t, d, h.dtype)
        mask = key_padding_mask(lengths, t, h.dtype)
        for i, block in enumerate(self.blocks):
            x = block(x, mask, block0_gammas if i == 0 else None)
        return self.ln_post(x), lengths


class TextDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.token_embedding = Embedding(cfg.vocab_size, cfg.d_model, rng, dtype=dtype)
        self.positional_embedding = Parameter(_init((cfg.max_positions, cfg.d_model), rng, 0.02, dtype))
        self.blocks = [DecoderBlock(cfg.d_model, cfg.n_heads, cfg.d_ffn, rng, dtype)
                       for _ in range(cfg.n_dec_blocks)]
        self.ln = LayerNorm(cfg.d_model, dtype=dtype)
        self.head = Linear(cfg.d_model, cfg.vocab_size, rng, std=cfg.d_model ** -0.5, dtype=dtype)

    def forward(self, ids: np.ndarray, memory: Tensor, memory_lengths, prompt: Tensor | None = None,
                positions: np.ndarray | None = None) -> Tensor:
        """ids: (B, N) starting [Prev, SOT, lang, task, ...]; returns (B, N + L_q, V)."""
        ids = np.asarray(ids)
        emb = self.token_embedding(ids)
        if prompt is not None:
            emb = ad.concat([emb[:, :1], prompt, emb[:, 1:]], axis=1)
        n = emb.shape[1]
        if n > self.positional_embedding.shape[0]:
            raise ValueError(f"decoder stream of {n} exceeds {self.positional_embedding.shape[0]} positions")
        if positions is None:
            x = emb + self.positional_embedding[:n]
        else:
            x = emb + ad.take_rows(self.positional_embedding, positions)
        self_mask = causal_mask(n, x.dtype)
        mem_mask = key_padding_mask(memory_lengths, memory.shape[1], x.dtype)
        for block in self.blocks:
            x = block(x, memory, self_mask, mem_mask)
        return self.head(self.ln(x))


@dataclass
class TokenSequence:
    """Decoder stream targets: ``ids[p]`` is the label predicted at stream position p."""

    ids: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        if self.ids.shape != self.loss_mask.shape:
            raise ValueError("ids and loss_mask must have equal shape")


def prefix(special: SpecialTokens) -> list[int]:
    return [special.prev, special.sot, special.lang, special.task]


def teacher_forcing(transcripts, special: SpecialTokens, n_prompt: int = 0
                    ) -> tuple[np.ndarray, TokenSequence]:
    """Decoder inputs and aligned targets for a batch of transcripts.

    Inputs are ``[Prev, SOT, lang, task, y_1 .. y_L]`` (right padded with EOT).
    Targets cover the whole embedding stream including ``n_prompt`` prompt
    slots after Prev; only the positions predicting ``y_1 .. y_L, EOT`` count.
    """
    lmax = max(len(t) for t in transcripts)
    b = len(transcripts)
    inputs = np.full((b, PREFIX_LEN + lmax), special.eot, dtype=np.int64)
    n = PREFIX_LEN + lmax + n_prompt
    targets = np.full((b, n), special.eot, dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    first = PREFIX_LEN - 1 + n_prompt  # stream position of the task token
    for i, ys in enumerate(transcripts):
        inputs[i, :PREFIX_LEN] = prefix(special)
        inputs[i, PREFIX_LEN:PREFIX_LEN + len(ys)] = ys
        stream = [special.prev] + [-1] * n_prompt + prefix(special)[1:] + list(ys) + [special.eot]
        nxt = stream[1:]
        targets[i, :len(nxt)] = [special.eot if t < 0 else t for t in nxt]
        mask[i, first:first + len(ys) + 1] = True
    return inputs, TokenSequence(targets, mask)


def compute_loss(logits: Tensor, targets: TokenSequence) -> Tensor:
    """Teacher-forced cross-entropy restricted to transcript positions."""
    return ad.cross_entropy(logits, targets.ids, ~targets.loss_mask)


class WhisperBackbone(Module):
    """Encoder-decoder without any target-speaker conditioning."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        dtype = np.dtype(cfg.dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.encoder = AudioEncoder(cfg, rng, dtype)
        self.decoder = TextDecoder(cfg, rng, dtype)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def normalise(self, feats: np.ndarray) -> np.ndarray:
        return ((np.asarray(feats) - self.cfg.feat_mean) / self.cfg.feat_std).astype(self.dtype)

    def conv_features(self, feats: np.ndarray, frame_lengths=None) -> tuple[Tensor, np.ndarray]:
        """Normalised log-Mel (B, T, n_mels) -> H_conv (B, ceil(T/2), D) and lengths."""
        feats = np.asarray(feats)
        if feats.shape[-1] != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} mel bins, got {feats.shape[-1]}")
        b, t, _ = feats.shape
        frame_lengths = np.full(b, t) if frame_lengths is None else np.asarray(frame_lengths)
        valid = np.arange(t)[None, :] < frame_lengths[:, None]
        x = Tensor(np.where(valid[..., None], self.normalise(feats), 0.0).astype(self.dtype))
        h = self.encoder.conv(x, valid)
        lengths = conv_lengths(frame_lengths)
        hmask = np.arange(h.shape[1])[None, :] < lengths[:, None]
        return h * hmask[..., None].astype(self.dtype), lengths

    def encode(self, feats: np.ndarray, frame_lengths=None, enc_prompt: Tensor | None = None
               ) -> tuple[Tensor, np.ndarray]:
        h, lengths = self.conv_features(feats, frame_lengths)
        return self.encoder(h, lengths, enc_prompt)

    def decode_logits(self, memory: Tensor, memory_lengths, ids: np.ndarray,
                      dec_prompt: Tensor | None = None) -> Tensor:
        ids = np.atleast_2d(ids)
        if ids.shape[1] < 2 or np.any(ids[:, 1] != self.cfg.special.sot):
            raise ValueError("decoder prefix must be [Prev, SOT, ...]")
        return self.decoder(ids, memory, memory_lengths, dec_prompt)


def greedy_decode(step_logits, batch: int, special: SpecialTokens, max_len: int) -> list[list[int]]:
    """Append argmax tokens until EOT or ``max_len``; ties go to the lowest id.

    ``step_logits(ids)`` maps decoder inputs (B, N) to logits whose last
    position scores the next token.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = np.tile(np.array(prefix(special), dtype=np.int64), (batch, 1))
    done = np.zeros(batch, dtype=bool)
    out: list[list[int]] = [[] for _ in range(batch)]
    with ad.no_grad():
        for _ in range(max_len):
            logits = step_logits(ids)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            for i in range(batch):
                if not done[i]:
                    if nxt[i] == special.eot:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if done.all():
                break
            nxt = np.where(done, special.eot, nxt)
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return out
