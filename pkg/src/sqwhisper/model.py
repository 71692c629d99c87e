"""Target-speaker recogniser: backbone plus optional embedding adapter and
optional speaker-querying prompts injected into the encoder and decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import CLNAdapter, build_adapter, embed_enrollment
from .autodiff import Tensor
from .backbone import TokenSequence, WhisperBackbone, compute_loss, greedy_decode, teacher_forcing
from .config import ModelConfig
from .nn import Module
from .sqformer import SQFormer, SQFormerConfig, SpeakerPrompt, averaged_attention


def pad_batch(mats: list[np.ndarray], value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(m) for m in mats])
    width = mats[0].shape[1]
    out = np.full((len(mats), lengths.max(), width), value, dtype=np.float64)
    for i, m in enumerate(mats):
        out[i, :len(m)] = m
    return out, lengths


@dataclass
class Batch:
    mixture: np.ndarray          # (B, T, n_mels) raw log-Mel
    mixture_lengths: np.ndarray
    enrollment: np.ndarray       # (B, T_e, n_mels)
    enrollment_lengths: np.ndarray
    transcripts: list[list[int]] = field(default_factory=list)
    speakers: list[str] = field(default_factory=list)
    embeddings: np.ndarray | None = None  # (B, D_e) fixed speaker embeddings

    def __len__(self) -> int:
        return len(self.mixture_lengths)

    @classmethod
    def from_lists(cls, mixtures, enrollments, transcripts=(), speakers=(), embed_dim: int | None = None):
        mix, mlen = pad_batch(list(mixtures))
        enr, elen = pad_batch(list(enrollments))
        emb = None
        if embed_dim:
            emb = np.stack([embed_enrollment(e, embed_dim) for e in enrollments])
        return cls(mix, mlen, enr, elen, [list(t) for t in transcripts], list(speakers), emb)


@dataclass
class ForwardOutput:
    logits: Tensor
    targets: TokenSequence
    prompt: SpeakerPrompt | None
    encoder_out: Tensor


class TargetSpeakerASR(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.backbone = WhisperBackbone(cfg, rng)
        self.adapter = build_adapter(cfg.adapter, cfg.d_embed, cfg.d_model, dtype)
        self.sqformer = None
        if cfg.sqformer:
            sq_cfg = SQFormerConfig(n_blocks=cfg.sq_blocks, n_heads=cfg.sq_heads, d_q=cfg.d_q,
                                    n_queries=cfg.n_queries, enroll_dim=cfg.n_mels,
                                    mixture_dim=cfg.d_model, d_ffn=cfg.sq_ffn)
            self.sqformer = SQFormer(sq_cfg, rng, dtype, d_model=cfg.d_model)
        self.assign_names()

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    @property
    def n_dec_prompt(self) -> int:
        return self.cfg.n_queries if (self.sqformer is not None and self.cfg.dec_prompt) else 0

    def _condition(self, batch: Batch):
        """H_conv after any embedding adapter, plus the speaker prompt if enabled."""
        bb = self.backbone
        h, lengths = bb.conv_features(batch.mixture, batch.mixture_lengths)
        gammas = None
        if self.adapter is not None:
            if batch.embeddings is None:
                raise ValueError("adapter model needs speaker embeddings in the batch")
            e = Tensor(np.asarray(batch.embeddings, dtype=self.dtype))
            if isinstance(self.adapter, CLNAdapter):
                blk = bb.encoder.blocks[0]
                gammas = self.adapter.gammas(e, blk.attn_ln, blk.mlp_ln)
                h_enc_in = h
            else:
                h_enc_in = self.adapter(h, e)
        else:
            h_enc_in = h
        prompt = None
        if self.sqformer is not None:
            enr = Tensor(bb.normalise(batch.enrollment))
            prompt = self.sqformer(enr, h, batch.enrollment_lengths, lengths)
        return h_enc_in, lengths, gammas, prompt

    def encode(self, batch: Batch):
        h, lengths, gammas, prompt = self._condition(batch)
        enc_prompt = prompt.projected if (prompt is not None and self.cfg.enc_prompt) else None
        memory, mem_lengths = self.backbone.encoder(h, lengths, enc_prompt, gammas)
        if enc_prompt is not None and not self.cfg.enc_prompt_keep:
            lq = enc_prompt.shape[1]
            memory, mem_lengths = memory[:, lq:], mem_lengths - lq
        dec_prompt = prompt.projected if (prompt is not None and self.cfg.dec_prompt) else None
        return memory, mem_lengths, prompt, dec_prompt

    def forward(self, batch: Batch) -> ForwardOutput:
        memory, mem_lengths, prompt, dec_prompt = self.encode(batch)
        ids, targets = teacher_forcing(batch.transcripts, self.cfg.special, self.n_dec_prompt)
        logits = self.backbone.decode_logits(memory, mem_lengths, ids, dec_prompt)
        return ForwardOutput(logits, targets, prompt, memory)

    def loss(self, batch: Batch) -> tuple[Tensor, ForwardOutput]:
        out = self.forward(batch)
        return compute_loss(out.logits, out.targets), out

    def transcribe(self, batch: Batch, max_len: int | None = None) -> list[list[int]]:
        max_len = self.cfg.max_target_len if max_len is None else max_len
        with ad.no_grad():
            memory, mem_lengths, _, dec_prompt = self.encode(batch)

            def step(ids):
                return self.backbone.decode_logits(memory, mem_lengths, ids, dec_prompt)

            return greedy_decode(step, len(batch), self.cfg.special, max_len)

    def speaker_prompts(self, batch: Batch) -> SpeakerPrompt:
        with ad.no_grad():
            return self._condition(batch)[3]

    def dump_cross_attention(self, batch: Batch, index: int = 0) -> np.ndarray:
        """Head- and layer-averaged (L_q, T) query-to-mixture attention for one item."""
        if self.sqformer is None:
            raise ValueError("model has no speaker-querying module")
        self.sqformer.record_attention(True)
        try:
            with ad.no_grad():
                self._condition(batch)
            maps = self.sqformer.cross_attention_maps()
        finally:
            self.sqformer.record_attention(False)
        length = int((batch.mixture_lengths[index] + 1) // 2)
        return averaged_attention(maps, index, length)
