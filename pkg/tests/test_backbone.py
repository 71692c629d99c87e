import time

import numpy as np
import pytest

from sqwhisper import autodiff as ad
from sqwhisper.autodiff import Tensor
from sqwhisper.backbone import (PREFIX_LEN, WhisperBackbone, compute_loss, conv_lengths, greedy_decode, prefix,
                                teacher_forcing)
from sqwhisper.config import ConfigError, ModelConfig, SpecialTokens
from sqwhisper.features import Waveform, compute_features, FeatureConfig
from sqwhisper.mixsim import SyntheticSpeaker
from sqwhisper.nn import Adam, MultiHeadAttention

from tolerances import CLOSED_FORM


def small_cfg(**kw):
    base = dict(n_mels=8, d_model=16, n_heads=2, d_ffn=32, n_enc_blocks=1, n_dec_blocks=2, max_target_len=8)
    base.update(kw)
    return ModelConfig.for_vocab(6, **base)


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, special=SpecialTokens(1, 1, 2, 3, 4))
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, special=SpecialTokens(6, 7, 8, 9, 10))
    cfg = ModelConfig.for_vocab(32)
    assert cfg.vocab_size == 37 and set(cfg.special.ids()) == set(range(32, 37))


def test_encode_lengths_with_and_without_prompt(rng):
    cfg = small_cfg()
    bb = WhisperBackbone(cfg, rng)
    feats = rng.standard_normal((1, 100, 8))
    out, lengths = bb.encode(feats)
    assert out.shape == (1, 50, 16) and lengths[0] == 50
    prompt = Tensor(rng.standard_normal((1, 16, 16)))
    out, lengths = bb.encode(feats, enc_prompt=prompt)
    assert out.shape == (1, 66, 16) and lengths[0] == 66
    assert list(conv_lengths([100, 7, 1])) == [50, 4, 1]


def test_feature_dim_mismatch(rng):
    bb = WhisperBackbone(small_cfg(), rng)
    with pytest.raises(ValueError):
        bb.encode(rng.standard_normal((1, 20, 9)))


def test_diagonal_attention_permutation_probe(rng):
    cfg = small_cfg(n_enc_blocks=2)
    bb = WhisperBackbone(cfg, rng)
    for blk in bb.encoder.blocks:
        blk.attn.mode = "diagonal"
    feats = rng.standard_normal((1, 100, 8))
    tail = np.arange(60, 100)
    permuted = feats.copy()
    permuted[0, tail] = feats[0, rng.permutation(tail)]
    a, _ = bb.encode(feats)
    b, _ = bb.encode(permuted)
    # row t sees frames 2t-2 .. 2t+2 through the two width-3 convolutions
    untouched = np.arange(50) < 29
    assert np.array_equal(a.data[0, untouched], b.data[0, untouched])
    assert not np.allclose(a.data[0, ~untouched], b.data[0, ~untouched])


def test_padded_batch_matches_single_items(rng):
    bb = WhisperBackbone(small_cfg(), rng)
    x1, x2 = rng.standard_normal((23, 8)), rng.standard_normal((14, 8))
    batch = np.zeros((2, 23, 8))
    batch[0], batch[1, :14] = x1, x2
    out, lengths = bb.encode(batch, [23, 14])
    single, _ = bb.encode(x2[None])
    assert np.allclose(out.data[1, :lengths[1]], single.data[0], atol=1e-12)
    ids = np.array([prefix(bb.cfg.special) + [1, 2]] * 2)
    lb = bb.decode_logits(out, lengths, ids)
    ls = bb.decode_logits(single, [7], ids[:1])
    assert np.allclose(lb.data[1], ls.data[0], atol=1e-12)


def test_teacher_forcing_layout():
    sp = SpecialTokens(6, 7, 8, 9, 10)
    inputs, tgt = teacher_forcing([[1, 2, 3], [4]], sp, n_prompt=2)
    assert inputs.tolist() == [[8, 6, 9, 10, 1, 2, 3], [8, 6, 9, 10, 4, 7, 7]]
    # stream: Prev, P, P, SOT, lang, task, y..., predicting the next stream element
    assert tgt.ids.shape == (2, 9)
    assert tgt.ids[0, 5:9].tolist() == [1, 2, 3, 7]
    assert tgt.loss_mask[0].tolist() == [False] * 5 + [True] * 4
    assert tgt.loss_mask[1].tolist() == [False] * 5 + [True] * 2 + [False] * 2
    assert tgt.ids[1, 5:7].tolist() == [4, 7]


def test_decode_requires_sot(rng):
    bb = WhisperBackbone(small_cfg(), rng)
    mem, lengths = bb.encode(rng.standard_normal((1, 10, 8)))
    with pytest.raises(ValueError):
        bb.decode_logits(mem, lengths, np.array([[8, 9, 10, 1]]))


def test_causality(rng):
    bb = WhisperBackbone(small_cfg(), rng)
    mem, lengths = bb.encode(rng.standard_normal((1, 12, 8)))
    prompt = Tensor(rng.standard_normal((1, 3, 16)))
    ids = np.array([prefix(bb.cfg.special) + [0, 1, 2, 3, 4]])
    base = bb.decode_logits(mem, lengths, ids, prompt).data
    for j in range(2, ids.shape[1]):  # position 1 must stay SOT
        pert = ids.copy()
        pert[0, j] = (pert[0, j] + 1) % 5
        out = bb.decode_logits(mem, lengths, pert, prompt).data
        stream_j = j + 3  # prompt rows sit after Prev
        assert np.array_equal(out[0, :stream_j], base[0, :stream_j])
        assert not np.allclose(out[0, stream_j:], base[0, stream_j:])


def test_zero_head_gives_uniform_ce(rng):
    cfg = small_cfg()
    bb = WhisperBackbone(cfg, rng)
    bb.decoder.head.weight.data[:] = 0
    bb.decoder.head.bias.data[:] = 0
    mem, lengths = bb.encode(rng.standard_normal((2, 12, 8)))
    inputs, tgt = teacher_forcing([[1, 2], [3, 4, 5]], cfg.special)
    loss = compute_loss(bb.decode_logits(mem, lengths, inputs), tgt)
    assert abs(float(loss.data) - np.log(cfg.vocab_size)) <= CLOSED_FORM


def test_compute_loss_oracles(rng):
    cfg = ModelConfig.for_vocab(27)  # 32 ids in total
    inputs, tgt = teacher_forcing([[1, 5, 9]], cfg.special)
    n, v = tgt.ids.shape[1], cfg.vocab_size
    assert abs(float(compute_loss(Tensor(np.zeros((1, n, v))), tgt).data) - np.log(32)) <= CLOSED_FORM
    perfect = np.full((1, n, v), -30.0)
    perfect[0, np.arange(n), tgt.ids[0]] = 30.0
    assert float(compute_loss(Tensor(perfect), tgt).data) < 1e-6
    # hand-sliced oracle: CE over the transcript positions only
    x = rng.standard_normal((1, n, v))
    got = float(compute_loss(Tensor(x), tgt).data)
    pos = np.flatnonzero(tgt.loss_mask[0])
    assert len(pos) == 4
    logp = x[0, pos] - np.log(np.exp(x[0, pos]).sum(-1, keepdims=True))
    assert abs(got - (-logp[np.arange(len(pos)), tgt.ids[0, pos]].mean())) < 1e-12


def test_prompt_masked_labels_do_not_affect_loss_or_grads(rng):
    cfg = small_cfg()
    bb = WhisperBackbone(cfg, rng)
    mem, lengths = bb.encode(rng.standard_normal((2, 12, 8)))
    prompt = Tensor(rng.standard_normal((2, 3, 16)), requires_grad=True)
    inputs, tgt = teacher_forcing([[1, 2], [3]], cfg.special, n_prompt=3)

    def run(ids):
        bb.zero_grad()
        prompt.grad = None
        logits = bb.decode_logits(mem, lengths, inputs, prompt)
        loss = compute_loss(logits, type(tgt)(ids, tgt.loss_mask))
        loss.backward()
        return float(loss.data), [p.grad.copy() for p in bb.parameters() if p.grad is not None], prompt.grad.copy()

    l1, g1, p1 = run(tgt.ids)
    scrambled = np.where(tgt.loss_mask, tgt.ids, rng.integers(0, cfg.vocab_size, tgt.ids.shape))
    l2, g2, p2 = run(scrambled)
    assert l1 == l2 and np.array_equal(p1, p2)
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_zero_decoder_prompt_plumbing(rng):
    """Zero prompt rows, self-attention restricted to the diagonal and positions recomputed
    so real tokens keep their slots: logits at the transcript positions are unchanged."""
    cfg = small_cfg()
    bb = WhisperBackbone(cfg, rng)
    for blk in bb.decoder.blocks:
        blk.attn.mode = "diagonal"
    mem, lengths = bb.encode(rng.standard_normal((1, 12, 8)))
    ids = np.array([prefix(cfg.special) + [1, 2, 3]])
    plain = bb.decoder(ids, mem, lengths).data
    lq = 3
    zero = Tensor(np.zeros((1, lq, 16)))
    n = ids.shape[1]
    positions = np.concatenate([[0], np.zeros(lq, dtype=int), np.arange(1, n)])
    prompted = bb.decoder(ids, mem, lengths, zero, positions).data
    assert prompted.shape[1] == plain.shape[1] + lq
    assert np.allclose(prompted[0, lq + 1:], plain[0, 1:], atol=1e-12)
    assert np.allclose(prompted[0, 0], plain[0, 0], atol=1e-12)


def test_greedy_decode_always_eot_and_tie_rule():
    sp = SpecialTokens(6, 7, 8, 9, 10)

    def eot_logits(ids):
        out = np.zeros((ids.shape[0], ids.shape[1], 11))
        out[..., 7] = 1.0
        return Tensor(out)

    assert greedy_decode(eot_logits, 2, sp, 5) == [[], []]

    calls = []

    def tie_logits(ids):
        calls.append(ids.shape[1])
        out = np.zeros((ids.shape[0], ids.shape[1], 11))
        out[..., [2, 4]] = 5.0  # tie between 2 and 4
        return Tensor(out)

    assert greedy_decode(tie_logits, 1, sp, 3) == [[2, 2, 2]]
    assert calls == [PREFIX_LEN, PREFIX_LEN + 1, PREFIX_LEN + 2]
    with pytest.raises(ValueError):
        greedy_decode(tie_logits, 1, sp, 0)


def _single_speaker_set(n=10, vocab=6, seed=0):
    spk = SyntheticSpeaker.create(0, 1, vocab, seed)
    rng = np.random.default_rng(seed)
    fc = FeatureConfig(n_mels=20)
    items = []
    for _ in range(n):
        toks = [int(t) for t in rng.integers(0, vocab, rng.integers(2, 5))]
        items.append((compute_features(spk.render(toks), fc), toks))
    return items


def _train_memorise(cfg, items, steps, seed=0):
    bb = WhisperBackbone(cfg, np.random.default_rng(seed))
    feats = [f for f, _ in items]
    lengths = np.array([len(f) for f in feats])
    x = np.zeros((len(feats), lengths.max(), feats[0].shape[1]))
    for i, f in enumerate(feats):
        x[i, :len(f)] = f
    mean, std = x[x != 0].mean(), x[x != 0].std()
    x = np.where(np.arange(x.shape[1])[None, :, None] < lengths[:, None, None], (x - mean) / std, 0.0)
    inputs, tgt = teacher_forcing([t for _, t in items], cfg.special)
    opt = Adam(bb.parameters(), lr=3e-3)
    loss = None
    for step in range(steps):
        bb.zero_grad()
        mem, ml = bb.encode(x, lengths)
        loss = compute_loss(bb.decode_logits(mem, ml, inputs), tgt)
        loss.backward()
        opt.step()
    return bb, x, lengths, float(loss.data)


def test_desk_preset_memorises_ten_samples_quickly():
    items = _single_speaker_set()
    cfg = ModelConfig.for_vocab(6, n_mels=20, d_model=64, n_heads=4, d_ffn=256, n_enc_blocks=2,
                                n_dec_blocks=2, max_target_len=6, dtype="float32")
    t0 = time.time()
    bb, x, lengths, final = _train_memorise(cfg, items, steps=150)
    assert time.time() - t0 < 120
    assert final < 1e-2
    with ad.no_grad():
        mem, ml = bb.encode(x, lengths)
        hyps = greedy_decode(lambda ids: bb.decode_logits(mem, ml, ids), len(items), cfg.special, 6)
    assert hyps == [t for _, t in items]


def test_encode_decode_deterministic(rng):
    cfg = small_cfg()
    a, b = WhisperBackbone(cfg, np.random.default_rng(3)), WhisperBackbone(cfg, np.random.default_rng(3))
    x = rng.standard_normal((1, 10, 8))
    ids = np.array([prefix(cfg.special) + [1]])
    ma, la = a.encode(x)
    mb, lb = b.encode(x)
    assert np.array_equal(a.decode_logits(ma, la, ids).data, b.decode_logits(mb, lb, ids).data)


def test_diagonal_mode_rejects_cross_lengths(rng):
    attn = MultiHeadAttention(8, 2, rng)
    attn.mode = "diagonal"
    with pytest.raises(ValueError):
        attn(Tensor(rng.standard_normal((1, 3, 8))), Tensor(rng.standard_normal((1, 4, 8))))
