import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sqwhisper.autodiff import Tensor
from sqwhisper.gradcheck import finite_difference_check
from sqwhisper.sqformer import (ContrastiveConfig, SQFormer, SQFormerBlock, SQFormerConfig, averaged_attention,
                                batch_contrastive_loss, combined_loss, prompt_separation_metric, sample_negatives,
                                speaker_contrastive_loss, write_attention_grid)

from tolerances import ATTENTION_ROW_SUM, CLOSED_FORM, E2E_GRAD_RTOL, FD_EPS, OP_GRAD_RTOL, SOFTMAX_SUM


def small(**kw):
    base = dict(n_blocks=2, n_heads=2, d_q=8, n_queries=3, enroll_dim=5, mixture_dim=6, d_ffn=12)
    base.update(kw)
    return SQFormerConfig(**base)


def probe(out):
    return (out * np.random.default_rng(8).standard_normal(out.shape)).sum()


def vec(*x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


# -- Learn / Search / Transform ---------------------------------------------------

def test_learn_split_shapes(rng):
    block = SQFormerBlock(small(d_q=16, n_heads=4), rng)
    q = Tensor(rng.standard_normal((1, 16, 16)))
    e = Tensor(rng.standard_normal((1, 50, 16)))
    q2, e2 = block.learn(q, e)
    assert q2.shape == (1, 16, 16) and e2.shape == (1, 50, 16)
    with pytest.raises(ValueError):
        block.learn(q, Tensor(np.zeros((1, 0, 16))))


def test_learn_identical_rows_stay_identical(rng):
    block = SQFormerBlock(small(), rng)
    row = rng.standard_normal(8)
    q = Tensor(np.broadcast_to(row, (1, 3, 8)).copy())
    e = Tensor(np.broadcast_to(row, (1, 6, 8)).copy())
    q2, e2 = block.learn(q, e)
    assert np.allclose(q2.data[0], q2.data[0, :1], atol=1e-12)
    assert np.allclose(e2.data[0], q2.data[0, :1], atol=1e-12)


def test_learn_split_boundary_fixed(rng):
    block = SQFormerBlock(small(), rng)
    q = Tensor(rng.standard_normal((1, 3, 8)))
    e = rng.standard_normal((1, 6, 8))
    base_q, _ = block.learn(q, Tensor(e))
    for j in range(6):
        pert = e.copy()
        pert[0, j] += np.linspace(-1, 1, 8)
        q2, e2 = block.learn(q, Tensor(pert))
        assert q2.shape == base_q.shape and e2.shape == (1, 6, 8)
        assert not np.allclose(q2.data, base_q.data)


def test_search_single_frame(rng):
    block = SQFormerBlock(small(), rng)
    q = Tensor(rng.standard_normal((1, 3, 8)))
    h = Tensor(rng.standard_normal((1, 1, 6)))
    delta = block.search(q, h).data - q.data
    assert np.allclose(delta[0], delta[0, :1], atol=1e-12)
    attn = block.cross_attn
    v = block.mixture_proj(h).data @ attn.value.weight.data + attn.value.bias.data
    assert np.allclose(delta[0, 0], v[0, 0] @ attn.out.weight.data + attn.out.bias.data, atol=1e-12)
    with pytest.raises(ValueError):
        block.search(q, Tensor(np.zeros((1, 0, 6))))


def test_search_constant_mixture_ignores_attention_weights(rng):
    block = SQFormerBlock(small(), rng)
    q = Tensor(rng.standard_normal((1, 3, 8)))
    h = Tensor(np.broadcast_to(rng.standard_normal(6), (1, 9, 6)).copy())
    a = block.search(q, h).data
    block.cross_attn.query.weight.data = rng.standard_normal((8, 8)) * 3
    block.cross_attn.key.weight.data = rng.standard_normal((8, 8)) * 3
    assert np.allclose(block.search(q, h).data, a, atol=1e-12)


def test_attention_rows_sum_to_one(rng):
    block = SQFormerBlock(small(), rng)
    block.cross_attn.keep_weights = True
    block.search(Tensor(rng.standard_normal((2, 3, 8))), Tensor(rng.standard_normal((2, 7, 6))), [7, 4])
    w = block.cross_attn.last_weights
    assert np.max(np.abs(w.sum(-1) - 1)) <= SOFTMAX_SUM
    assert np.all(w[1, ..., 4:] < 1e-300)


def test_transform_zero_ffn_is_identity(rng):
    block = SQFormerBlock(small(), rng)
    for ffn in (block.query_ffn, block.enroll_ffn):
        ffn.fc2.weight.data[:] = 0
        ffn.fc2.bias.data[:] = 0
    p, e = Tensor(rng.standard_normal((1, 3, 8))), Tensor(rng.standard_normal((1, 5, 8)))
    p2, e2 = block.transform(p, e)
    assert np.array_equal(p2.data, p.data) and np.array_equal(e2.data, e.data)


def test_transform_rowwise(rng):
    block = SQFormerBlock(small(), rng)
    p, e = rng.standard_normal((1, 3, 8)), rng.standard_normal((1, 5, 8))
    perm = np.array([2, 0, 1])
    a, _ = block.transform(Tensor(p), Tensor(e))
    b, _ = block.transform(Tensor(p[:, perm]), Tensor(e))
    assert np.allclose(b.data, a.data[:, perm], atol=1e-14)


# -- full module -------------------------------------------------------------------

def test_forward_shapes_and_composition(rng):
    cfg = small()
    sq = SQFormer(cfg, np.random.default_rng(1), d_model=10)
    enr = Tensor(rng.standard_normal((2, 6, 5)))
    mix = Tensor(rng.standard_normal((2, 9, 6)))
    out = sq(enr, mix)
    assert out.prompts.shape == (2, 3, 8) and out.pooled.shape == (2, 8) and out.projected.shape == (2, 3, 10)
    assert np.allclose(out.pooled.data, out.prompts.data.mean(axis=1), atol=1e-14)
    q = Tensor(np.broadcast_to(sq.queries.data, (2, 3, 8)).copy())
    e = sq.enroll_proj(enr)
    for blk in sq.blocks:
        q, e = blk.transform(blk.search(*blk.learn(q, e)[:1], mix), blk.learn(q, e)[1])
    assert np.array_equal(sq.query_ln(q).data, out.prompts.data)
    again = SQFormer(cfg, np.random.default_rng(1), d_model=10)(enr, mix)
    assert np.array_equal(again.projected.data, out.projected.data)


def test_queries_initialised_small():
    sq = SQFormer(SQFormerConfig(d_q=64, n_heads=4, n_queries=256), np.random.default_rng(0))
    assert abs(sq.queries.data.std() - 0.02) < 0.002


def test_config_invariants():
    with pytest.raises(ValueError):
        SQFormerConfig(d_q=10, n_heads=4)
    with pytest.raises(ValueError):
        SQFormerConfig(n_queries=0)
    with pytest.raises(ValueError):
        ContrastiveConfig(kappa=0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_through_block_stack(seed):
    rng = np.random.default_rng(seed)
    sq = SQFormer(small(), rng, d_model=6)
    enr = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)
    mix = Tensor(rng.standard_normal((2, 5, 6)), requires_grad=True)

    def f():
        out = sq(enr, mix, [4, 3], [5, 2])
        return probe(out.projected) + probe(out.enroll_pooled)

    params = [sq.queries, sq.enroll_proj.weight] + sq.blocks[0].parameters()
    assert finite_difference_check(f, params + [enr, mix], FD_EPS, max_coords=12, rng=rng) <= E2E_GRAD_RTOL


# -- contrastive loss ----------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 10])
def test_contrastive_uniform_is_log_k_plus_one(k):
    p = vec(1.0, 0.0)
    negs = [vec(1.0, 0.0) for _ in range(k)]
    loss = speaker_contrastive_loss(p, vec(1.0, 0.0), negs, kappa=0.1)
    assert abs(float(loss.data) - np.log(k + 1)) <= CLOSED_FORM


def test_contrastive_hand_value_and_limit():
    loss = speaker_contrastive_loss(vec(1.0, 0.0), vec(1.0, 0.0), [vec(0.0, 1.0)], kappa=1.0)
    assert abs(float(loss.data) - np.log(1 + np.exp(-1))) <= CLOSED_FORM
    assert abs(float(loss.data) - 0.31326) < 1e-5
    lim = speaker_contrastive_loss(vec(1.0, 0.0), vec(2.0, 0.0), [vec(-1.0, 0.0)] * 10, kappa=0.05)
    assert float(lim.data) < 1e-10


def test_contrastive_zero_norm_error():
    with pytest.raises(ValueError):
        speaker_contrastive_loss(vec(0.0, 0.0), vec(1.0, 0.0), [vec(0.0, 1.0)])
    with pytest.raises(ValueError):
        batch_contrastive_loss(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))), np.eye(2, dtype=bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.integers(1, 8))
def test_contrastive_scale_and_order_invariance(seed, c, k):
    r = np.random.default_rng(seed)
    p, pos = r.standard_normal(6), r.standard_normal(6)
    negs = r.standard_normal((k, 6))
    base = float(speaker_contrastive_loss(Tensor(p), Tensor(pos), [Tensor(n) for n in negs], 0.2).data)
    scaled = float(speaker_contrastive_loss(Tensor(c * p), Tensor(pos), [Tensor(n) for n in negs], 0.2).data)
    shuffled = float(speaker_contrastive_loss(Tensor(p), Tensor(pos), [Tensor(n) for n in negs[r.permutation(k)]],
                                              0.2).data)
    assert base >= 0
    assert abs(scaled - base) < 1e-9 and abs(shuffled - base) < 1e-9


def test_batch_loss_matches_per_anchor_oracle(rng):
    pooled = rng.standard_normal((6, 5))
    enroll = rng.standard_normal((6, 5))
    speakers = ["a", "a", "b", "c", "b", "d"]
    cands = sample_negatives(speakers, 2, np.random.default_rng(0))
    got = float(batch_contrastive_loss(Tensor(pooled), Tensor(enroll), cands, 0.1).data)
    per = []
    for i in range(6):
        negs = [Tensor(enroll[j]) for j in np.flatnonzero(cands[i]) if j != i]
        per.append(float(speaker_contrastive_loss(Tensor(pooled[i]), Tensor(enroll[i]), negs, 0.1).data))
    assert abs(got - np.mean(per)) < 1e-12


def test_sample_negatives_rules():
    speakers = np.array(["a", "a", "b", "c", "b", "d", "d", "e"])
    cands = sample_negatives(speakers, 2, np.random.default_rng(0))
    assert np.all(np.diag(cands))
    for i in range(len(speakers)):
        others = np.flatnonzero(cands[i])
        others = others[others != i]
        assert len(others) == 2
        assert all(speakers[j] != speakers[i] for j in others)
    many = sample_negatives(speakers, 10, np.random.default_rng(0))
    assert many[0].sum() == 1 + np.sum(speakers != "a")


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_batch_contrastive_gradients(seed):
    rng = np.random.default_rng(seed)
    pooled = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    enroll = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    cands = sample_negatives(["a", "b", "a", "c", "b"], 2, rng)
    err = finite_difference_check(lambda: batch_contrastive_loss(pooled, enroll, cands, 0.5), [pooled, enroll])
    assert err <= OP_GRAD_RTOL


def test_combined_loss_values_and_gradient_split(rng):
    ce, con = Tensor(1.0), Tensor(0.5)
    assert combined_loss(ce, con, 0.0) is ce
    assert float(combined_loss(ce, con, 20.0).data) == 11.0
    with pytest.raises(ValueError):
        combined_loss(ce, con, -1.0)
    x = Tensor(rng.standard_normal(4), requires_grad=True)

    def ce_f():
        return (x * x).sum()

    def con_f():
        return (x.exp()).sum()

    total = combined_loss(ce_f(), con_f(), 20.0)
    total.backward()
    expected = 2 * x.data + 20 * np.exp(x.data)
    assert np.allclose(x.grad, expected, rtol=1e-12)
    assert finite_difference_check(lambda: combined_loss(ce_f(), con_f(), 20.0), x) <= OP_GRAD_RTOL


# -- separation metric and attention dumps -------------------------------------------

def test_separation_metric_constructions(rng):
    a = np.array([1.0, 0, 0]) + rng.normal(0, 0.01, (10, 3))
    b = np.array([0, 1.0, 0]) + rng.normal(0, 0.01, (10, 3))
    labels = ["a"] * 10 + ["b"] * 10
    assert prompt_separation_metric(np.vstack([a, b]), labels) > 0.9
    same = np.vstack([np.tile([1.0, 0, 0], (5, 1)), np.tile([0, 0, 1.0], (5, 1))])
    assert prompt_separation_metric(same, ["a"] * 5 + ["b"] * 5) == pytest.approx(1.0, abs=1e-12)
    scores = []
    for seed in range(10):
        r = np.random.default_rng(seed)
        scores.append(prompt_separation_metric(r.standard_normal((60, 8)), r.integers(0, 3, 60)))
    assert max(abs(s) for s in scores) < 0.15


def test_separation_metric_errors(rng):
    with pytest.raises(ValueError):
        prompt_separation_metric(rng.standard_normal((4, 3)), ["a"] * 4)
    with pytest.raises(ValueError):
        prompt_separation_metric(rng.standard_normal((3, 3)), ["a", "a", "b"])
    with pytest.raises(ValueError):
        prompt_separation_metric(np.ones((4, 3)), ["a", "a", "b", "b"])


def test_cross_attention_dump(rng, tmp_path):
    sq = SQFormer(small(), rng)
    sq.record_attention(True)
    sq(Tensor(rng.standard_normal((2, 4, 5))), Tensor(rng.standard_normal((2, 9, 6))), None, [9, 6])
    grid = averaged_attention(sq.cross_attention_maps(), index=1, length=6)
    assert grid.shape == (3, 6)
    assert np.max(np.abs(grid.sum(axis=1) - 1)) <= ATTENTION_ROW_SUM
    path = tmp_path / "attn.txt"
    write_attention_grid(path, grid)
    assert np.allclose(np.loadtxt(path), grid, atol=1e-6)
