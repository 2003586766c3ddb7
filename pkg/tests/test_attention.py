import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from maskattn import tensor as tn
from maskattn.attention import (AttnConfig, MaskAttnBlock, block_forward, ffn_residual,
                                masked_cross_attention, multi_head_forward)
from maskattn.gate import build_mask
from maskattn.gradcheck import run_all
from maskattn.rng import stream
from maskattn.tensor import ShapeError, Tensor


def subset_softmax_oracle(logits, open_):
    """Softmax of each row restricted to its open entries, by explicit loops."""
    out = np.zeros_like(logits)
    for i in range(logits.shape[0]):
        idx = [j for j in range(logits.shape[1]) if open_[i, j]] or list(range(logits.shape[1]))
        top = max(logits[i, j] for j in idx)
        ex = {j: math.exp(logits[i, j] - top) for j in idx}
        z = math.fsum(ex.values())
        for j in idx:
            out[i, j] = ex[j] / z
    return out


def make_block(seed, d=8, heads=2, t=4, gated=True, d_ff=None):
    cfg = AttnConfig(d_model=d, n_heads=heads, n_tokens=t, d_ff=d_ff)
    return MaskAttnBlock(cfg, stream(seed, "b"), stream(seed, "g"), gated=gated, prefix="blk")


class TestMaskedCrossAttention:
    def test_zero_mask_matches_unmasked(self):
        rng = np.random.default_rng(0)
        q, k, v = (Tensor(rng.normal(size=s)) for s in [(5, 4), (3, 4), (3, 4)])
        plain = masked_cross_attention(q, k, v).data
        masked = masked_cross_attention(q, k, v, Tensor(np.zeros((5, 3))), 1e9).data
        assert np.max(np.abs(plain - masked)) <= 1e-15

    def test_single_surviving_token(self):
        rng = np.random.default_rng(1)
        q, k, v = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        bias = np.tile([0.0, -1e9], (4, 1))
        out = masked_cross_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(bias), 1e9).data
        assert np.array_equal(out, np.tile(v[0], (4, 1)))

    def test_restricted_softmax_oracle(self):
        rng = np.random.default_rng(2)
        q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        open_ = np.array([[1, 0, 1], [0, 1, 1]], dtype=bool)
        bias = np.where(open_, 0.0, -1e9)
        out, w = masked_cross_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(bias), 1e9,
                                        return_weights=True)
        ref_w = subset_softmax_oracle(q @ k.T / 2.0, open_)
        np.testing.assert_allclose(w.data, ref_w, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.data, ref_w @ v, rtol=0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 8), st.integers(0, 2**31))
    def test_restriction_property(self, n, t, seed):
        rng = np.random.default_rng(seed)
        d = 4
        q, k, v = rng.normal(size=(n, d)), rng.normal(size=(t, d)), rng.normal(size=(t, d))
        hard = (rng.random((1, n, 1, t)) < 0.5).astype(float)
        m = build_mask(Tensor(hard), 1e9)
        _, w = masked_cross_attention(Tensor(q), Tensor(k), Tensor(v), tn.reshape(m.bias, (n, t)),
                                      1e9, return_weights=True)
        open_ = hard.reshape(n, t) > 0.5
        dead = ~open_.any(axis=1)
        open_[dead] = True
        assert np.all(w.data[~open_] == 0.0)
        np.testing.assert_allclose(w.data, subset_softmax_oracle(q @ k.T / 2.0, open_), rtol=0, atol=1e-12)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            masked_cross_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros((4, 5))))


class TestMultiHead:
    def test_single_head_reduces_to_primitive(self):
        blk = make_block(3, d=6, heads=1, t=3, gated=False)
        rng = np.random.default_rng(3)
        x, tok = rng.normal(size=(1, 5, 6)), rng.normal(size=(1, 3, 6))
        hard = (rng.random((1, 5, 1, 3)) < 0.6).astype(float)
        m = build_mask(Tensor(hard), 10.0)
        got = multi_head_forward(blk, Tensor(x), Tensor(tok), m).data
        att = masked_cross_attention(Tensor(x[0] @ blk.w_q.data), Tensor(tok[0] @ blk.w_k.data),
                                     Tensor(tok[0] @ blk.w_v.data), tn.reshape(m.bias, (5, 3)), 10.0).data
        np.testing.assert_allclose(got[0], att @ blk.w_o.data, rtol=0, atol=1e-13)

    def test_two_heads_match_manual_slices(self):
        blk = make_block(4, d=8, heads=2, t=4, gated=False)
        rng = np.random.default_rng(4)
        x, tok = rng.normal(size=(2, 6, 8)), rng.normal(size=(2, 4, 8))
        hard = (rng.random((2, 6, 1, 4)) < 0.6).astype(float)
        m = build_mask(Tensor(hard), 1e9)
        got = multi_head_forward(blk, Tensor(x), Tensor(tok), m).data
        for b in range(2):
            q, k, v = x[b] @ blk.w_q.data, tok[b] @ blk.w_k.data, tok[b] @ blk.w_v.data
            bias = m.bias.data[b]
            heads = []
            for h in range(2):
                sl = slice(4 * h, 4 * h + 4)
                s = q[:, sl] @ k[:, sl].T / 2.0 + bias
                w = np.exp(s - s.max(axis=1, keepdims=True))
                w /= w.sum(axis=1, keepdims=True)
                heads.append(w @ v[:, sl])
            np.testing.assert_allclose(got[b], np.concatenate(heads, axis=1) @ blk.w_o.data,
                                       rtol=0, atol=1e-12)

    @pytest.mark.parametrize("d,heads,n,t", [(4, 1, 1, 1), (8, 2, 16, 8), (12, 3, 5, 2)])
    def test_shape_contract(self, d, heads, n, t):
        blk = make_block(5, d=d, heads=heads, t=t, gated=False)
        out = multi_head_forward(blk, Tensor(np.ones((2, n, d))), Tensor(np.ones((2, t, d))))
        assert out.shape == (2, n, d)

    def test_head_count_must_divide_width(self):
        with pytest.raises(ValueError):
            AttnConfig(d_model=6, n_heads=4, n_tokens=2)

    def test_permutation_equivariance(self):
        blk = make_block(6, d=8, heads=2, t=5, gated=False)
        rng = np.random.default_rng(6)
        x, tok = rng.normal(size=(1, 7, 8)), rng.normal(size=(1, 5, 8))
        hard = (rng.random((1, 7, 1, 5)) < 0.6).astype(float)
        perm = rng.permutation(5)
        a = multi_head_forward(blk, Tensor(x), Tensor(tok), build_mask(Tensor(hard), 1e9)).data
        b = multi_head_forward(blk, Tensor(x), Tensor(tok[:, perm]),
                               build_mask(Tensor(hard[..., perm]), 1e9)).data
        assert np.max(np.abs(a - b)) <= 1e-12


class TestFfnResidual:
    def test_zero_weights_is_identity(self):
        blk = MaskAttnBlock(AttnConfig(4, 2, 3), None, None, gated=False)
        a = np.random.default_rng(7).normal(size=(1, 5, 4))
        assert np.array_equal(ffn_residual(Tensor(a), blk).data, a)

    def test_zero_input_gives_b2(self):
        blk = make_block(8, d=4, heads=2, t=3, gated=False)
        blk.ffn_b2.data[...] = [1.0, -2.0, 0.5, 3.0]
        out = ffn_residual(Tensor(np.zeros((1, 3, 4))), blk).data
        assert np.array_equal(out, np.tile(blk.ffn_b2.data, (1, 3, 1)))

    def test_matches_direct_formula(self):
        blk = make_block(9, d=4, heads=2, t=3, gated=False, d_ff=6)
        rng = np.random.default_rng(9)
        for p in (blk.ffn_b1, blk.ffn_b2):
            p.data[...] = rng.normal(size=p.shape)
        a = rng.normal(size=(2, 3, 4))
        h = a @ blk.ffn_w1.data + blk.ffn_b1.data
        ref = 0.5 * h * (1.0 + erf(h / math.sqrt(2.0))) @ blk.ffn_w2.data + blk.ffn_b2.data + a
        np.testing.assert_allclose(ffn_residual(Tensor(a), blk).data, ref, rtol=0, atol=1e-12)


class TestBlockForward:
    def test_forced_open_equals_ungated_bitwise(self):
        gated = make_block(10, gated=True)
        plain = make_block(10, gated=False)
        gated.gate.force_open = True
        rng = np.random.default_rng(10)
        x, tok = Tensor(rng.normal(size=(2, 4, 8))), Tensor(rng.normal(size=(2, 4, 8)))
        for mode in ("train", "infer"):
            a = block_forward(gated, x, tok, (2, 2), mode).out.data
            b = block_forward(plain, x, tok, (2, 2), mode).out.data
            assert np.array_equal(a, b)

    def test_initial_gates_are_transparent(self):
        # init bias +2 opens every gate, so the fresh gated block equals the ungated one
        gated, plain = make_block(11, gated=True), make_block(11, gated=False)
        rng = np.random.default_rng(11)
        x, tok = Tensor(rng.normal(size=(1, 9, 8))), Tensor(rng.normal(size=(1, 4, 8)))
        res = block_forward(gated, x, tok, (3, 3), "infer")
        assert res.gates.hard.data.all()
        assert np.array_equal(res.out.data, block_forward(plain, x, tok, (3, 3), "infer").out.data)

    def test_finite_over_seeds(self):
        blk = make_block(12)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            for p in blk.gate.parameters():
                p.data[...] = rng.normal(0.0, 1.0, p.shape)
            x, tok = Tensor(rng.normal(size=(1, 4, 8))), Tensor(rng.normal(size=(1, 4, 8)))
            for mode in ("train", "infer"):
                res = block_forward(blk, x, tok, (2, 2), mode)
                assert np.all(np.isfinite(res.out.data))
                w = res.weights.data
                assert np.all(w >= 0)
                np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_train_and_infer_differ_only_through_lambda(self):
        blk = make_block(13)
        rng = np.random.default_rng(13)
        for p in blk.gate.parameters():
            p.data[...] = rng.normal(0.0, 1.0, p.shape)
        x, tok = Tensor(rng.normal(size=(2, 4, 8))), Tensor(rng.normal(size=(2, 4, 8)))
        tr = block_forward(blk, x, tok, (2, 2), "train", lam_train=10.0, lam_infer=1e9)
        inf = block_forward(blk, x, tok, (2, 2), "infer", lam_train=10.0, lam_infer=1e9)
        same = block_forward(blk, x, tok, (2, 2), "infer", lam_train=10.0, lam_infer=10.0)
        assert np.array_equal(tr.gates.hard.data, inf.gates.hard.data)
        assert 0 < tr.gates.hard.data.mean() < 1
        assert not np.array_equal(tr.out.data, inf.out.data)
        assert np.array_equal(tr.out.data, same.out.data)

    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            block_forward(make_block(14), Tensor(np.zeros((1, 5, 8))), Tensor(np.zeros((1, 4, 8))), (2, 2))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            block_forward(make_block(15), Tensor(np.zeros((1, 4, 8))), Tensor(np.zeros((1, 4, 8))), (2, 2), "eval")

    def test_block_gradient_check(self):
        for seed in range(3):
            (res,) = run_all(seed=seed, names=["maskattn_block"])
            assert res.max_rel_error < 1e-5
