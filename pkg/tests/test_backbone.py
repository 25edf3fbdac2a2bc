import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from timesqueeze import tensor as tn
from timesqueeze.backbone import (
    Backbone,
    BackboneConfig,
    RouterTrace,
    aux_loss,
    rope_apply,
    top_k_mask,
)
from timesqueeze.tensor import ParamStore, Tape, Tensor, grad_check


def build(seed=0, **kw):
    cfg = BackboneConfig(**{"d_model": 16, "heads": 2, "d_expert": 8, **kw})
    bb = Backbone(cfg)
    store = ParamStore()
    bb.init(store, np.random.default_rng(seed))
    return bb, store


class TestRope:
    def test_position_zero_identity(self, rng):
        v = rng.normal(size=(3, 2, 8))
        np.testing.assert_array_equal(rope_apply(v, np.zeros(3, dtype=int)), v)

    @settings(max_examples=50)
    @given(arrays(np.float64, (4, 2, 8), elements=st.floats(-10, 10)), st.integers(0, 5000))
    def test_norm_preserved(self, v, m):
        out = rope_apply(v, np.full(4, m))
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(v, axis=-1), rtol=1e-12, atol=1e-12)

    def test_relative_property(self, rng):
        q, k = rng.normal(size=(1, 1, 8)), rng.normal(size=(1, 1, 8))

        def score(m, n):
            return float(np.sum(rope_apply(q, [m]) * rope_apply(k, [n])))

        assert score(5, 3) == pytest.approx(score(12, 10), rel=1e-12)
        assert score(5, 3) != pytest.approx(score(5, 4), rel=1e-6)

    def test_odd_head_dim(self):
        with pytest.raises(tn.ShapeError):
            rope_apply(np.ones((2, 1, 3)), [0, 1])


class TestRouting:
    def test_hand_case(self):
        probs = np.array([[0.4, 0.3, 0.2, 0.1]])
        sel = top_k_mask(probs, 2)
        assert sel.tolist() == [[True, True, False, False]]
        g = probs * sel
        g = g / g.sum()
        np.testing.assert_allclose(g[0, :2], [4 / 7, 3 / 7], rtol=1e-15)

    def test_ties_to_lower_index(self):
        assert top_k_mask(np.array([[0.25, 0.25, 0.25, 0.25]]), 2).tolist() == [[True, True, False, False]]
        assert top_k_mask(np.array([[0.1, 0.3, 0.3, 0.3]]), 2).tolist() == [[False, True, True, False]]

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.permutations(range(6)), min_size=5, max_size=5),
        st.floats(0.5, 4.0),
        arrays(np.float64, (5, 6), elements=st.floats(-0.1, 0.1)),
        st.integers(1, 6),
        st.floats(-50, 50),
    )
    def test_exactly_k_and_shift_invariant(self, ranks, spacing, jitter, k, c):
        # logits at least 0.3 apart, so the top-k set is unambiguous
        logits = np.array(ranks, dtype=float) * spacing + jitter
        p = tn.softmax(Tensor(logits)).data
        sel = top_k_mask(p, k)
        assert np.all(sel.sum(-1) == k)
        np.testing.assert_array_equal(sel, np.argsort(np.argsort(-logits, axis=1), axis=1) < k)
        # adding a constant to every logit leaves the selected set unchanged
        p2 = tn.softmax(Tensor(logits + c)).data
        assert np.array_equal(top_k_mask(p2, k), sel)


class TestAuxLoss:
    def trace(self, f, r):
        return RouterTrace(np.zeros((1, 1), int), np.zeros((1, len(f))), np.asarray(f, float), np.asarray(r, float))

    def test_uniform(self):
        for n in (2, 4, 8):
            u = np.full(n, 1.0 / n)
            assert abs(aux_loss(self.trace(u, u), n) - 1.0) <= 1e-12

    def test_collapsed(self):
        for n in (2, 4, 8):
            e = np.eye(n)[0]
            assert abs(aux_loss(self.trace(e, e), n) - n) <= 1e-12

    def test_hand_case(self):
        assert abs(aux_loss(self.trace([0.75, 0.25], [0.6, 0.4]), 2) - 1.1) <= 1e-12

    @pytest.mark.parametrize("n", [2, 3])
    def test_minimum_at_uniform_by_grid_search(self, n):
        grid = np.linspace(0, 1, 61)  # contains 1/2 and 1/3
        best, arg = np.inf, None
        for f_head in itertools.product(grid, repeat=n - 1):
            f = np.append(f_head, 1 - sum(f_head))
            if f[-1] < -1e-12:
                continue
            # matching r = f is the routing that produced these counts
            value = aux_loss(self.trace(f, f), n)
            if value < best:
                best, arg = value, f
        assert best == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(arg, 1.0 / n, atol=1e-12)


class TestBlocks:
    def test_single_token_attends_to_itself(self, rng):
        bb, store = build()
        z = rng.normal(size=(1, 1, 16))
        w = bb.attention_weights(store, 0, z[0], [0])
        np.testing.assert_array_equal(w, 1.0)
        out = bb.attention(store, 0, Tensor(z), np.array([[0]]), np.ones((1, 1), bool)).data
        a = "backbone.layer0.attn"
        x = tn.rmsnorm(Tensor(z), store[f"{a}.norm"]).data
        expected = z + (x @ store[f"{a}.Wv"].data) @ store[f"{a}.Wo"].data
        np.testing.assert_allclose(out, expected, rtol=1e-13)

    def test_attention_rows_sum_to_one_and_causal(self, rng):
        bb, store = build()
        w = bb.attention_weights(store, 1, rng.normal(size=(6, 16)), [0, 2, 3, 9, 10, 15])
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
        assert np.all(np.triu(w, 1) == 0)

    def test_attention_causal_perturbation(self, rng):
        bb, store = build()
        Z = rng.normal(size=(1, 7, 16))
        pos = np.array([[0, 1, 4, 6, 7, 11, 12]])
        valid = np.ones((1, 7), bool)
        base = bb.attention(store, 0, Tensor(Z), pos, valid).data
        for j in range(7):
            Z2 = Z.copy()
            Z2[0, j] += 1.0
            out = bb.attention(store, 0, Tensor(Z2), pos, valid).data
            assert np.array_equal(out[0, :j], base[0, :j])
            assert not np.array_equal(out[0, j], base[0, j])

    def test_moe_single_expert(self, rng):
        bb, store = build(experts=1, top_k=1)
        Z = rng.normal(size=(1, 3, 16))
        out, trace = bb.moe(store, 0, Tensor(Z), np.ones((1, 3), bool))
        m = "backbone.layer0.moe"
        x = tn.rmsnorm(Tensor(Z), store[f"{m}.norm"]).data

        def ffn(name):
            h = x @ store[f"{m}.{name}.w1"].data
            return (h / (1 + np.exp(-h))) @ store[f"{m}.{name}.w2"].data

        np.testing.assert_allclose(out.data, Z + ffn("shared") + ffn("expert0"), rtol=1e-12, atol=1e-14)
        np.testing.assert_array_equal(trace.probs, 1.0)

    def test_identical_experts_make_routing_irrelevant(self, rng):
        bb, store = build(experts=4, top_k=2)
        m = "backbone.layer0.moe"
        for j in range(1, 4):
            for w in ("w1", "w2"):
                store[f"{m}.expert{j}.{w}"].data[...] = store[f"{m}.expert0.{w}"].data
        Z = Tensor(rng.normal(size=(1, 5, 16)))
        valid = np.ones((1, 5), bool)
        a = bb.moe(store, 0, Z, valid)[0].data
        store[f"{m}.router"].data[...] = rng.normal(size=(16, 4)) * 10
        b = bb.moe(store, 0, Z, valid)[0].data
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_trace_normalization(self, rng):
        bb, store = build(experts=4, top_k=2)
        valid = np.array([[True] * 5 + [False] * 2, [True] * 7])
        _, trace = bb.moe(store, 0, Tensor(rng.normal(size=(2, 7, 16))), valid)
        assert trace.n_tokens == 12
        assert trace.selected.shape == (12, 2)
        assert all(len(set(row)) == 2 for row in trace.selected)
        np.testing.assert_allclose(trace.probs.sum(-1), 1.0, atol=1e-12)
        assert trace.f.sum() == pytest.approx(1.0, abs=1e-12)
        assert trace.r.data.sum() == pytest.approx(1.0, abs=1e-12)


class TestBackboneForward:
    def test_single_token(self, rng):
        bb, store = build()
        out, trace = bb(store, rng.normal(size=(1, 16)), [0])
        assert out.shape == (1, 1, 16) and np.isfinite(out.data).all()
        assert trace.n_tokens == 2  # one token per layer

    def test_full_stack_causality(self, rng):
        bb, store = build(layers=2)
        Z = rng.normal(size=(9, 16))
        pos = np.array([0, 3, 5, 6, 8, 13, 14, 20, 21])
        base = bb(store, Z, pos)[0].data
        for j in (0, 4, 8):
            Z2 = Z.copy()
            Z2[j] -= 0.7
            out = bb(store, Z2, pos)[0].data
            assert np.array_equal(out[0, :j], base[0, :j])

    def test_padding_does_not_leak(self, rng):
        bb, store = build()
        Z = rng.normal(size=(1, 5, 16))
        pos = np.array([[0, 2, 4, 6, 8]])
        alone = bb(store, Z[:, :3], pos[:, :3])[0].data
        padded = np.concatenate([Z[:, :3], rng.normal(size=(1, 2, 16))], axis=1)
        valid = np.array([[True, True, True, False, False]])
        out, trace = bb(store, padded, pos, valid)
        np.testing.assert_allclose(out.data[:, :3], alone, rtol=1e-12, atol=1e-14)
        assert trace.n_tokens == 3 * 2

    def test_gradients_every_path(self, rng):
        bb, store = build(layers=2, experts=4, top_k=2)
        Z = rng.normal(size=(2, 6, 16))
        pos = np.array([[0, 1, 3, 4, 7, 9], [0, 2, 5, 6, 8, 10]])
        R = rng.normal(size=(2, 6, 16))

        def f(s):
            out, trace = bb(s, Z, pos)
            return tn.sum(out * R) + aux_loss(trace) * 0.5

        assert grad_check(f, store, n_coords=400, rng=np.random.default_rng(1)) < 1e-3

    def test_router_gradient_flows_through_r(self, rng):
        bb, store = build(layers=1)
        with Tape() as tape:
            _, trace = bb(store, rng.normal(size=(4, 16)), np.arange(4))
            loss = aux_loss(trace)
        g = tape.gradients(loss)
        assert np.abs(g[id(store["backbone.layer0.moe.router"])]).sum() > 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BackboneConfig(d_model=10, heads=4)
        with pytest.raises(ValueError):
            BackboneConfig(experts=2, top_k=3)
