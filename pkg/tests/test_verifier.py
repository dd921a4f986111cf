import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_arrays, make_events
from eventlogic.events import Edge, EventArrays, InvalidChainError
from eventlogic.model import ModelConfig, init_model
from eventlogic.numeric import finite_diff_check, sigmoid
from eventlogic.verifier import (
    OpCounter,
    logic_loss_backward,
    pairwise_scan,
    score_chain,
    score_semantic_edge,
    score_temporal_edge,
    semantic_logit_grads,
    temporal_edge_grads,
)

CFG = ModelConfig(d=4, m=8, head_hidden=6, pred_hidden=5, policy_hidden=4, ctx_width=3)
BEFORE, AFTER, MEETS, CAUSE = 0, 1, 2, 3


def model(seed=0):
    return init_model(CFG, seed)


def zero_head(m):
    for k in ("w1", "b1", "w2", "b2"):
        m.params[f"verifier.head.{k}"] = np.zeros_like(m.params[f"verifier.head.{k}"])
    return m


class TestTemporal:
    def test_touching_is_half(self):
        a, b = make_events([(0, 3), (3, 5)])
        for k in (0.5, 1.0, 4.0):
            assert score_temporal_edge("before", a, b, k) == 0.5

    def test_gap_one_slope_two(self):
        a, b = make_events([(0, 2), (3, 5)])
        assert score_temporal_edge("before", a, b, 2.0) == pytest.approx(0.8807970779778823, abs=1e-12)

    def test_meets(self):
        a, b = make_events([(0, 3), (3, 5)])
        assert score_temporal_edge("meets", a, b, 1.0, 2.0) == pytest.approx(sigmoid(2.0))

    def test_gradient_at_zero_gap(self):
        a, b = make_events([(0, 3), (3, 5)])
        g = temporal_edge_grads("before", a, b, 2.0)
        assert g["end_a"] == pytest.approx(-0.5) and g["start_b"] == pytest.approx(0.5)

    def test_saturation(self):
        a, b = make_events([(0, 1), (500, 501)])
        assert max(abs(v) for v in temporal_edge_grads("before", a, b).values()) < 1e-100

    def test_unknown_op(self):
        a, b = make_events([(0, 1), (2, 3)])
        with pytest.raises(ValueError):
            score_temporal_edge("cause", a, b)


supports = st.tuples(st.floats(0, 50), st.floats(0.1, 10)).map(lambda t: (t[0], t[0] + t[1]))


@settings(max_examples=200, deadline=None)
@given(supports, supports, st.floats(0.1, 3))
def test_after_is_swapped_before(sa, sb, k):
    a, b = make_events([sa, sb])
    assert score_temporal_edge("after", a, b, k) == score_temporal_edge("before", b, a, k)


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20), st.floats(0.01, 5))
def test_before_monotone_in_gap(gap, delta):
    a, b1 = make_events([(0, 5), (5 + gap, 30 + gap)])
    _, b2 = make_events([(0, 5), (5 + gap + delta, 30 + gap + delta)])
    assert score_temporal_edge("before", a, b2) > score_temporal_edge("before", a, b1)
    assert score_temporal_edge("after", a, b2) <= score_temporal_edge("after", a, b1)


class TestSemantic:
    def test_zero_head_is_half(self, events3):
        m = zero_head(model())
        for z in range(3, 8):
            assert score_semantic_edge(m, z, events3[0], events3[1])[0] == 0.5

    def test_temporal_op_rejected(self, events3):
        with pytest.raises(ValueError):
            score_semantic_edge(model(), BEFORE, events3[0], events3[1])

    def test_order_matters(self, events3):
        m = model(1)
        assert score_semantic_edge(m, CAUSE, events3[0], events3[1])[0] != score_semantic_edge(m, CAUSE, events3[1], events3[0])[0]

    def test_matches_straight_line_recomputation(self, events3):
        m = model(2)
        p = m.params
        x = np.concatenate([events3[0].feature, events3[2].feature, p["codebook.emb"][5]])
        h = np.tanh(p["verifier.head.w1"] @ x + p["verifier.head.b1"])
        logit = p["verifier.head.w2"] @ h + p["verifier.head.b2"]
        want = 1.0 / (1.0 + math.exp(-float(np.ravel(logit)[0])))
        assert score_semantic_edge(m, 5, events3[0], events3[2])[0] == pytest.approx(want, rel=1e-12)


class TestChain:
    def test_empty(self, events3):
        s = score_chain([], events3, model())
        assert (s.belief, s.loss) == (1.0, 0.0)

    def test_single_touching_before(self):
        s = score_chain([(0, BEFORE, 1)], make_events([(0, 3), (3, 5)]), model())
        assert s.belief == 0.5 and s.loss == pytest.approx(math.log(2))

    def test_invalid_rejected(self, events3):
        with pytest.raises(InvalidChainError):
            score_chain([(0, BEFORE, 0)], events3, model())

    def test_independent_edges_multiply(self, events3):
        m = model(3)
        c1, c2 = [(0, BEFORE, 1), (1, CAUSE, 2)], [(2, AFTER, 0), (0, 6, 2)]
        s1, s2, s = score_chain(c1, events3, m), score_chain(c2, events3, m), score_chain(c1 + c2, events3, m)
        assert s.belief == pytest.approx(s1.belief * s2.belief, rel=1e-12)
        assert s.loss == pytest.approx(s1.loss + s2.loss, rel=1e-12)

    def test_clamp_keeps_loss_finite(self):
        s = score_chain([(1, BEFORE, 0)], make_events([(0, 1), (900, 901)]), model())
        assert s.loss == pytest.approx(-math.log(1e-7))


class TestBackward:
    def test_temporal_chain_leaves_head_alone(self, events3):
        m = model()
        g = logic_loss_backward(score_chain([(0, BEFORE, 1), (2, MEETS, 1)], events3, m), m)
        assert all(not v.any() for v in g.params.values())
        assert not g.features.any()

    def test_logit_derivative(self, events3):
        m = model(4)
        s = score_chain([(0, CAUSE, 1)], events3, m)
        g = logic_loss_backward(s, m)
        gl = semantic_logit_grads(s, m)[0]
        for key, v in gl.items():
            np.testing.assert_allclose(g.params[key], -(1 - s.scores[0]) * v, atol=1e-14)

    def test_stale_cache_rejected(self, events3):
        s = score_chain([(0, CAUSE, 1)], events3, model())
        with pytest.raises(ValueError):
            logic_loss_backward(s, model())

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences_all_params(self, seed):
        m = model(seed)
        arr = make_arrays(4, 4, seed)
        chain = [(0, BEFORE, 1), (1, AFTER, 3), (2, MEETS, 0), (0, CAUSE, 2), (3, 7, 1), (2, 4, 3)]
        params = {**m.params, "features": arr.features.copy(), "starts": arr.starts.copy(), "ends": arr.ends.copy()}
        keys = [k for k in params if not k.startswith(("policy.", "predictor."))]

        def f(p):
            m.params = {k: v for k, v in p.items() if k not in ("features", "starts", "ends")}
            s = score_chain(chain, EventArrays(p["features"], p["starts"], p["ends"]), m)
            g = logic_loss_backward(s, m)
            return s.loss, {**g.params, "features": g.features, "starts": g.starts, "ends": g.ends}

        rep = finite_diff_check(f, params, 1e-4, keys, 1e-5, richardson=True)
        assert rep.ok(1e-5), rep.worst

    def test_embedding_gradient_nonzero(self, events3):
        for seed in range(5):
            m = model(seed)
            s = score_chain([(0, CAUSE, 2)], events3, m)
            assert 0 < s.scores[0] < 1
            assert np.linalg.norm(logic_loss_backward(s, m).params["codebook.emb"][CAUSE]) > 0


@pytest.mark.parametrize("t_scale", [1, 10, 100])
def test_pairwise_scan_counts_independent_of_frames(t_scale):
    m = model()
    events = make_events([(i * t_scale, i * t_scale + t_scale / 2) for i in range(5)])
    counter = OpCounter()
    for op in range(CFG.m):
        out = pairwise_scan(events, m, op, counter)
        assert np.isnan(np.diag(out)).all()
    assert counter.pair_comparisons <= CFG.m * 5 ** 2
    assert counter.pair_comparisons == CFG.m * 5 * 4


def test_pairwise_scan_matches_chain_scores(events3):
    m = model(5)
    for op in (BEFORE, MEETS, CAUSE, 7):
        out = pairwise_scan(events3, m, op)
        for a in range(3):
            for b in range(3):
                if a != b:
                    assert out[a, b] == pytest.approx(score_chain([(a, op, b)], events3, m).scores[0], rel=1e-12)
