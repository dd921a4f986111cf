import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_arrays, make_events
from eventlogic.events import Edge, EventArrays
from eventlogic.model import ModelConfig, init_model
from eventlogic.numeric import finite_diff_check
from eventlogic.objectives import (
    ObjectiveConfig,
    aux_loss,
    cf_loss,
    cosine_loss_rows,
    hinge,
    pred_loss,
    pred_loss_backward,
    prefix_incidence,
    spar_loss,
)
from eventlogic.verifier import score_chain
from eventlogic.world import WorldConfig, generate_scenario, make_counterfactual

CFG = ModelConfig(d=4, m=8, head_hidden=5, pred_hidden=5, policy_hidden=4, ctx_width=3)


def model(seed=0, cfg=CFG):
    return init_model(cfg, seed)


class TestCosine:
    def test_exact_prediction(self):
        t = np.random.default_rng(0).normal(size=(5, 4))
        loss, _, bad = cosine_loss_rows(t * 3.0, t)
        np.testing.assert_allclose(loss, 0.0, atol=1e-15)
        assert not bad.any()

    def test_opposite_prediction(self):
        t = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_allclose(cosine_loss_rows(-t, t)[0], 2.0)

    def test_zero_norm_row(self):
        loss, grad, bad = cosine_loss_rows(np.zeros((1, 3)), np.ones((1, 3)))
        assert loss[0] == 1.0 and bad[0] and not grad.any()


def test_prefix_incidence_elapsed_edges():
    inc = prefix_incidence([Edge(0, 0, 1), Edge(1, 0, 2)], np.array([2.0, 4.0, 7.0]), 8)
    assert not inc[:3].any()
    np.testing.assert_array_equal(inc[3:6], [[1, 0]] * 3)
    np.testing.assert_array_equal(inc[6:], [[0.5, 0.5]] * 2)


class TestPred:
    def test_range(self):
        m = model(1)
        arr = make_arrays(3, 4)
        frames = np.random.default_rng(2).normal(size=(12, 4))
        loss, cache = pred_loss([(0, 3, 1), (1, 0, 2)], arr, frames, m)
        assert 0.0 <= loss <= 2.0

    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            pred_loss([], make_arrays(3, 4), np.ones((1, 4)), model())

    @pytest.mark.parametrize("chain", [[], [(0, 3, 1)], [(0, 3, 1), (2, 0, 1), (1, 5, 0)]])
    def test_gradients(self, chain):
        m = model(3)
        arr = make_arrays(3, 4, 1)
        frames = np.random.default_rng(4).normal(size=(12, 4))
        params = {**m.params, "features": arr.features.copy()}
        keys = [k for k in m.params if k.startswith("predictor.")] + ["codebook.emb", "features"]

        def f(p):
            m.params = {k: v for k, v in p.items() if k != "features"}
            loss, cache = pred_loss(chain, EventArrays(p["features"], arr.starts, arr.ends), frames, m)
            g, gf = pred_loss_backward(cache, m)
            return loss, {**g, "features": gf}

        assert finite_diff_check(f, params, 1e-4, keys, 1e-5, richardson=True).ok(1e-5)


class TestCounterfactual:
    def test_equal_logic_gives_margin(self):
        assert hinge(0.5, 3.0, 3.0) == 0.5
        events = make_events([(0, 2), (3, 5), (6, 8)])
        assert cf_loss([(0, 3, 1), (1, 0, 2)], events, events, model(), 0.5)[0] == pytest.approx(0.5, abs=1e-15)

    def test_large_gap_gives_zero(self):
        assert hinge(0.5, 1.0, 2.0) == 0.0

    def test_temporal_closed_form(self):
        pos = make_events([(0, 2), (3, 5)])
        neg = make_events([(1, 3), (2, 4)])  # gap -1
        cf, p, n = cf_loss([(0, 0, 1)], pos, neg, model(), 0.5)
        assert p.loss == pytest.approx(0.31326168751822286, rel=1e-12)
        assert n.loss == pytest.approx(-math.log(1 / (1 + math.e)), rel=1e-12)
        assert cf == 0.0

    def test_event_count_mismatch(self):
        with pytest.raises(ValueError):
            cf_loss([], make_events([(0, 1), (2, 3)]), make_events([(0, 1)]), model(), 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 500), st.floats(0.01, 3.0))
    def test_bounds(self, seed, margin):
        m = model(seed % 5)
        pos, neg = make_arrays(3, 4, seed), make_arrays(3, 4, seed + 1)
        chain = [(0, 3, 1), (1, 0, 2), (2, 6, 0)]
        cf, p, _ = cf_loss(chain, pos, neg, m, margin)
        assert 0.0 <= cf <= margin + p.loss + 1e-12


class TestSparsity:
    def test_count(self):
        assert spar_loss([(0, 0, 1)] * 5, 0.1) == pytest.approx(0.5)
        assert spar_loss([], 0.1) == 0.0

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            spar_loss([], -0.1)


class TestAux:
    @pytest.fixture
    def scenario(self):
        s = generate_scenario(WorldConfig(k=3, d=4, vocab=(1, 1, 1), t=24), 0)
        return s, make_counterfactual(s, "temporal", 0)

    def test_total_is_sum_of_components(self, scenario):
        s, neg = scenario
        m = model(0)
        chain = s.truth_chain
        rep = aux_loss(chain, s.events, s.frames, neg.events, m, ObjectiveConfig())
        pred = pred_loss(chain, s.events, s.frames, m)[0]
        logic = score_chain(chain, s.events, m).loss
        cf = max(0.0, 0.5 + logic - score_chain(chain, neg.events, m).loss)
        assert rep.total == pytest.approx(pred + logic + cf + 0.1 * len(chain), abs=1e-9)

    @pytest.mark.parametrize("name,component", [("lambda_pred", "pred"), ("lambda_logic", "logic"),
                                                ("lambda_cf", "cf"), ("lambda_spar", "spar")])
    def test_linear_in_weights(self, scenario, name, component):
        s, neg = scenario
        m = model(1)
        base = aux_loss(s.truth_chain, s.events, s.frames, neg.events, m, ObjectiveConfig(), False)
        scaled = aux_loss(s.truth_chain, s.events, s.frames, neg.events, m,
                          dataclasses.replace(ObjectiveConfig(), **{name: 3.0}), False)
        assert scaled.total - base.total == pytest.approx(2.0 * getattr(base, component), abs=1e-12)

    def test_gradients(self, scenario):
        s, neg = scenario
        m = model(2)
        chain = s.truth_chain
        gap = score_chain(chain, neg.events, m).loss - score_chain(chain, s.events, m).loss
        cfg = ObjectiveConfig(margin=max(gap + 1.0, 0.1))
        keys = m.group("theta")

        def f(p, grads=True):
            m.params = p
            rep = aux_loss(chain, s.events, s.frames, neg.events, m, cfg, grads)
            return rep.total, rep.grads

        rep = finite_diff_check(f, dict(m.params), 1e-4, keys, 1e-5, richardson=True, value=lambda p: f(p, False)[0])
        assert rep.ok(1e-5), rep.worst

    def test_config_validation(self):
        for bad in ({"margin": 0.0}, {"alpha": -1.0}, {"spar_mode": "soft"}):
            with pytest.raises(ValueError):
                ObjectiveConfig(**bad)
