"""End-to-end acceptance checks; one recorded pass/fail line per criterion.

Training runs are shared through module fixtures: five seeds of the default
experiment, one beta=0 control, one repeat of seed 0 for determinism, and the
remaining points of the alpha grid.
"""

import dataclasses
import json
import math

import numpy as np
import pytest

from conftest import bandit, make_events, record
from eventlogic.diagnostics import (
    EPS_COLLAPSE,
    INTERVENTION_MODES,
    collapse_trajectory,
    complexity_audit,
    influence_probe,
    intervention_sweep,
    sweep,
)
from eventlogic.events import event_arrays
from eventlogic.experiment import ExperimentConfig, build_corpora, run_experiment
from eventlogic.generator import greedy_chain, sample_chain
from eventlogic.gradcheck import TOLERANCE, gradient_suite
from eventlogic.model import init_model
from eventlogic.numeric import SeededRng
from eventlogic.objectives import cf_loss
from eventlogic.trainer import reinforce_grad
from eventlogic.world import WorldConfig, generate_scenario

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
ALPHAS = (0.0, 0.01, 0.1, 0.5, 1.0, 5.0)
BASE = ExperimentConfig(world=WorldConfig(k=3, beta=1.0, noise=0.1), n_train=200, n_eval=100, corpus_seed=0)
MARGIN = BASE.train.objective.margin


class Runs:
    """Memoised experiments keyed by their full configuration."""

    def __init__(self, tmp):
        self.tmp = tmp
        self.cache = {}
        self.corpora = {}

    def run(self, cfg: ExperimentConfig, tag: str = ""):
        key = json.dumps(cfg.to_dict(), sort_keys=True) + tag
        if key not in self.cache:
            ckey = json.dumps({"w": cfg.world.to_dict(), "n": [cfg.n_train, cfg.n_eval, cfg.corpus_seed],
                               "modes": list(cfg.train.cf_modes)}, sort_keys=True)
            if tag or ckey not in self.corpora:
                built = build_corpora(cfg)
                if tag:
                    corpora, ev = built
                else:
                    self.corpora[ckey] = built
            if not tag:
                corpora, ev = self.corpora[ckey]
            path = self.tmp / f"metrics_{len(self.cache)}.csv"
            res = run_experiment(cfg, corpora, ev, metrics_path=path)
            res.metrics_path = path
            self.cache[key] = res
        return self.cache[key]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


@pytest.fixture(scope="module")
def seed_runs(runs):
    return [runs.run(BASE.with_seed(s)) for s in SEEDS]


def test_criterion_01_gradient_suite():
    res = gradient_suite(seed=0, n_instances=20)
    ok = res.ok and res.seconds < 10.0
    per = ", ".join(f"{k}={v:.1e}" for k, v in sorted(res.per_path().items()))
    record(1, ok, f"max rel err {res.max_rel_error:.2e} (tol {TOLERANCE:g}) in {res.seconds:.1f}s; {per}")
    assert res.ok, res.failures
    assert res.seconds < 10.0


def test_criterion_02_policy_gradient():
    m, ev, loss = bandit()
    base = loss(greedy_chain(m, ev).chain)
    rng = SeededRng(2024)
    plain, critic = np.empty(100_000), np.empty(100_000)
    for i in range(plain.size):
        s = sample_chain(m, ev, rng.child(i))
        plain[i] = reinforce_grad(m, ev, s, loss(s.chain), 0.0)["policy.stop.b"][0]
        critic[i] = reinforce_grad(m, ev, s, loss(s.chain), base)["policy.stop.b"][0]
    p0 = p1 = 0.5
    closed = p0 * p1 * (loss(()) - loss(((0, 3, 1),)))
    se = plain.std(ddof=1) / math.sqrt(plain.size)
    z = abs(plain.mean() - closed) / se
    ok = z <= 3.0 and critic.var() < plain.var()
    record(2, ok, f"MC mean {plain.mean():.5f} vs closed form {closed:.5f} ({z:.2f} SE); "
                  f"variance {plain.var():.4f} -> {critic.var():.4f} with self-critical baseline")
    assert z <= 3.0
    assert critic.var() < plain.var()


def test_criterion_03_counterfactual_equal_losses():
    m = init_model(BASE.model)
    s = generate_scenario(BASE.world, 0)
    chain = s.truth_chain
    cf, pos, neg = cf_loss(chain, s.events, s.events, m, MARGIN)
    ok = cf == MARGIN and pos.loss == neg.loss
    record(3, ok, f"cf_loss = {cf!r} with L_logic(V) = L_logic(V-) = {pos.loss:.4f}, m = {MARGIN}")
    assert cf == MARGIN


def test_criterion_04_learning(runs, seed_runs):
    gains = [(r.before.f1, r.after.f1) for r in seed_runs]
    margins = [r.after.mean_mode_margin() for r in seed_runs]
    control = runs.run(dataclasses.replace(BASE, world=dataclasses.replace(BASE.world, beta=0.0)))
    f1_ok = all(after > before for before, after in gains)
    margin_ok = all(mg >= MARGIN / 2 for mg in margins)
    control_ok = control.after.semantic_f1 <= control.before.semantic_f1
    detail = ("F1 untrained->trained " + ", ".join(f"{b:.3f}->{a:.3f}" for b, a in gains)
              + f"; mean length {np.mean([r.after.mean_length for r in seed_runs]):.2f}"
              + f"; held-out margin min {min(margins):.2f} (need >= {MARGIN / 2})"
              + f"; beta=0 semantic F1 {control.before.semantic_f1:.3f}->{control.after.semantic_f1:.3f}")
    record(4, f1_ok and margin_ok and control_ok, detail)
    assert f1_ok, gains
    assert margin_ok, margins
    assert control_ok


def test_criterion_05_intervention_ordering(seed_runs):
    good, parts = 0, []
    for r in seed_runs:
        res = {x.mode: x for x in intervention_sweep(r.result.model, r.corpora.held_out, INTERVENTION_MODES,
                                                      r.config.train.objective, r.config.train.n_select,
                                                      seed=r.config.train.seed)}
        flip, rev, shuf = (res[m] for m in INTERVENTION_MODES)
        # an ordering among modes that never altered a chain carries no information
        applied = min(x.n_applied for x in res.values()) > 0
        ordered = shuf.delta >= rev.delta >= flip.delta
        good += applied and ordered
        parts.append(f"{shuf.delta:+.3f}/{rev.delta:+.3f}/{flip.delta:+.3f}"
                     f" (applied {shuf.n_applied}/{rev.n_applied}/{flip.n_applied})")
    record(5, good >= 4, f"{good}/5 seeds ordered; shuffle/reversal/flip delta: " + "; ".join(parts))
    assert good >= 4


def test_criterion_06_sparsity(runs):
    rows = sweep("alpha", list(ALPHAS), BASE, runner=runs.run)
    assert all(r.status == "ok" for r in rows), [r.error for r in rows]
    lengths = [r.mean_len for r in rows]
    metric = {r.value: r.metric for r in rows}
    monotone = all(a >= b for a, b in zip(lengths, lengths[1:]))
    peak = metric[0.1] >= metric[0.0] and metric[0.1] >= metric[5.0]
    # a grid on which every run emits empty chains says nothing about either shape
    informative = max(lengths) > 0
    record(6, monotone and peak and informative,
           "length " + ", ".join(f"a={a:g}:{n:.2f}" for a, n in zip(ALPHAS, lengths))
           + "; F1 " + ", ".join(f"a={a:g}:{metric[a]:.3f}" for a in ALPHAS))
    assert informative, lengths
    assert monotone, lengths
    assert peak, metric


def test_criterion_07_influence(seed_runs):
    r = seed_runs[0]
    model = r.result.model
    cb = model.codebook
    usable = [p for p in r.corpora.held_out if p.negatives and any(not cb.is_temporal(e.z) for e in p.truth_local)]
    assert len(usable) >= 2
    errs, halved, gaps, skipped = [], [], [], 0
    for i in range(20):
        tr, te = usable[i % len(usable)], usable[(7 * i + 3) % len(usable)]
        full = influence_probe(model, tr, tr.truth_local, te, te.truth_local, 1e-4, r.config.train.objective)
        half = influence_probe(model, tr, tr.truth_local, te, te.truth_local, 5e-5, r.config.train.objective)
        gaps.append(full.factorization_gap)
        if abs(full.predicted) < 1e-8:
            skipped += 1
            continue
        errs.append(full.rel_error)
        halved.append(half.rel_error)
    ok = bool(errs) and max(errs) <= 0.05 and max(halved) <= max(errs) and max(gaps) <= 1e-9
    record(7, ok, f"{len(errs)} probes ({skipped} below 1e-8): max rel err {max(errs):.2e} at eta=1e-4, "
                  f"{max(halved):.2e} at eta/2; factorization gap {max(gaps):.1e}")
    assert errs and max(errs) <= 0.05
    assert max(halved) <= max(errs)
    assert max(gaps) <= 1e-9


def test_criterion_08_non_collapse(seed_runs):
    summaries = [collapse_trajectory(r.result.embedding_trajectory, r.result.model.codebook) for r in seed_runs]
    floor = min(min(s["min_distance"]) for s in summaries)
    grew = sum(s["cause_prevent_grew"] for s in summaries)
    ok = floor >= EPS_COLLAPSE and grew >= 4
    record(8, ok, f"min pairwise distance over all epochs {floor:.3f} (eps {EPS_COLLAPSE}); cause/prevent grew on "
                  f"{grew}/5 seeds: " + ", ".join(f"{s['cause_prevent'][0]:.3f}->{s['cause_prevent'][-1]:.3f}"
                                                   for s in summaries))
    assert floor >= EPS_COLLAPSE
    assert grew >= 4


def test_criterion_09_complexity():
    model = init_model(BASE.model)
    m = model.codebook.size

    def arrays(k, t):
        evs = generate_scenario(WorldConfig(k=k, t=t), 3).events
        return t, event_arrays(evs)

    rep = complexity_audit(model, [arrays(4, 100), arrays(4, 1000), arrays(8, 100)], chain_lengths=(2, 4, 8))
    t100, t1000, k8 = rep.scans
    invariant = t100.pair_comparisons == t1000.pair_comparisons and t100.head_rows == t1000.head_rows
    bounded = all(s.pair_comparisons <= m * s.k ** 2 for s in rep.scans)
    per_edge = {c.ops / c.length for c in rep.chains}
    linear = all(c.edge_evals == c.length for c in rep.chains) and all(c.ops <= 2 * c.length for c in rep.chains)
    ok = invariant and bounded and linear
    record(9, ok, f"pair comparisons T=100:{t100.pair_comparisons} T=1000:{t1000.pair_comparisons} "
                  f"(K=4), K=8:{k8.pair_comparisons} <= M*K^2={m * 64}; chain ops "
                  + ", ".join(f"|C|={c.length}:{c.ops}" for c in rep.chains)
                  + f" ({min(per_edge):.2f}-{max(per_edge):.2f} per edge)")
    assert invariant and bounded and linear


def test_criterion_10_determinism(runs, seed_runs):
    first = seed_runs[0]
    again = runs.run(BASE.with_seed(0), tag="repeat")
    a, b = first.metrics_path.read_bytes(), again.metrics_path.read_bytes()
    body = lambda x: x.split(b"\n", 1)[1]  # noqa: E731
    ok = body(a) == body(b) and len(body(a)) > 0
    steps = body(a).count(b"\n")
    record(10, ok, f"seed-0 metrics CSV bodies {'identical' if ok else 'differ'} ({len(body(a))} bytes, "
                   f"{steps} steps)")
    assert ok
