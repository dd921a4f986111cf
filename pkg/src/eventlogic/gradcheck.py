"""Finite-difference suite over every hand-written backward pass.

Each instance is a small random model with random events, frames and
chains, small enough that every parameter entry can be perturbed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .events import Edge, EventArrays
from .generator import chain_log_prob, log_prob_grad, replay, sample_chain
from .model import Model, ModelConfig, init_model
from .numeric import GradCheckReport, SeededRng, finite_diff_check
from .objectives import ObjectiveConfig, aux_loss, pred_loss, pred_loss_backward
from .verifier import logic_loss_backward, score_chain

TOLERANCE = 1e-5
# Central differences carry ~eps*|f|/step of round-off (up to ~1e-10 here), so
# the relative error is measured against |central| + FLOOR.  Richardson
# extrapolation removes the h^2 truncation term that dominates at this step.
FLOOR = 1e-5
STEP = 1e-4
SAMPLE_PER_TENSOR = 8
PATHS = ("temporal", "semantic", "predictor", "aux", "policy")

SMALL = ModelConfig(d=4, m=6, head_hidden=5, pred_hidden=5, policy_hidden=4, ctx_width=3, l_max=3)


@dataclass
class Instance:
    model: Model
    events: EventArrays
    neg: EventArrays
    frames: np.ndarray
    chain: tuple[Edge, ...]
    horizon: float


def random_instance(seed: int, k: int = 3, n_frames: int = 6) -> Instance:
    rng = SeededRng(seed, (0x6C,))
    model = init_model(SMALL, seed)
    for key, v in model.params.items():
        if key.endswith(".b1") or key.endswith(".b2") or key in ("predictor.null", "policy.tgt_pair.w"):
            model.params[key] = v + 0.3 * rng.normal(v.shape)
    d = SMALL.d
    starts = np.sort(rng.uniform(k) * n_frames)
    ends = starts + 0.5 + 2.0 * rng.uniform(k)
    events = EventArrays(rng.normal((k, d)), starts, ends)
    neg = EventArrays(rng.normal((k, d)), starts[::-1].copy(), ends[::-1].copy())
    cb = model.codebook
    pairs = [(a, b) for a in range(k) for b in range(k) if a != b]
    picked = rng.permutation(len(pairs))[:4]
    chain = tuple(Edge(pairs[i][0], int(rng.integers(0, cb.size)), pairs[i][1]) for i in picked)
    return Instance(model, events, neg, rng.normal((n_frames, d)), chain, float(n_frames + 3))


def check_path(path: str, inst: Instance, sample: int | None = None, seed: int = 0) -> GradCheckReport:
    """Check one backward path; ``sample`` limits the entries checked per tensor."""
    m = inst.model
    rng = SeededRng(seed, (0x6D,))

    def fd(f, params, keys=None, value=None):
        return finite_diff_check(f, params, STEP, keys, FLOOR, richardson=True, max_per_key=sample, rng=rng,
                                 value=value)

    cb = m.codebook
    theta = m.group("theta")
    if path == "temporal":
        chain = [Edge(e.a, e.z % cb.n_temporal, e.b) for e in inst.chain]
        times = {"starts": inst.events.starts.copy(), "ends": inst.events.ends.copy()}

        def f(p):
            arr = EventArrays(inst.events.features, p["starts"], p["ends"])
            s = score_chain(chain, arr, m)
            g = logic_loss_backward(s, m)
            return s.loss, {"starts": g.starts, "ends": g.ends}

        return fd(f, times)
    if path == "semantic":
        chain = [Edge(e.a, cb.n_temporal + e.z % (cb.size - cb.n_temporal), e.b) for e in inst.chain]
        params = {**m.params, "features": inst.events.features.copy()}

        def f(p):
            m.params = {k: v for k, v in p.items() if k != "features"}
            s = score_chain(chain, EventArrays(p["features"], inst.events.starts, inst.events.ends), m)
            g = logic_loss_backward(s, m)
            return s.loss, {**g.params, "features": g.features}

        keys = ["verifier.head.w1", "verifier.head.b1", "verifier.head.w2", "verifier.head.b2",
                "codebook.emb", "features"]
        return _restoring(m, lambda: fd(f, params, keys))
    if path == "predictor":
        params = {**m.params, "features": inst.events.features.copy()}

        def forward(p):
            m.params = {k: v for k, v in p.items() if k != "features"}
            return pred_loss(inst.chain, EventArrays(p["features"], inst.events.starts, inst.events.ends),
                             inst.frames, m)

        def f(p):
            loss, cache = forward(p)
            g, gf = pred_loss_backward(cache, m)
            return loss, {**g, "features": gf}

        keys = [k for k in theta if k.startswith("predictor.")] + ["codebook.emb", "features"]
        return _restoring(m, lambda: fd(f, params, keys, lambda p: forward(p)[0]))
    if path == "aux":
        # margin chosen so the hinge sits near 1: active, and |f| stays small
        gap = score_chain(inst.chain, inst.neg, m).loss - score_chain(inst.chain, inst.events, m).loss
        cfg = ObjectiveConfig(margin=max(gap + 1.0, 0.1))

        def f(p, with_grads=True):
            m.params = p
            rep = aux_loss(inst.chain, inst.events, inst.frames, inst.neg, m, cfg, with_grads, validate=False)
            return rep.total, rep.grads

        return _restoring(m, lambda: fd(f, dict(m.params), theta, lambda p: f(p, False)[0]))
    if path == "policy":
        sampled = sample_chain(m, inst.events, SeededRng(0), horizon=inst.horizon)
        chain = sampled.chain or inst.chain[:1]

        def f(p):
            m.params = p
            rr = replay(m, inst.events, chain, inst.horizon)
            return rr.log_prob, log_prob_grad(m, inst.events, rr, 1.0, inst.horizon)

        def value(p):
            m.params = p
            return chain_log_prob(m, inst.events, chain, inst.horizon)

        keys = m.group("policy") + ["codebook.emb"]
        return _restoring(m, lambda: fd(f, dict(m.params), keys, value))
    raise ValueError(f"unknown gradient path {path!r}")


def _restoring(model: Model, fn):
    saved = model.params
    try:
        return fn()
    finally:
        model.params = saved


@dataclass
class SuiteResult:
    reports: dict[tuple[str, int], GradCheckReport]
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.reports.values())

    @property
    def failures(self) -> list[tuple[str, int]]:
        return [key for key, r in self.reports.items() if not r.ok(self.tolerance)]

    @property
    def ok(self) -> bool:
        return not self.failures

    def per_path(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for (path, _), r in self.reports.items():
            out[path] = max(out.get(path, 0.0), r.max_rel_error)
        return out


def gradient_suite(seed: int = 0, n_instances: int = 20, paths=PATHS,
                   sample: int | None = SAMPLE_PER_TENSOR) -> SuiteResult:
    """All paths on ``n_instances`` random instances; ``sample=None`` checks every entry."""
    t0 = time.perf_counter()
    reports = {}
    for i in range(n_instances):
        inst = random_instance(seed * 1000 + i)
        for path in paths:
            reports[(path, i)] = check_path(path, inst, sample, seed * 1000 + i)
    return SuiteResult(reports, time.perf_counter() - t0)
