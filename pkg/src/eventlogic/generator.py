"""Autoregressive edge policy ("discrete chain-of-thought generator").

Each step either stops or emits an edge ``(a, z, b)`` in three stages:

1. source-or-stop: a categorical over the ``K`` events plus a stop action;
2. operator: logits are dot products between a query vector and the
   codebook embeddings;
3. target: a categorical over events, conditioned on source and operator.

The context for a step is an MLP over the mean event descriptor, the
previous edge ``[x_a, e_z, x_b]`` and a sinusoidal step code.  Event
descriptors are the event feature plus its start/end normalised by the
stream length.  Masks forbid self-loops and repeated edges; a step with no
legal action, or step ``l_max``, ends the chain with probability one.

Operators are drawn with the Gumbel-max trick; the Gumbel-softmax relaxed
distribution at the current temperature is recorded alongside.  Events are
drawn from the plain categorical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .events import Edge, EventArrays
from .model import PAIR_FEATS, Model
from .numeric import Mlp, MlpCache, Params, SeededRng, log_softmax, mlp_backward, mlp_forward
from .verifier import _as_arrays

NEG_INF = -np.inf


def step_encoding(step: int) -> np.ndarray:
    return np.array([math.sin(step), math.cos(step), math.sin(step / 10.0), math.cos(step / 10.0)])


def event_descriptors(arr: EventArrays, horizon: float) -> np.ndarray:
    h = float(horizon) if horizon > 0 else 1.0
    return np.concatenate([arr.features, arr.starts[:, None] / h, arr.ends[:, None] / h], axis=1)


def pair_features(arr: EventArrays, scale: float = 2.0) -> np.ndarray:
    """``out[a, j] = tanh([start_j - end_a, start_a - end_j] / scale)``, in frames."""
    fwd = arr.starts[None, :] - arr.ends[:, None]
    bwd = arr.starts[:, None] - arr.ends[None, :]
    return np.tanh(np.stack([fwd, bwd], axis=-1) / scale)


def relaxed_distribution(log_p: np.ndarray, gumbel: np.ndarray, temperature: float) -> np.ndarray:
    """Gumbel-softmax ``softmax((log p + g) / tau)`` over finite entries."""
    z = (log_p + gumbel) / temperature
    live = np.isfinite(z)
    out = np.zeros_like(z)
    zz = z[live] - z[live].max()
    ez = np.exp(zz)
    out[live] = ez / ez.sum()
    return out


class _Masks:
    """Tracks which (source, operator, target) actions are still legal."""

    def __init__(self, k: int, m: int):
        self.k, self.m = k, m
        self.used: set[Edge] = set()
        self.per_source = np.zeros(k, dtype=int)
        self.per_source_op = np.zeros((k, m), dtype=int)

    def add(self, e: Edge) -> None:
        self.used.add(e)
        self.per_source[e.a] += 1
        self.per_source_op[e.a, e.z] += 1

    def sources(self) -> np.ndarray:
        return self.per_source < self.m * (self.k - 1)

    def ops(self, a: int) -> np.ndarray:
        return self.per_source_op[a] < self.k - 1

    def targets(self, a: int, z: int) -> np.ndarray:
        mask = np.ones(self.k, dtype=bool)
        mask[a] = False
        for e in self.used:
            if e.a == a and e.z == z:
                mask[e.b] = False
        return mask


@dataclass
class StepLogits:
    source: np.ndarray            # (K,), -inf where masked
    stop: float
    op: np.ndarray | None = None  # (M,), -inf where masked
    target: np.ndarray | None = None


@dataclass
class _StepRecord:
    forced_stop: bool
    action: tuple  # () for stop, (a, z, b) otherwise
    logp: float
    ctx_in: np.ndarray | None = None
    ctx: np.ndarray | None = None
    ctx_cache: MlpCache | None = None
    src_cache: MlpCache | None = None
    src_probs: np.ndarray | None = None  # (K+1,), last entry = stop
    op_u: np.ndarray | None = None
    op_q: np.ndarray | None = None
    op_probs: np.ndarray | None = None
    tgt_cache: MlpCache | None = None
    tgt_probs: np.ndarray | None = None
    prev_z: int | None = None
    relaxed: np.ndarray | None = None


@dataclass
class SampledChain:
    chain: tuple[Edge, ...]
    step_logps: list[float]
    log_prob: float
    stop_step: int
    records: list = field(default_factory=list, repr=False)
    relaxed: list = field(default_factory=list, repr=False)
    stop_probs: list = field(default_factory=list, repr=False)

    @property
    def expected_length_proxy(self) -> float:
        """Sum over visited steps of the probability of continuing."""
        return float(sum(1.0 - p for p in self.stop_probs))


class _Runner:
    def __init__(self, model: Model, events, horizon: float):
        self.model = model
        self.p = model.params
        self.arr = _as_arrays(events)
        self.k = self.arr.k
        self.m = model.config.m
        self.x = event_descriptors(self.arr, horizon)
        self.mean_x = self.x.mean(axis=0) if self.k else np.zeros(model.config.event_width)
        self.emb = self.p["codebook.emb"]
        self.ctx_mlp = Mlp.view(self.p, "policy.ctx")
        self.src_mlp = Mlp.view(self.p, "policy.src")
        self.tgt_mlp = Mlp.view(self.p, "policy.tgt")
        self.dx = self.x.shape[1]
        self.pair = pair_features(self.arr)

    def context(self, prev: Edge | None, step: int):
        if prev is None:
            prev_enc = np.zeros(2 * self.dx + self.model.config.d)
        else:
            prev_enc = np.concatenate([self.x[prev.a], self.emb[prev.z], self.x[prev.b]])
        ctx_in = np.concatenate([self.mean_x, prev_enc, step_encoding(step)])
        ctx, cache = mlp_forward(self.ctx_mlp, ctx_in)
        return ctx_in, ctx, cache

    def source_logits(self, ctx: np.ndarray, masks: _Masks):
        rows = np.concatenate([self.x, np.broadcast_to(ctx, (self.k, ctx.size))], axis=1)
        logits, cache = mlp_forward(self.src_mlp, rows)
        logits = logits[:, 0].copy()
        logits[~masks.sources()] = NEG_INF
        stop = float(self.p["policy.stop.w"] @ ctx + self.p["policy.stop.b"][0])
        return np.append(logits, stop), cache

    def op_logits(self, ctx: np.ndarray, a: int, masks: _Masks):
        u = np.concatenate([ctx, self.x[a]])
        q = self.p["policy.opq.w"] @ u + self.p["policy.opq.b"]
        logits = self.emb @ q
        logits[~masks.ops(a)] = NEG_INF
        return logits, u, q

    def target_logits(self, ctx: np.ndarray, a: int, z: int, masks: _Masks):
        rows = np.concatenate(
            [np.broadcast_to(self.x[a], (self.k, self.dx)), self.x, self.pair[a], np.broadcast_to(self.emb[z], (self.k, self.emb.shape[1])),
             np.broadcast_to(ctx, (self.k, ctx.size))], axis=1)
        logits, cache = mlp_forward(self.tgt_mlp, rows)
        # operator-conditioned timing preference
        logits = logits[:, 0] + self.pair[a] @ (self.p["policy.tgt_pair.w"] @ self.emb[z])
        logits[~masks.targets(a, z)] = NEG_INF
        return logits, cache

    # ------------------------------------------------------------------

    def run(self, chooser: Callable, l_max: int) -> SampledChain:
        """Roll out the policy; ``chooser(stage, log_probs)`` returns an index or None."""
        masks = _Masks(self.k, self.m)
        records: list[_StepRecord] = []
        chain: list[Edge] = []
        prev = None
        stop_probs = []
        for step in range(l_max + 1):
            if step == l_max or self.k < 2 or not masks.sources().any():
                records.append(_StepRecord(True, (), 0.0))
                break
            ctx_in, ctx, ctx_cache = self.context(prev, step)
            src_logits, src_cache = self.source_logits(ctx, masks)
            lp_src = log_softmax(src_logits, np.isfinite(src_logits))
            src_probs = np.exp(lp_src)
            stop_probs.append(float(src_probs[-1]))
            pick = chooser("source", lp_src, step)
            if pick is None:
                return None
            rec = _StepRecord(False, (), float(lp_src[pick]), ctx_in, ctx, ctx_cache, src_cache, src_probs,
                              prev_z=None if prev is None else prev.z)
            if pick == self.k:
                records.append(rec)
                break
            a = int(pick)
            op_logits, u, q = self.op_logits(ctx, a, masks)
            lp_op = log_softmax(op_logits, np.isfinite(op_logits))
            z = chooser("op", lp_op, step)
            if z is None:
                return None
            rec.relaxed = getattr(chooser, "last_relaxed", None)
            tgt_logits, tgt_cache = self.target_logits(ctx, a, int(z), masks)
            lp_tgt = log_softmax(tgt_logits, np.isfinite(tgt_logits))
            b = chooser("target", lp_tgt, step)
            if b is None:
                return None
            edge = Edge(a, int(z), int(b))
            rec.action = tuple(edge)
            rec.logp += float(lp_op[z] + lp_tgt[b])
            rec.op_u, rec.op_q, rec.op_probs = u, q, np.exp(lp_op)
            rec.tgt_cache, rec.tgt_probs = tgt_cache, np.exp(lp_tgt)
            records.append(rec)
            chain.append(edge)
            masks.add(edge)
            prev = edge
        logps = [r.logp for r in records]
        return SampledChain(tuple(chain), logps, float(sum(logps)), len(chain), records,
                            [r.relaxed for r in records if r.relaxed is not None], stop_probs)

    # ------------------------------------------------------------------

    def backward(self, records: Sequence[_StepRecord], scale: float, grads: Params) -> None:
        """Accumulate ``scale * d log pi / d params`` into ``grads``."""
        p, k, d = self.p, self.k, self.model.config.d
        dx = self.dx
        c = p["policy.stop.w"].shape[0]
        for rec in records:
            if rec.forced_stop:
                continue
            g_ctx = np.zeros(c)
            # source / stop
            pick = k if not rec.action else rec.action[0]
            g_src = -rec.src_probs * scale
            g_src[pick] += scale
            g_stop = g_src[-1]
            grads["policy.stop.w"] += g_stop * rec.ctx
            grads["policy.stop.b"] += g_stop
            g_ctx += g_stop * p["policy.stop.w"]
            sg, sx = mlp_backward(self.src_mlp, rec.src_cache, g_src[:k, None])
            for n, g in sg.items():
                grads[f"policy.src.{n}"] += g
            g_ctx += sx[:, dx:].sum(axis=0)
            if rec.action:
                a, z, b = rec.action
                # operator
                g_op = -rec.op_probs * scale
                g_op[z] += scale
                g_q = self.emb.T @ g_op
                grads["codebook.emb"] += np.outer(g_op, rec.op_q)
                grads["policy.opq.w"] += np.outer(g_q, rec.op_u)
                grads["policy.opq.b"] += g_q
                g_u = p["policy.opq.w"].T @ g_q
                g_ctx += g_u[:c]
                # target
                g_t = -rec.tgt_probs * scale
                g_t[b] += scale
                tg, tx = mlp_backward(self.tgt_mlp, rec.tgt_cache, g_t[:, None])
                for n, g in tg.items():
                    grads[f"policy.tgt.{n}"] += g
                wz = p["policy.tgt_pair.w"]
                gp = self.pair[a].T @ g_t
                grads["policy.tgt_pair.w"] += np.outer(gp, self.emb[z])
                grads["codebook.emb"][z] += wz.T @ gp
                off = 2 * dx + PAIR_FEATS
                grads["codebook.emb"][z] += tx[:, off:off + d].sum(axis=0)
                g_ctx += tx[:, off + d:].sum(axis=0)
            cg, cx = mlp_backward(self.ctx_mlp, rec.ctx_cache, g_ctx)
            for n, g in cg.items():
                grads[f"policy.ctx.{n}"] += g
            if rec.prev_z is not None:
                off = dx + dx
                grads["codebook.emb"][rec.prev_z] += cx[off:off + d]


# --------------------------------------------------------------------------
# Choosers
# --------------------------------------------------------------------------


class _Sampler:
    def __init__(self, rng: SeededRng, temperature: float):
        self.rng = rng
        self.temperature = temperature
        self.last_relaxed = None

    def __call__(self, stage: str, log_p: np.ndarray, step: int):
        if stage == "op":
            g = self.rng.gumbel(log_p.shape)
            self.last_relaxed = relaxed_distribution(log_p, g, self.temperature)
            return int(np.argmax(np.where(np.isfinite(log_p), log_p + g, NEG_INF)))
        return self.rng.categorical(np.exp(log_p))


def _greedy(stage: str, log_p: np.ndarray, step: int):
    return int(np.argmax(log_p))


class _Replay:
    def __init__(self, chain: Sequence[Edge], k: int):
        self.chain = list(chain)
        self.k = k

    def __call__(self, stage: str, log_p: np.ndarray, step: int):
        if step >= len(self.chain):
            idx = self.k if stage == "source" else None
        else:
            e = self.chain[step]
            idx = {"source": e.a, "op": e.z, "target": e.b}[stage]
        if idx is None or not np.isfinite(log_p[idx]):
            return None
        return idx


# --------------------------------------------------------------------------
# Public API
# --------------------------------------------------------------------------


def step_logits(model: Model, events, chain_so_far: Sequence, step: int, horizon: float,
                source: int | None = None, op: int | None = None) -> StepLogits:
    """Masked logits for one step; operator/target stages need the earlier choices."""
    if step >= model.config.l_max:
        raise ValueError(f"step {step} >= l_max {model.config.l_max}")
    r = _Runner(model, events, horizon)
    masks = _Masks(r.k, r.m)
    for e in chain_so_far:
        masks.add(Edge(*e))
    prev = Edge(*chain_so_far[-1]) if chain_so_far else None
    _, ctx, _ = r.context(prev, step)
    src, _ = r.source_logits(ctx, masks)
    out = StepLogits(src[:-1], float(src[-1]))
    if source is not None:
        out.op, _, _ = r.op_logits(ctx, source, masks)
        if op is not None:
            out.target, _ = r.target_logits(ctx, source, op, masks)
    return out


def sample_chain(model: Model, events, rng: SeededRng, temperature: float = 1.0, hard: bool = True,
                 horizon: float = 1.0) -> SampledChain:
    """Draw one chain.

    Operators use the Gumbel-max index in both modes (it does not depend on
    the temperature); ``hard=False`` additionally records the relaxed
    Gumbel-softmax distribution for each operator choice.  Log-probabilities
    are always those of the categorical policy.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    runner = _Runner(model, events, horizon)
    sampler = _Sampler(rng, temperature)
    out = runner.run(sampler, model.config.l_max)
    if hard:
        out.relaxed = []
    return out


def greedy_chain(model: Model, events, horizon: float = 1.0) -> SampledChain:
    return _Runner(model, events, horizon).run(_greedy, model.config.l_max)


def chain_log_prob(model: Model, events, chain: Sequence, horizon: float = 1.0) -> float:
    """Exact log-probability including the terminating decision; ``-inf`` if unreachable."""
    arr = _as_arrays(events)
    chain = [Edge(*e) for e in chain]
    if len(chain) > model.config.l_max:
        return float("-inf")
    out = _Runner(model, arr, horizon).run(_Replay(chain, arr.k), model.config.l_max)
    if out is None or list(out.chain) != chain:
        return float("-inf")
    return out.log_prob


def policy_grad_zeros(model: Model) -> Params:
    g = {k: np.zeros_like(v) for k, v in model.params.items() if k.startswith("policy.")}
    g["codebook.emb"] = np.zeros_like(model.params["codebook.emb"])
    return g


def log_prob_grad(model: Model, events, sampled: SampledChain, scale: float = 1.0,
                  horizon: float = 1.0, into: Params | None = None) -> Params:
    """``scale * grad log pi(chain)`` w.r.t. policy params and codebook embeddings."""
    grads = policy_grad_zeros(model) if into is None else into
    _Runner(model, events, horizon).backward(sampled.records, scale, grads)
    return grads


def replay(model: Model, events, chain: Sequence, horizon: float = 1.0) -> SampledChain | None:
    arr = _as_arrays(events)
    return _Runner(model, arr, horizon).run(_Replay([Edge(*e) for e in chain], arr.k), model.config.l_max)


@dataclass
class Selection:
    best: int
    chains: list[SampledChain]
    losses: list[float]
    reports: list = field(default_factory=list, repr=False)

    @property
    def chain(self) -> tuple[Edge, ...]:
        return self.chains[self.best].chain


def select_best(losses: Sequence[float], lengths: Sequence[int]) -> int:
    """Lowest loss; ties go to the shorter chain, then the lower index."""
    return min(range(len(losses)), key=lambda i: (losses[i], lengths[i], i))


def sample_and_select(model: Model, events, evaluate: Callable, n: int, rng: SeededRng,
                      horizon: float = 1.0, temperature: float = 1.0) -> Selection:
    """Sample ``n`` hard chains and keep the one minimising ``evaluate(chain).total``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    chains, losses, reports = [], [], []
    for i in range(n):
        s = sample_chain(model, events, rng.child(i), temperature, hard=True, horizon=horizon)
        rep = evaluate(s)
        chains.append(s)
        losses.append(rep.total)
        reports.append(rep)
    best = select_best(losses, [len(c.chain) for c in chains])
    return Selection(best, chains, losses, reports)
