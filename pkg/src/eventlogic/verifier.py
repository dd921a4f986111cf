"""Hybrid differentiable logic verifier.

Temporal operators are scored by fixed sigmoid rules on timestamps;
semantic operators (including codebook padding) by a learned head over
``[v_a, v_b, e_z]``.  A chain's belief is the product of its edge scores and
its logic loss is ``-sum(log s_i)``.

Orientation: for an edge ``(a, z, b)`` the source ``a`` plays the role of
``u`` and the target ``b`` of ``v``, so ``before`` is satisfied when
``a`` ends before ``b`` starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .events import Edge, Event, EventArrays, OperatorCodebook, event_arrays, require_valid
from .model import Model
from .numeric import Mlp, MlpCache, Params, mlp_backward, mlp_forward, sigmoid

S_FLOOR = 1e-7
S_CEIL = 1.0 - 1e-7


@dataclass
class OpCounter:
    """Instrumentation for complexity accounting."""

    pair_comparisons: int = 0
    edge_evals: int = 0
    head_rows: int = 0


# --------------------------------------------------------------------------
# Temporal rules
# --------------------------------------------------------------------------


def _temporal(op: str, sa: float, ea: float, sb: float, eb: float, k: float, window: float):
    """Score and derivatives ``(s, ds/dsa, ds/dea, ds/dsb, ds/deb)``."""
    if op == "before":
        s = sigmoid(k * (sb - ea))
        g = k * s * (1.0 - s)
        return s, 0.0, -g, g, 0.0
    if op == "after":
        s = sigmoid(k * (sa - eb))
        g = k * s * (1.0 - s)
        return s, g, 0.0, 0.0, -g
    if op == "meets":
        gap = sb - ea
        s = sigmoid(k * (window - abs(gap)))
        g = k * s * (1.0 - s) * (1.0 if gap > 0 else -1.0 if gap < 0 else 0.0)
        return s, 0.0, g, -g, 0.0
    raise ValueError(f"{op!r} is not a temporal operator")


def score_temporal_edge(op: str, ea: Event, eb: Event, k: float = 1.0, window: float = 2.0) -> float:
    return _temporal(op, ea.support.start, ea.support.end, eb.support.start, eb.support.end, k, window)[0]


def temporal_edge_grads(op: str, ea: Event, eb: Event, k: float = 1.0, window: float = 2.0) -> dict[str, float]:
    """Partial derivatives of the edge score w.r.t. the four timestamps."""
    _, dsa, dea, dsb, deb = _temporal(op, ea.support.start, ea.support.end, eb.support.start, eb.support.end, k, window)
    return {"start_a": dsa, "end_a": dea, "start_b": dsb, "end_b": deb}


# --------------------------------------------------------------------------
# Semantic head
# --------------------------------------------------------------------------


def head(model: Model) -> Mlp:
    return Mlp.view(model.params, "verifier.head")


def semantic_inputs(edges: Sequence[Edge], features: np.ndarray, emb: np.ndarray) -> np.ndarray:
    a = [e.a for e in edges]
    b = [e.b for e in edges]
    z = [e.z for e in edges]
    return np.concatenate([features[a], features[b], emb[z]], axis=1)


def score_semantic_edge(model: Model, op: int, ea: Event, eb: Event) -> tuple[float, MlpCache]:
    if model.codebook.is_temporal(op):
        raise ValueError(f"temporal operator {model.codebook.name(op)!r} routed to the semantic head")
    x = np.concatenate([ea.feature, eb.feature, model.params["codebook.emb"][op]])
    logit, cache = mlp_forward(head(model), x)
    return sigmoid(float(logit[0])), cache


# --------------------------------------------------------------------------
# Chains
# --------------------------------------------------------------------------


@dataclass
class ChainScore:
    scores: np.ndarray
    belief: float
    loss: float
    cache: "_ChainCache" = field(repr=False, default=None)


@dataclass
class _ChainCache:
    chain: tuple[Edge, ...]
    arrays: EventArrays
    temporal_idx: list[int]
    temporal_d: list[tuple]
    semantic_idx: list[int]
    head_cache: MlpCache | None
    owner: int


def _as_arrays(events) -> EventArrays:
    return events if isinstance(events, EventArrays) else event_arrays(events)


def score_chain(chain: Sequence, events, model: Model, counter: OpCounter | None = None,
                validate: bool = True) -> ChainScore:
    arr = _as_arrays(events)
    chain = tuple(Edge(*e) for e in chain)
    cb, cfg = model.codebook, model.config
    if validate:
        require_valid(chain, arr.k, cb)
    scores = np.empty(len(chain))
    t_idx, t_d, s_idx = [], [], []
    for i, e in enumerate(chain):
        if cb.is_temporal(e.z):
            out = _temporal(cb.name(e.z), arr.starts[e.a], arr.ends[e.a], arr.starts[e.b], arr.ends[e.b],
                            cfg.slope, cfg.meets_window)
            scores[i] = out[0]
            t_idx.append(i)
            t_d.append(out[1:])
        else:
            s_idx.append(i)
    head_cache = None
    if s_idx:
        x = semantic_inputs([chain[i] for i in s_idx], arr.features, model.params["codebook.emb"])
        logits, head_cache = mlp_forward(head(model), x)
        scores[s_idx] = sigmoid(logits[:, 0])
    if counter is not None:
        counter.edge_evals += len(chain)
        counter.pair_comparisons += len(chain)
        counter.head_rows += len(s_idx)
    clipped = np.clip(scores, S_FLOOR, S_CEIL)
    loss = float(-np.log(clipped).sum())
    belief = float(np.prod(scores)) if len(chain) else 1.0
    cache = _ChainCache(chain, arr, t_idx, t_d, s_idx, head_cache, id(model.params["verifier.head.w1"]))
    return ChainScore(scores, belief, loss, cache)


@dataclass
class LogicGrads:
    params: Params
    features: np.ndarray
    starts: np.ndarray
    ends: np.ndarray


def logic_loss_backward(score: ChainScore, model: Model, weight: float = 1.0) -> LogicGrads:
    """Exact gradient of ``weight * (-sum log s_i)`` for a scored chain.

    Scores outside the clamp interval contribute no gradient.
    """
    c = score.cache
    if c is None or c.owner != id(model.params["verifier.head.w1"]):
        raise ValueError("stale or foreign chain-score cache")
    arr = c.arrays
    g_feat = np.zeros_like(arr.features)
    g_start = np.zeros(arr.k)
    g_end = np.zeros(arr.k)
    emb = model.params["codebook.emb"]
    grads: Params = {
        "verifier.head.w1": np.zeros_like(model.params["verifier.head.w1"]),
        "verifier.head.b1": np.zeros_like(model.params["verifier.head.b1"]),
        "verifier.head.w2": np.zeros_like(model.params["verifier.head.w2"]),
        "verifier.head.b2": np.zeros_like(model.params["verifier.head.b2"]),
        "codebook.emb": np.zeros_like(emb),
    }
    s = score.scores
    live = (s >= S_FLOOR) & (s <= S_CEIL)
    for i, (dsa, dea, dsb, deb) in zip(c.temporal_idx, c.temporal_d):
        if not live[i]:
            continue
        e = c.chain[i]
        f = -weight / s[i]
        g_start[e.a] += f * dsa
        g_end[e.a] += f * dea
        g_start[e.b] += f * dsb
        g_end[e.b] += f * deb
    if c.semantic_idx:
        sem = np.array(c.semantic_idx)
        up = np.where(live[sem], -weight * (1.0 - s[sem]), 0.0)[:, None]
        hg, gx = mlp_backward(head(model), c.head_cache, up)
        for name, g in hg.items():
            grads[f"verifier.head.{name}"] += g
        d = arr.features.shape[1]
        for row, i in enumerate(c.semantic_idx):
            e = c.chain[i]
            g_feat[e.a] += gx[row, :d]
            g_feat[e.b] += gx[row, d:2 * d]
            grads["codebook.emb"][e.z] += gx[row, 2 * d:]
    return LogicGrads(grads, g_feat, g_start, g_end)


def semantic_logit_grads(score: ChainScore, model: Model) -> dict[int, Params]:
    """Gradient of each semantic edge's head logit w.r.t. head params and embeddings."""
    c = score.cache
    out = {}
    d = c.arrays.features.shape[1]
    for row, i in enumerate(c.semantic_idx):
        up = np.zeros((len(c.semantic_idx), 1))
        up[row, 0] = 1.0
        hg, gx = mlp_backward(head(model), c.head_cache, up)
        g = {f"verifier.head.{n}": v for n, v in hg.items()}
        emb = np.zeros_like(model.params["codebook.emb"])
        emb[c.chain[i].z] += gx[row, 2 * d:]
        g["codebook.emb"] = emb
        out[i] = g
    return out


def pairwise_scan(events, model: Model, op: int, counter: OpCounter | None = None) -> np.ndarray:
    """Score ``op`` on every ordered event pair; ``nan`` on the diagonal."""
    arr = _as_arrays(events)
    k = arr.k
    out = np.full((k, k), np.nan)
    pairs = [(a, b) for a in range(k) for b in range(k) if a != b]
    if counter is not None:
        counter.pair_comparisons += len(pairs)
    if not pairs:
        return out
    cb, cfg = model.codebook, model.config
    if cb.is_temporal(op):
        for a, b in pairs:
            out[a, b] = _temporal(cb.name(op), arr.starts[a], arr.ends[a], arr.starts[b], arr.ends[b],
                                  cfg.slope, cfg.meets_window)[0]
    else:
        edges = [Edge(a, op, b) for a, b in pairs]
        logits, _ = mlp_forward(head(model), semantic_inputs(edges, arr.features, model.params["codebook.emb"]))
        for (a, b), lg in zip(pairs, logits[:, 0]):
            out[a, b] = sigmoid(float(lg))
    return out


def neg_log(s: float) -> float:
    return -math.log(min(max(s, S_FLOOR), S_CEIL))
