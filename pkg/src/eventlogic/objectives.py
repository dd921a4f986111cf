"""Auxiliary objective: predictive utility, logic, counterfactual margin, sparsity."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .events import Edge, EventArrays
from .model import Model
from .numeric import Mlp, MlpCache, Params, mlp_backward, mlp_forward
from .verifier import ChainScore, LogicGrads, OpCounter, _as_arrays, logic_loss_backward, score_chain

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_pred: float = 1.0
    lambda_logic: float = 1.0
    lambda_cf: float = 1.0
    lambda_spar: float = 1.0
    alpha: float = 0.1
    margin: float = 0.5
    spar_mode: str = "count"  # "count": alpha*|C|; "expected": alpha * sum_t P(continue at t)

    def __post_init__(self):
        for name in ("lambda_pred", "lambda_logic", "lambda_cf", "lambda_spar", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.spar_mode not in ("count", "expected"):
            raise ValueError(f"unknown spar_mode {self.spar_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Predictive coding
# --------------------------------------------------------------------------


def cosine_loss_rows(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row ``1 - cos`` with zero-norm rows scored as cosine 0.

    Returns ``(loss_rows, dloss/dpred, degenerate_mask)``.
    """
    pn = np.linalg.norm(pred, axis=1)
    tn = np.linalg.norm(target, axis=1)
    bad = (pn == 0) | (tn == 0)
    safe_p = np.where(bad, 1.0, pn)
    safe_t = np.where(bad, 1.0, tn)
    cos = np.where(bad, 0.0, (pred * target).sum(axis=1) / (safe_p * safe_t))
    dcos = target / (safe_p * safe_t)[:, None] - cos[:, None] * pred / (safe_p ** 2)[:, None]
    dcos[bad] = 0.0
    return 1.0 - cos, -dcos, bad


@dataclass
class PredCache:
    chain: tuple[Edge, ...]
    arrays: EventArrays
    incidence: np.ndarray
    nonempty: np.ndarray
    enc_cache: MlpCache | None
    head_cache: MlpCache
    dloss: np.ndarray
    degenerate: int


def prefix_incidence(chain: Sequence[Edge], ends: np.ndarray, n_steps: int) -> np.ndarray:
    """Row ``t`` averages the edges whose events have both ended once frame ``t`` is seen."""
    inc = np.zeros((n_steps, len(chain)))
    if not chain:
        return inc
    elapsed = np.array([max(ends[e.a], ends[e.b]) for e in chain])
    t = np.arange(n_steps)[:, None] + 1.0
    inc = (elapsed[None, :] <= t).astype(np.float64)
    counts = inc.sum(axis=1, keepdims=True)
    return np.divide(inc, counts, out=np.zeros_like(inc), where=counts > 0)


def pred_loss(chain: Sequence, events, frames: np.ndarray, model: Model) -> tuple[float, PredCache]:
    """Mean over t of ``1 - cos(S_hat[t+1], S[t+1])``."""
    arr = _as_arrays(events)
    chain = tuple(Edge(*e) for e in chain)
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0] - 1
    if n < 1:
        raise ValueError("predictive loss needs at least two frames")
    p = model.params
    d = model.config.d
    inc = prefix_incidence(chain, arr.ends, n)
    nonempty = inc.sum(axis=1) > 0
    prefix = np.tile(p["predictor.null"], (n, 1))
    enc_cache = None
    if nonempty.any():
        edges = np.concatenate(
            [arr.features[[e.a for e in chain]], p["codebook.emb"][[e.z for e in chain]],
             arr.features[[e.b for e in chain]]], axis=1)
        mean_enc = inc[nonempty] @ edges
        enc_out, enc_cache = mlp_forward(Mlp.view(p, "predictor.enc"), mean_enc)
        prefix[nonempty] = enc_out
    pred, head_cache = mlp_forward(Mlp.view(p, "predictor.head"), np.concatenate([prefix, frames[:-1]], axis=1))
    rows, dpred, bad = cosine_loss_rows(pred, frames[1:])
    if bad.any():
        logger.debug("pred_loss: %d zero-norm rows scored as cosine 0", int(bad.sum()))
    assert pred.shape[1] == d
    cache = PredCache(chain, arr, inc, nonempty, enc_cache, head_cache, dpred / n, int(bad.sum()))
    return float(rows.mean()), cache


def pred_loss_backward(cache: PredCache, model: Model, weight: float = 1.0) -> tuple[Params, np.ndarray]:
    """Gradients of ``weight * pred_loss`` w.r.t. predictor params and embeddings, plus event features."""
    p = model.params
    d = model.config.d
    grads: Params = {}
    hg, gin = mlp_backward(Mlp.view(p, "predictor.head"), cache.head_cache, weight * cache.dloss)
    for k, v in hg.items():
        grads[f"predictor.head.{k}"] = v
    gprefix = gin[:, :d]
    grads["predictor.null"] = gprefix[~cache.nonempty].sum(axis=0)
    g_feat = np.zeros_like(cache.arrays.features)
    g_emb = np.zeros_like(p["codebook.emb"])
    enc = Mlp.view(p, "predictor.enc")
    if cache.enc_cache is not None:
        eg, gmean = mlp_backward(enc, cache.enc_cache, gprefix[cache.nonempty])
        for k, v in eg.items():
            grads[f"predictor.enc.{k}"] = v
        gedges = cache.incidence[cache.nonempty].T @ gmean
        for i, e in enumerate(cache.chain):
            g_feat[e.a] += gedges[i, :d]
            g_emb[e.z] += gedges[i, d:2 * d]
            g_feat[e.b] += gedges[i, 2 * d:]
    else:
        for k in ("w1", "b1", "w2", "b2"):
            grads[f"predictor.enc.{k}"] = np.zeros_like(p[f"predictor.enc.{k}"])
    grads["codebook.emb"] = g_emb
    return grads, g_feat


# --------------------------------------------------------------------------
# Counterfactual margin and sparsity
# --------------------------------------------------------------------------


def hinge(margin: float, logic_pos: float, logic_neg: float) -> float:
    return max(0.0, margin + logic_pos - logic_neg)


def cf_loss(chain: Sequence, events, neg_events, model: Model, margin: float,
            pos_score: ChainScore | None = None, counter: OpCounter | None = None):
    """``max(0, m + L_logic(C; V) - L_logic(C; V-))`` and both chain scores."""
    pos = _as_arrays(events)
    neg = _as_arrays(neg_events)
    if pos.k != neg.k:
        raise ValueError(f"event count mismatch between V ({pos.k}) and V- ({neg.k})")
    if pos_score is None:
        pos_score = score_chain(chain, pos, model, counter)
    neg_score = score_chain(chain, neg, model, counter)
    return hinge(margin, pos_score.loss, neg_score.loss), pos_score, neg_score


def spar_loss(chain: Sequence, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return alpha * len(chain)


# --------------------------------------------------------------------------
# Aggregate
# --------------------------------------------------------------------------


@dataclass
class AuxLossReport:
    pred: float
    logic: float
    cf: float
    spar: float
    total: float
    belief: float
    neg_logic: float
    grads: Params = field(default_factory=dict, repr=False)

    def components(self) -> dict[str, float]:
        return {"pred": self.pred, "logic": self.logic, "cf": self.cf, "spar": self.spar}


def _add(into: Params, grads: Params, scale: float = 1.0) -> None:
    for k, v in grads.items():
        if k in into:
            into[k] = into[k] + scale * v
        else:
            into[k] = scale * v


def aux_loss(chain: Sequence, events, frames: np.ndarray, neg_events, model: Model, cfg: ObjectiveConfig,
             with_grads: bool = True, expected_length: float | None = None,
             counter: OpCounter | None = None, validate: bool = True) -> AuxLossReport:
    """Weighted four-term objective for one chain.

    Gradients cover the differentiable terms (pred, logic, CF) and are keyed
    by parameter name; sparsity only shapes the policy reward.
    """
    chain = tuple(Edge(*e) for e in chain)
    pos = score_chain(chain, events, model, counter, validate=validate)
    pred, pcache = pred_loss(chain, events, frames, model)
    cf, _, neg = cf_loss(chain, events, neg_events, model, cfg.margin, pos_score=pos, counter=counter)
    if cfg.spar_mode == "expected" and expected_length is not None:
        spar = cfg.alpha * expected_length
    else:
        spar = spar_loss(chain, cfg.alpha)
    total = (cfg.lambda_pred * pred + cfg.lambda_logic * pos.loss + cfg.lambda_cf * cf
             + cfg.lambda_spar * spar)
    report = AuxLossReport(pred, pos.loss, cf, spar, total, pos.belief, neg.loss)
    if with_grads:
        grads: Params = {k: np.zeros_like(v) for k, v in model.params.items() if not k.startswith("policy.")}
        if cfg.lambda_pred > 0:
            pg, _ = pred_loss_backward(pcache, model, cfg.lambda_pred)
            _add(grads, pg)
        w_pos = cfg.lambda_logic + (cfg.lambda_cf if cf > 0 else 0.0)
        if w_pos > 0 and chain:
            _add(grads, logic_loss_backward(pos, model, w_pos).params)
        if cfg.lambda_cf > 0 and cf > 0 and chain:
            _add(grads, logic_loss_backward(neg, model, -cfg.lambda_cf).params)
        report.grads = grads
    return report
