"""Measurement procedures on trained (or untrained) models.

Influence of one update on a test chain's belief, operator-embedding
identifiability, adversarial chain interventions, hyperparameter sweeps,
event-density stratification and instrumented complexity counts.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .events import Edge, EventArrays, OperatorCodebook, validate_chain
from .experiment import ExperimentConfig, run_experiment
from .model import Model
from .numeric import SeededRng
from .objectives import ObjectiveConfig, aux_loss, pred_loss
from .trainer import EvalReport, Prepared, chain_utility, evaluate, select_chain
from .verifier import OpCounter, logic_loss_backward, pairwise_scan, score_chain, semantic_logit_grads
from .world import DENSITY_TIERS

logger = logging.getLogger(__name__)

EPS_COLLAPSE = 1e-2
INTERVENTION_MODES = ("semantic_flip", "time_reversal", "structural_shuffle")
ANTONYMS = {"cause": "prevent", "prevent": "cause", "enable": "prevent"}


def _dot(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    return float(sum(np.vdot(a[k], b[k]) for k in a.keys() & b.keys()))


# --------------------------------------------------------------------------
# Influence of one update
# --------------------------------------------------------------------------


@dataclass
class InfluenceReport:
    train_id: int
    test_id: int
    eta: float
    belief: float
    actual: float
    predicted: float
    inner: float
    factored: float
    sensitivity: dict[int, float]  # edge position -> g * (1 - s_i)
    kernel: dict[int, float]  # edge position -> <grad logit_i, grad L>
    train_grad_norm: float

    @property
    def rel_error(self) -> float:
        return abs(self.actual - self.predicted) / abs(self.predicted) if self.predicted else float("inf")

    @property
    def factorization_gap(self) -> float:
        return abs(self.factored - self.inner)


def influence_probe(model: Model, train: Prepared, train_chain: Sequence, test: Prepared, test_chain: Sequence,
                    eta: float, cfg: ObjectiveConfig = ObjectiveConfig(), mode: str | None = None) -> InfluenceReport:
    """First-order prediction of the change in ``g = prod_i s_i`` after one plain step ``-eta * grad L``.

    ``L`` is the auxiliary loss of ``train_chain`` on ``train`` against the
    negative ``mode`` (first available by default).  Only theta parameters
    move; temporal edge scores do not depend on them, so their terms vanish.
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if not train.negatives:
        raise LookupError("training scenario has no counterfactual negative")
    mode = mode or sorted(train.negatives)[0]
    rep = aux_loss(train_chain, train.events, train.frames, train.negatives[mode], model, cfg, validate=False)
    grad_l = rep.grads
    score = score_chain(test_chain, test.events, model, validate=False)
    g = score.belief
    # Independent route to grad g: grad(-log g) from the logic backward, times -g.
    neg_log = logic_loss_backward(score, model).params
    grad_g = {k: -g * v for k, v in neg_log.items()}
    inner = _dot(grad_g, grad_l)
    logit_grads = semantic_logit_grads(score, model)
    sens = {i: g * (1.0 - float(score.scores[i])) for i in logit_grads}
    kern = {i: _dot(logit_grads[i], grad_l) for i in logit_grads}
    factored = float(sum(sens[i] * kern[i] for i in logit_grads))
    stepped = model.copy()
    for k, v in grad_l.items():
        stepped.params[k] = stepped.params[k] - eta * v
    g_new = score_chain(test_chain, test.events, stepped, validate=False).belief
    norm = float(np.sqrt(sum(float(np.vdot(v, v)) for v in grad_l.values())))
    return InfluenceReport(train.scenario.seed, test.scenario.seed, eta, g, g_new - g, -eta * inner, inner,
                           factored, sens, kern, norm)


# --------------------------------------------------------------------------
# Identifiability
# --------------------------------------------------------------------------


def distance_matrix(emb: np.ndarray) -> np.ndarray:
    diff = emb[:, None, :] - emb[None, :, :]
    out = np.sqrt((diff ** 2).sum(axis=-1))
    np.fill_diagonal(out, 0.0)
    return out


def min_pairwise(dist: np.ndarray) -> tuple[float, tuple[int, int]]:
    iu = np.triu_indices(dist.shape[0], k=1)
    j = int(np.argmin(dist[iu]))
    return float(dist[iu][j]), (int(iu[0][j]), int(iu[1][j]))


@dataclass
class IdentifiabilityReport:
    distances: list[np.ndarray]
    min_distance: list[float]
    closest: list[tuple[int, int]]
    flags: list[tuple[int, int, int]]  # (checkpoint, i, j) with distance < eps
    eps: float
    grad_norms: list[np.ndarray] = field(default_factory=list)

    @property
    def collapsed(self) -> bool:
        return bool(self.flags)

    def pair(self, i: int, j: int) -> list[float]:
        return [float(d[i, j]) for d in self.distances]


def identifiability_monitor(checkpoints: Sequence, eps: float = EPS_COLLAPSE,
                            grads: Sequence[np.ndarray] | None = None) -> IdentifiabilityReport:
    """Distance matrices over a trajectory of codebooks (arrays or models)."""
    if len(checkpoints) < 2:
        raise ValueError("need at least two checkpoints")
    embs = [c.params["codebook.emb"] if isinstance(c, Model) else np.asarray(c) for c in checkpoints]
    dists, mins, closest, flags = [], [], [], []
    for t, emb in enumerate(embs):
        d = distance_matrix(emb)
        dists.append(d)
        lo, at = min_pairwise(d)
        mins.append(lo)
        closest.append(at)
        iu = np.triu_indices(d.shape[0], k=1)
        flags.extend((t, int(i), int(j)) for i, j in zip(*iu) if d[i, j] < eps)
    norms = [np.linalg.norm(g, axis=1) for g in grads] if grads is not None else []
    return IdentifiabilityReport(dists, mins, closest, flags, eps, norms)


# --------------------------------------------------------------------------
# Interventions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Intervention:
    chain: tuple[Edge, ...]
    noop: bool


def _flip(chain, codebook: OperatorCodebook, antonyms: Mapping[str, str]) -> tuple[Edge, ...]:
    out = []
    for e in chain:
        name = codebook.name(e.z)
        out.append(Edge(e.a, codebook.id(antonyms[name]), e.b) if name in antonyms else e)
    return tuple(out)


def _reverse(chain, codebook: OperatorCodebook) -> tuple[Edge, ...]:
    # before(a, b) and after(b, a) test the same inequality, so swapping both
    # direction and endpoints would leave every score unchanged.  Directional
    # operators swap direction in place; meets has no twin and swaps endpoints.
    swap = {"before": "after", "after": "before"}
    out = []
    for e in chain:
        name = codebook.name(e.z)
        if name in swap:
            out.append(Edge(e.a, codebook.id(swap[name]), e.b))
        elif codebook.is_temporal(e.z):
            out.append(Edge(e.b, e.z, e.a))
        else:
            out.append(e)
    return tuple(out)


def _shuffle(chain, rng: SeededRng, codebook: OperatorCodebook, tries: int = 200) -> tuple[Edge, ...] | None:
    """Permute endpoint slots and operator slots independently; ``None`` if no valid rewiring differs."""
    ends = np.array([x for e in chain for x in (e.a, e.b)])
    ops = np.array([e.z for e in chain])
    k = int(ends.max()) + 1
    original = set(chain)
    for _ in range(tries):
        pe = ends[rng.permutation(len(ends))]
        po = ops[rng.permutation(len(ops))]
        cand = tuple(Edge(int(pe[2 * i]), int(po[i]), int(pe[2 * i + 1])) for i in range(len(chain)))
        if set(cand) != original and not validate_chain(cand, k, codebook):
            return cand
    return None


def intervene_chain(chain: Sequence, mode: str, rng: SeededRng | None = None,
                    codebook: OperatorCodebook = OperatorCodebook(),
                    antonyms: Mapping[str, str] = ANTONYMS) -> Intervention:
    """Corrupt a chain; inapplicable modes return it unchanged with ``noop=True``."""
    chain = tuple(Edge(*e) for e in chain)
    if mode not in INTERVENTION_MODES:
        raise ValueError(f"unknown intervention mode {mode!r}")
    if not chain:
        return Intervention(chain, True)
    if mode == "semantic_flip":
        out = _flip(chain, codebook, antonyms)
    elif mode == "time_reversal":
        out = _reverse(chain, codebook)
    else:
        if rng is None:
            raise ValueError("structural_shuffle needs an rng")
        out = _shuffle(chain, rng, codebook)
        if out is None:
            return Intervention(chain, True)
    return Intervention(out, out == chain)


@dataclass
class InterventionResult:
    mode: str
    clean: float
    corrupted: float
    n: int
    n_applied: int

    @property
    def delta(self) -> float:
        """Relative degradation ``(clean - corrupted) / clean``."""
        return (self.clean - self.corrupted) / self.clean if self.clean > 0 else float("nan")


def utility_of(model: Model, p: Prepared, chain) -> float:
    logic = score_chain(chain, p.events, model, validate=False).loss
    pred, _ = pred_loss(chain, p.events, p.frames, model)
    return chain_utility(pred, logic)


Corruption = Callable[[tuple, SeededRng], Intervention]


def intervention_sweep(model: Model, corpus: Sequence[Prepared], modes: Sequence = INTERVENTION_MODES,
                       cfg: ObjectiveConfig = ObjectiveConfig(), n_select: int = 5, seed: int = 0,
                       chains: Sequence | None = None) -> list[InterventionResult]:
    """Mean utility of verifier-selected chains before and after each corruption.

    A mode is a name from :data:`INTERVENTION_MODES` or a callable
    ``(chain, rng) -> Intervention``.  Every corruption of one scenario sees
    the same selected chain and an rng keyed by scenario.
    """
    root = SeededRng(seed, (17,))
    if chains is None:
        chains = [select_chain(model, p, cfg, n_select, root.child(0, i)).chain if p.negatives else ()
                  for i, p in enumerate(corpus)]
    clean = [utility_of(model, p, c) for p, c in zip(corpus, chains)]
    out = []
    for mi, mode in enumerate(modes):
        name = mode if isinstance(mode, str) else getattr(mode, "__name__", f"custom{mi}")
        corrupted, applied = [], 0
        for i, (p, c) in enumerate(zip(corpus, chains)):
            rng = root.child(1, mi, i)
            iv = mode(tuple(c), rng) if callable(mode) else intervene_chain(c, mode, rng, model.codebook)
            applied += not iv.noop
            corrupted.append(utility_of(model, p, iv.chain) if not iv.noop else clean[i])
        out.append(InterventionResult(name, float(np.mean(clean)), float(np.mean(corrupted)), len(chains), applied))
    return out


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------

SWEEP_AXES = ("alpha", "k", "t", "m")
FRAMES_PER_EVENT = 8  # frame budget per event when the K axis grows the world


def apply_axis(base: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    """``alpha``: sparsity weight; ``k``: events per scenario; ``t``: chain-length cap; ``m``: codebook size."""
    if axis == "alpha":
        return replace(base, train=replace(base.train, objective=replace(base.train.objective, alpha=float(value))))
    if axis == "k":
        k = int(value)
        return replace(base, world=replace(base.world, k=k, t=max(base.world.t, FRAMES_PER_EVENT * k)))
    if axis == "t":
        return replace(base, model=replace(base.model, l_max=int(value)))
    if axis == "m":
        return replace(base, model=replace(base.model, m=int(value)))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


@dataclass
class SweepRow:
    axis: str
    value: float
    status: str
    f1: float = float("nan")
    mean_len: float = float("nan")
    utility: float = float("nan")
    margin: float = float("nan")
    error: str = ""

    @property
    def metric(self) -> float:
        """Task metric: held-out edge-recovery F1."""
        return self.f1


SWEEP_HEADER = ("axis", "value", "status", "metric", "mean_len", "utility", "margin", "error")


def sweep(axis: str, grid: Sequence[float], base: ExperimentConfig,
          runner: Callable[[ExperimentConfig], object] | None = None) -> list[SweepRow]:
    """One train + held-out evaluation per grid value; failures are recorded and skipped."""
    if not grid:
        raise ValueError("empty sweep grid")
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    runner = runner or run_experiment
    rows = []
    for value in grid:
        try:
            res = runner(apply_axis(base, axis, value))
            rep = res.after
            rows.append(SweepRow(axis, value, "ok", rep.f1, rep.mean_length, rep.utility, rep.mean_mode_margin()))
        except Exception as exc:  # noqa: BLE001 - one bad setting must not end the sweep
            logger.warning("sweep %s=%r failed: %s", axis, value, exc)
            rows.append(SweepRow(axis, value, "failed", error=f"{type(exc).__name__}: {exc}"))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r.axis, repr(r.value), r.status, repr(r.metric), repr(r.mean_len), repr(r.utility),
                    repr(r.margin), r.error])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Event-density tiers
# --------------------------------------------------------------------------


@dataclass
class TierMetrics:
    tier: str
    n: int
    f1: float
    utility: float


def stratify(report: EvalReport) -> tuple[list[TierMetrics], list[str]]:
    """Per-tier metrics in sparse/medium/dense order; empty tiers are omitted and noted."""
    rows, notes = [], []
    for tier in DENSITY_TIERS:
        sel = [r for r in report.rows if r.density == tier]
        if not sel:
            notes.append(f"tier {tier!r} empty; omitted")
            continue
        rows.append(TierMetrics(tier, len(sel), float(np.mean([r.f1 for r in sel])),
                                float(np.mean([chain_utility(r.pred, r.logic) for r in sel]))))
    return rows, notes


def density_stratified_eval(model: Model, corpus: Sequence[Prepared], cfg: ObjectiveConfig = ObjectiveConfig(),
                            n_select: int = 5, seed: int = 0, chooser=None) -> tuple[list[TierMetrics], list[str]]:
    return stratify(evaluate(model, corpus, cfg, n_select, seed, chooser))


def truth_chooser(model: Model, p: Prepared, rng: SeededRng) -> tuple[Edge, ...]:
    """Stub selector returning the planted chain over found events."""
    return p.truth_local


def uniform_chooser(model: Model, p: Prepared, rng: SeededRng) -> tuple[Edge, ...]:
    """Policy ablation: uniformly random valid chain of uniform length in ``[1, l_max]``."""
    k, m = p.events.k, model.codebook.size
    if k < 2:
        return ()
    cands = [(a, b) for a in range(k) for b in range(k) if a != b]
    n = int(rng.integers(1, model.config.l_max + 1))
    picked: set[Edge] = set()
    while len(picked) < min(n, len(cands) * m):
        a, b = cands[int(rng.integers(0, len(cands)))]
        picked.add(Edge(a, int(rng.integers(0, m)), b))
    return tuple(sorted(picked))


# --------------------------------------------------------------------------
# Complexity accounting
# --------------------------------------------------------------------------


@dataclass
class ScanCost:
    t: int
    k: int
    pair_comparisons: int
    head_rows: int
    seconds: float


@dataclass
class ChainCost:
    length: int
    edge_evals: int
    head_rows: int
    seconds: float

    @property
    def ops(self) -> int:
        return self.edge_evals + self.head_rows


@dataclass
class ComplexityReport:
    scans: list[ScanCost]
    chains: list[ChainCost]


def full_scan(model: Model, events, counter: OpCounter) -> None:
    """Score every operator on every ordered event pair."""
    for op in range(model.codebook.size):
        out = pairwise_scan(events, model, op, counter)
        if not model.codebook.is_temporal(op):
            counter.head_rows += int(np.isfinite(out).sum())


def random_chain(k: int, length: int, m: int, rng: SeededRng) -> tuple[Edge, ...]:
    cands = [Edge(a, z, b) for a in range(k) for b in range(k) if a != b for z in range(m)]
    if length > len(cands):
        raise ValueError(f"no valid chain of length {length} over {k} events and {m} operators")
    return tuple(cands[int(i)] for i in rng.permutation(len(cands))[:length])


def complexity_audit(model: Model, event_sets: Sequence[tuple[int, EventArrays]],
                     chain_lengths: Sequence[int] = (2, 4, 8), seed: int = 0) -> ComplexityReport:
    """Instrumented counts for full pairwise scans and for chain scoring.

    ``event_sets`` pairs each event set with the frame count it came from;
    the verifier never sees frames, which is what the counts should show.
    """
    scans = []
    for t, events in event_sets:
        counter = OpCounter()
        t0 = time.perf_counter()
        full_scan(model, events, counter)
        scans.append(ScanCost(int(t), events.k, counter.pair_comparisons, counter.head_rows,
                              time.perf_counter() - t0))
    chains = []
    if event_sets:
        events = event_sets[0][1]
        rng = SeededRng(seed, (19,))
        for n in chain_lengths:
            chain = random_chain(events.k, n, model.codebook.size, rng.child(n))
            counter = OpCounter()
            t0 = time.perf_counter()
            score_chain(chain, events, model, counter)
            chains.append(ChainCost(n, counter.edge_evals, counter.head_rows, time.perf_counter() - t0))
    return ComplexityReport(scans, chains)


def collapse_trajectory(embedding_trajectory: Sequence[np.ndarray], codebook: OperatorCodebook,
                        eps: float = EPS_COLLAPSE) -> dict:
    """Summary used by the non-collapse check: min distance per epoch and the cause/prevent distance."""
    rep = identifiability_monitor(list(embedding_trajectory), eps)
    ci, pi = codebook.id("cause"), codebook.id("prevent")
    cp = rep.pair(ci, pi)
    return {"min_distance": rep.min_distance, "cause_prevent": cp, "flags": rep.flags,
            "never_collapsed": not rep.collapsed, "cause_prevent_grew": cp[-1] > cp[0]}


__all__ = [
    "ANTONYMS", "EPS_COLLAPSE", "INTERVENTION_MODES", "SWEEP_AXES", "SWEEP_HEADER",
    "ChainCost", "ComplexityReport", "IdentifiabilityReport", "InfluenceReport", "Intervention",
    "InterventionResult", "ScanCost", "SweepRow", "TierMetrics",
    "apply_axis", "collapse_trajectory", "complexity_audit", "density_stratified_eval", "distance_matrix",
    "full_scan", "identifiability_monitor", "influence_probe", "intervene_chain", "intervention_sweep",
    "min_pairwise", "random_chain", "stratify", "sweep", "sweep_csv", "truth_chooser", "uniform_chooser",
    "utility_of",
]
