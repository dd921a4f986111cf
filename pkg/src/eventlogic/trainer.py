"""Joint training: REINFORCE for the policy, direct gradients for the rest.

Per scenario and step the policy draws ``n_train`` chains; each chain's
auxiliary loss gives theta gradients directly and policy gradients through
``(L - b) * grad log pi`` with ``b`` the loss of the greedy chain.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .eventifier import Eventifier, Prototypes, align_events, calibrate_prototypes
from .events import Edge, EventArrays, edge_f1, event_arrays
from .generator import (
    SampledChain,
    greedy_chain,
    log_prob_grad,
    policy_grad_zeros,
    sample_and_select,
    sample_chain,
)
from .model import Model, ModelConfig
from .numeric import AdamState, Params, SeededRng, adam_step
from .objectives import AuxLossReport, ObjectiveConfig, aux_loss
from .verifier import score_chain
from .world import CF_MODES, NoStructuralNegative, GenerationError, Scenario, make_counterfactual

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_HEADER = ("step", "loss_total", "loss_pred", "loss_logic", "loss_cf", "loss_spar",
                  "mean_len", "mean_belief", "temperature")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    n_train: int = 5
    n_select: int = 5
    lr_policy: float = 1e-2
    lr_theta: float = 3e-3
    tau_start: float = 1.0
    tau_end: float = 0.1
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    cf_modes: tuple[str, ...] = CF_MODES
    cf_average: bool = False  # score every available negative instead of drawing one mode
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.n_train < 1 or self.n_select < 1:
            raise ValueError("epochs >= 0, batch_size, n_train and n_select >= 1 required")
        if self.lr_policy <= 0 or self.lr_theta <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 < self.tau_end <= self.tau_start <= 1.0):
            raise ValueError("temperature schedule must satisfy 0 < tau_end <= tau_start <= 1")
        for mode in self.cf_modes:
            if mode not in CF_MODES:
                raise ValueError(f"unknown counterfactual mode {mode!r}")
        if not self.cf_modes:
            raise ValueError("at least one counterfactual mode is required")

    def temperature(self, epoch: int) -> float:
        """Linear anneal from ``tau_start`` at epoch 0 to ``tau_end`` at the last epoch."""
        if self.epochs <= 1:
            return self.tau_start
        frac = min(max(epoch, 0), self.epochs - 1) / (self.epochs - 1)
        return self.tau_start + frac * (self.tau_end - self.tau_start)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cf_modes"] = list(self.cf_modes)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "objective" in data and isinstance(data["objective"], dict):
            data["objective"] = ObjectiveConfig(**data["objective"])
        if "cf_modes" in data:
            data["cf_modes"] = tuple(data["cf_modes"])
        return cls(**data)


# --------------------------------------------------------------------------
# Scenario preparation
# --------------------------------------------------------------------------


@dataclass
class Prepared:
    """A scenario lifted to events once, with its counterfactual negatives."""

    scenario: Scenario
    events: EventArrays
    alignment: list[int]
    horizon: float
    negatives: dict[str, EventArrays]
    truth_local: tuple[Edge, ...]

    @property
    def frames(self) -> np.ndarray:
        return self.scenario.frames

    def to_truth(self, chain: Sequence[Edge]) -> list:
        """Map a chain over found events into truth indices; unmatched endpoints stay distinct."""
        out = []
        for e in chain:
            a, b = self.alignment[e.a], self.alignment[e.b]
            out.append((a if a >= 0 else ("x", e.a), e.z, b if b >= 0 else ("x", e.b)))
        return out


def _label_matching(src: Scenario, dst: Scenario) -> dict[int, int]:
    """Pair each truth event of ``src`` with a distinct ``dst`` event, most shared label parts first."""
    pairs = sorted(
        ((-sum(x == y for x, y in zip(a.label, b.label)), i, j)
         for i, a in enumerate(src.events) for j, b in enumerate(dst.events)))
    out: dict[int, int] = {}
    taken: set[int] = set()
    for _, i, j in pairs:
        if i not in out and j not in taken:
            out[i] = j
            taken.add(j)
    return out


def _aligned_negative(found: EventArrays, alignment: list[int], scenario: Scenario, neg: Scenario,
                      eventifier: Eventifier, by_label: bool) -> EventArrays:
    """Events of ``V-`` indexed like the events found in ``V``.

    Counterfactual edits keep the event identities, so truth indices carry
    over.  A cross-video negative is a different scenario; its events are
    paired with ours by label so that the negative looks alike.  Events
    without a counterpart keep their ``V`` values.
    """
    neg_found = eventifier(neg.frames)
    neg_align = align_events(neg_found, neg.events)
    by_truth = {t: i for i, t in enumerate(neg_align) if t >= 0}
    mapping = _label_matching(scenario, neg) if by_label else None
    feats, starts, ends = found.features.copy(), found.starts.copy(), found.ends.copy()
    for i, t in enumerate(alignment):
        if t < 0:
            continue
        target = mapping.get(t) if mapping is not None else t
        j = by_truth.get(target) if target is not None else None
        if j is not None:
            ev = neg_found[j]
            feats[i], starts[i], ends[i] = ev.feature, ev.support.start, ev.support.end
    return EventArrays(feats, starts, ends)


def prepare(scenario: Scenario, eventifier: Eventifier, pool: Sequence[Scenario],
            modes: Sequence[str] = CF_MODES, cf_seed: int = 0) -> Prepared:
    found = eventifier(scenario.frames)
    alignment = align_events(found, scenario.events)
    arr = event_arrays(found) if found else EventArrays(np.zeros((0, scenario.config.d)), np.zeros(0), np.zeros(0))
    negatives = {}
    for mode in modes:
        try:
            neg = make_counterfactual(scenario, mode, cf_seed * 7919 + scenario.seed, pool=pool)
        except (NoStructuralNegative, GenerationError) as exc:
            logger.debug("no %s negative for scenario %d: %s", mode, scenario.seed, exc)
            continue
        negatives[mode] = _aligned_negative(arr, alignment, scenario, neg, eventifier, mode == "cross_video")
    inverse = {t: i for i, t in enumerate(alignment) if t >= 0}
    truth_local = tuple(Edge(inverse[e.a], e.z, inverse[e.b]) for e in scenario.truth_chain
                        if e.a in inverse and e.b in inverse)
    return Prepared(scenario, arr, alignment, float(scenario.config.t), negatives, truth_local)


def build_eventifier(calibration: Sequence[Scenario]) -> Eventifier:
    cfg = calibration[0].config
    protos = calibrate_prototypes([e for s in calibration for e in s.events])
    return Eventifier.for_noise(protos, cfg.noise, cfg.d)


def prepare_corpus(scenarios: Sequence[Scenario], eventifier: Eventifier,
                   modes: Sequence[str] = CF_MODES, cf_seed: int = 0) -> list[Prepared]:
    return [prepare(s, eventifier, scenarios, modes, cf_seed) for s in scenarios]


# --------------------------------------------------------------------------
# Policy gradient
# --------------------------------------------------------------------------


def reinforce_grad(model: Model, prepared_events, sampled: SampledChain, loss: float, baseline: float,
                   scale: float = 1.0, horizon: float = 1.0, into: Params | None = None) -> Params | None:
    """``scale * (loss - baseline) * grad log pi``; ``None`` (step skipped) on a non-finite reward."""
    adv = loss - baseline
    if not math.isfinite(adv):
        logger.warning("non-finite reward skipped (loss=%r, baseline=%r)", loss, baseline)
        return None
    return log_prob_grad(model, prepared_events, sampled, scale * adv, horizon, into)


def _aux(model: Model, p: Prepared, chain, cfg: ObjectiveConfig, mode, with_grads: bool,
         expected_length: float | None = None) -> AuxLossReport:
    """Auxiliary loss against one negative mode, or the mean over several."""
    if isinstance(mode, str):
        return aux_loss(chain, p.events, p.frames, p.negatives[mode], model, cfg, with_grads=with_grads,
                        expected_length=expected_length, validate=False)
    reps = [_aux(model, p, chain, cfg, m, with_grads, expected_length) for m in mode]
    avg = {f: float(np.mean([getattr(r, f) for r in reps]))
           for f in ("pred", "logic", "cf", "spar", "total", "belief", "neg_logic")}
    out = AuxLossReport(**avg)
    if with_grads:
        out.grads = {k: sum(r.grads[k] for r in reps) / len(reps) for k in reps[0].grads}
    return out


def self_critical_baseline(model: Model, p: Prepared, cfg: ObjectiveConfig, mode: str) -> tuple[float, SampledChain]:
    greedy = greedy_chain(model, p.events, p.horizon)
    return _aux(model, p, greedy.chain, cfg, mode, with_grads=False,
                expected_length=greedy.expected_length_proxy).total, greedy


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class Optimizers:
    policy: AdamState
    theta: AdamState

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "Optimizers":
        return cls(AdamState(lr=cfg.lr_policy), AdamState(lr=cfg.lr_theta))


@dataclass
class StepMetrics:
    step: int
    loss_total: float
    loss_pred: float
    loss_logic: float
    loss_cf: float
    loss_spar: float
    mean_len: float
    mean_belief: float
    temperature: float
    selected_logic: float = float("nan")
    skipped: int = 0

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


def train_step(batch: Sequence[Prepared], model: Model, opt: Optimizers, cfg: TrainConfig,
               rng: SeededRng, temperature: float, step: int = 0) -> tuple[Model, Optimizers, StepMetrics]:
    """One optimisation step over a batch; returns the updated model and optimisers."""
    if not batch:
        raise ValueError("empty batch")
    ocfg = cfg.objective
    theta_keys = model.group("theta")
    g_theta = {k: np.zeros_like(model.params[k]) for k in theta_keys}
    g_policy = policy_grad_zeros(model)
    sums = np.zeros(7)
    n_chains = 0
    selected_logic = []
    skipped = 0
    used = [p for p in batch if p.negatives]
    skipped += len(batch) - len(used)
    denom = max(len(used), 1) * cfg.n_train
    for j, p in enumerate(used):
        srng = rng.child(j)
        try:
            modes = [m for m in cfg.cf_modes if m in p.negatives]
            if not modes:
                raise LookupError("no counterfactual available for configured modes")
            drawn = modes[int(srng.integers(0, len(modes)))]
            mode = modes if cfg.cf_average else drawn
            baseline, _ = self_critical_baseline(model, p, ocfg, mode)
            local_theta = {k: np.zeros_like(v) for k, v in g_theta.items()}
            local_policy = {k: np.zeros_like(v) for k, v in g_policy.items()}
            rows = []
            for i in range(cfg.n_train):
                s = sample_chain(model, p.events, srng.child(1, i), temperature, hard=False, horizon=p.horizon)
                rep = _aux(model, p, s.chain, ocfg, mode, with_grads=True, expected_length=s.expected_length_proxy)
                for k, g in rep.grads.items():
                    local_theta[k] += g / denom
                reinforce_grad(model, p.events, s, rep.total, baseline, 1.0 / denom, p.horizon, local_policy)
                rows.append((rep, len(s.chain)))
        except Exception as exc:  # noqa: BLE001 - isolate degenerate scenarios
            logger.warning("scenario %d skipped [%s]: %s", p.scenario.seed, type(exc).__name__, exc)
            skipped += 1
            continue
        for k, g in local_theta.items():
            g_theta[k] += g
        for k, g in local_policy.items():
            g_policy[k] += g
        for rep, n in rows:
            sums += [rep.total, rep.pred, rep.logic, rep.cf, rep.spar, n, rep.belief]
            n_chains += 1
        best = min(range(len(rows)), key=lambda i: (rows[i][0].total, rows[i][1], i))
        selected_logic.append(rows[best][0].logic)
    g_theta["codebook.emb"] = g_theta["codebook.emb"] + g_policy.pop("codebook.emb")
    params, st_p, _ = adam_step(opt.policy, model.params, g_policy)
    params, st_t, _ = adam_step(opt.theta, params, g_theta)
    new_model = Model(model.config, params, model.prototypes, model.meta)
    means = sums / max(n_chains, 1)
    metrics = StepMetrics(step, *means.tolist(), temperature,
                          float(np.mean(selected_logic)) if selected_logic else float("nan"), skipped)
    return new_model, Optimizers(st_p, st_t), metrics


@dataclass
class TrainResult:
    model: Model
    optimizers: Optimizers
    history: list[StepMetrics]
    embedding_trajectory: list[np.ndarray]
    epochs_done: int

    def metrics_csv(self) -> str:
        return metrics_csv(self.history)


def metrics_csv(history: Sequence[StepMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in history:
        w.writerow(m.row())
    return buf.getvalue()


def train(model: Model, corpus: Sequence[Prepared], cfg: TrainConfig, *,
          metrics_path: str | os.PathLike | None = None,
          checkpoint_dir: str | os.PathLike | None = None,
          optimizers: Optimizers | None = None, start_epoch: int = 0,
          on_epoch: Callable[[int, Model], None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of shuffled mini-batches.

    Randomness is keyed on ``(seed, epoch, batch)`` so a run resumed from a
    checkpoint continues the same streams.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    opt = optimizers or Optimizers.fresh(cfg)
    master = SeededRng(cfg.seed, (11,))
    history: list[StepMetrics] = []
    traj = [model.params["codebook.emb"].copy()]
    step = start_epoch * math.ceil(len(corpus) / cfg.batch_size)
    if metrics_path is not None:
        Path(metrics_path).write_text(",".join(METRICS_HEADER) + "\n")
    for epoch in range(start_epoch, cfg.epochs):
        tau = cfg.temperature(epoch)
        order = master.child(epoch, 0).permutation(len(corpus))
        for bi in range(0, len(corpus), cfg.batch_size):
            batch = [corpus[int(i)] for i in order[bi:bi + cfg.batch_size]]
            model, opt, m = train_step(batch, model, opt, cfg, master.child(epoch, 1, bi), tau, step)
            history.append(m)
            if metrics_path is not None:
                with open(metrics_path, "a") as fh:
                    fh.write(",".join(m.row()) + "\n")
            step += 1
        traj.append(model.params["codebook.emb"].copy())
        if on_epoch is not None:
            on_epoch(epoch, model)
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch{epoch + 1:03d}.json", opt, epoch + 1, cfg)
    return TrainResult(model, opt, history, traj, cfg.epochs)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def mean_mode_aux(model: Model, p: Prepared, chain, cfg: ObjectiveConfig) -> AuxLossReport:
    """Auxiliary loss averaged over the scenario's available negatives."""
    if not p.negatives:
        raise LookupError("scenario has no counterfactual negatives")
    return _aux(model, p, chain, cfg, sorted(p.negatives), with_grads=False)


def select_chain(model: Model, p: Prepared, cfg: ObjectiveConfig, n: int, rng: SeededRng):
    return sample_and_select(model, p.events, lambda s: mean_mode_aux(model, p, s.chain, cfg),
                             n, rng, p.horizon)


def semantic_only(chain, codebook) -> list:
    return [e for e in chain if not codebook.is_temporal(e[1])]


def chain_utility(pred: float, logic: float) -> float:
    """Downstream utility in (0, 1]: ``exp(-(L_pred + L_logic))``."""
    return math.exp(-(pred + logic))


@dataclass
class ScenarioEval:
    seed: int
    density: str
    f1: float
    semantic_f1: float
    length: int
    belief: float
    logic: float
    pred: float
    margins: dict[str, float]
    chain: tuple[Edge, ...]


@dataclass
class EvalReport:
    rows: list[ScenarioEval]

    def _mean(self, f) -> float:
        vals = [f(r) for r in self.rows]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def f1(self) -> float:
        return self._mean(lambda r: r.f1)

    @property
    def semantic_f1(self) -> float:
        return self._mean(lambda r: r.semantic_f1)

    @property
    def mean_length(self) -> float:
        return self._mean(lambda r: r.length)

    @property
    def belief(self) -> float:
        return self._mean(lambda r: r.belief)

    @property
    def utility(self) -> float:
        return self._mean(lambda r: chain_utility(r.pred, r.logic))

    def margin(self, mode: str | None = None) -> float:
        vals = [v for r in self.rows for m, v in r.margins.items() if mode is None or m == mode]
        return float(np.mean(vals)) if vals else float("nan")

    def mode_margins(self) -> dict[str, float]:
        modes = sorted({m for r in self.rows for m in r.margins})
        return {m: self.margin(m) for m in modes}

    def summary(self) -> dict:
        return {"n": len(self.rows), "f1": self.f1, "semantic_f1": self.semantic_f1,
                "mean_len": self.mean_length, "belief": self.belief, "utility": self.utility,
                "margin": self.mean_mode_margin(), "mode_margins": self.mode_margins()}

    def mean_mode_margin(self) -> float:
        mm = list(self.mode_margins().values())
        return float(np.mean(mm)) if mm else float("nan")


def truth_margins(model: Model, p: Prepared) -> dict[str, float]:
    """``L_logic(truth; V-) - L_logic(truth; V)`` per negative mode."""
    if not p.truth_local:
        return {}
    pos = score_chain(p.truth_local, p.events, model, validate=False).loss
    return {m: score_chain(p.truth_local, neg, model, validate=False).loss - pos for m, neg in p.negatives.items()}


def evaluate(model: Model, corpus: Sequence[Prepared], cfg: ObjectiveConfig, n_select: int = 5,
             seed: int = 0, chooser: Callable | None = None) -> EvalReport:
    """Sample-and-verify selection per scenario, scored against the planted truth.

    ``chooser(model, prepared, rng)`` may replace the selection (stubs, ablations).
    """
    rng = SeededRng(seed, (13,))
    cb = model.codebook
    rows = []
    for i, p in enumerate(corpus):
        if not p.negatives:
            continue
        if chooser is None:
            chain = select_chain(model, p, cfg, n_select, rng.child(i)).chain
        else:
            chain = tuple(Edge(*e) for e in chooser(model, p, rng.child(i)))
        rep = mean_mode_aux(model, p, chain, cfg)
        pred_t = p.to_truth(chain)
        truth = [tuple(e) for e in p.scenario.truth_chain]
        _, _, f1 = edge_f1(pred_t, truth)
        _, _, sf1 = edge_f1(semantic_only(pred_t, cb), semantic_only(truth, cb))
        rows.append(ScenarioEval(p.scenario.seed, p.scenario.density, f1, sf1, len(chain), rep.belief,
                                 rep.logic, rep.pred, truth_margins(model, p), chain))
    return EvalReport(rows)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def _pack(arrs: Params) -> dict:
    return {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in sorted(arrs.items())}


def _unpack(data: dict) -> Params:
    out = {}
    for k, v in data.items():
        arr = np.array(v["data"], dtype=np.float64)
        shape = tuple(v["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"tensor {k!r}: {arr.size} values for shape {shape}")
        out[k] = arr.reshape(shape)
    return out


def _adam_dict(st: AdamState) -> dict:
    return {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step,
            "refused": st.refused, "m": _pack(st.m), "v": _pack(st.v)}


def _adam_from(d: dict) -> AdamState:
    return AdamState(d["lr"], d["beta1"], d["beta2"], d["eps"], d["step"], _unpack(d["m"]), _unpack(d["v"]),
                     d["refused"])


def checkpoint_dict(model: Model, opt: Optimizers | None = None, epoch: int = 0,
                    cfg: TrainConfig | None = None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config": {"model": model.config.to_dict(), "train": cfg.to_dict() if cfg else None},
        "tensors": _pack(model.params),
        "adam": None if opt is None else {"policy": _adam_dict(opt.policy), "theta": _adam_dict(opt.theta)},
        "rng_cursor": {"seed": cfg.seed if cfg else None, "epoch": epoch},
        "prototypes": model.prototypes.to_dict() if model.prototypes else None,
        "meta": model.meta,
    }


def save_checkpoint(model: Model, path, opt: Optimizers | None = None, epoch: int = 0,
                    cfg: TrainConfig | None = None) -> None:
    text = json.dumps(checkpoint_dict(model, opt, epoch, cfg), sort_keys=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@dataclass
class LoadedCheckpoint:
    model: Model
    optimizers: Optimizers | None
    epoch: int
    train_config: TrainConfig | None


def load_checkpoint(path) -> LoadedCheckpoint:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data.get('version') if isinstance(data, dict) else None!r}")
    try:
        mcfg = ModelConfig.from_dict(data["config"]["model"])
        params = _unpack(data["tensors"])
        adam = data["adam"]
        opt = None if adam is None else Optimizers(_adam_from(adam["policy"]), _adam_from(adam["theta"]))
        tcfg = None if data["config"]["train"] is None else TrainConfig.from_dict(data["config"]["train"])
        protos = None if data["prototypes"] is None else Prototypes.from_dict(data["prototypes"])
        model = Model(mcfg, params, protos, data.get("meta") or {})
        return LoadedCheckpoint(model, opt, int(data["epoch"]), tcfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc


def with_objective(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, objective=replace(cfg.objective, **changes))
