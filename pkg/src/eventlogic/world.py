"""Synthetic event-stream world with planted causal structure.

A scenario is a short "video": ``K`` events laid out on a frame axis, a
random DAG of semantic relations between them, and a frame stream rendered
from the event features.  Features are split into a label block (one-hot
premise/action/object codes) and a relation block.  Every planted semantic
edge ``(a, z, b)`` adds ``beta * W_z @ base(a)`` to the relation block of
``b``, with ``W_z`` a fixed random matrix per relation type, so the
relations are statistically distinguishable from features alone.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .events import (
    SEMANTIC_OPS,
    Edge,
    Event,
    EventLabel,
    OperatorCodebook,
    TemporalSupport,
    canonicalize_chain,
    jaccard,
    multiset_jaccard,
    require_valid,
)
from .numeric import SeededRng

logger = logging.getLogger(__name__)

#: Operator ids used by the world; any codebook with the default named
#: operators first shares them.
WORLD_CODEBOOK = OperatorCodebook(size=6)
BEFORE = WORLD_CODEBOOK.id("before")
CAUSE = WORLD_CODEBOOK.id("cause")

DENSITY_TIERS = ("sparse", "medium", "dense")
CF_MODES = ("temporal", "feature_swap", "cross_video")


class GenerationError(ValueError):
    pass


class NoStructuralNegative(LookupError):
    """No pool scenario satisfies the cross-video similarity constraints."""


@dataclass(frozen=True)
class WorldConfig:
    k: int = 8
    t: int = 64
    d: int = 16
    vocab: tuple[int, int, int] = (3, 3, 3)
    n_semantic: tuple[int, int] = (1, 3)
    relations: tuple[str, ...] = SEMANTIC_OPS
    beta: float = 1.0
    noise: float = 0.1
    feature_jitter: float = 0.1
    event_len: tuple[int, int] = (3, 6)
    min_gap: int = 2
    overlap_prob: float = 0.0
    delta_vis: float = 0.2
    delta_logic: float = 0.2
    world_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(int(v) for v in self.vocab))
        object.__setattr__(self, "n_semantic", tuple(int(v) for v in self.n_semantic))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "event_len", tuple(int(v) for v in self.event_len))
        self.validate()

    @property
    def n_label(self) -> int:
        return sum(self.vocab)

    def validate(self) -> None:
        problems = []
        if self.k < 2:
            problems.append("k must be >= 2")
        if self.t < self.k:
            problems.append("t must be >= k")
        if self.beta < 0:
            problems.append("beta must be >= 0")
        if self.noise < 0 or self.feature_jitter < 0:
            problems.append("noise scales must be >= 0")
        if not 0 <= self.delta_logic <= self.delta_vis <= 1:
            problems.append("need 0 <= delta_logic <= delta_vis <= 1")
        if self.d <= self.n_label:
            problems.append(f"feature width d={self.d} must exceed label block {self.n_label}")
        if min(self.vocab) < 1:
            problems.append("vocabulary sizes must be positive")
        lo, hi = self.n_semantic
        if not 0 <= lo <= hi:
            problems.append("n_semantic must be an ordered non-negative range")
        if not 1 <= self.event_len[0] <= self.event_len[1]:
            problems.append("event_len must be an ordered positive range")
        for r in self.relations:
            if r not in SEMANTIC_OPS:
                problems.append(f"unknown relation {r!r}")
        if problems:
            raise ValueError("invalid WorldConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown WorldConfig fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(frozen=True, eq=False)
class Scenario:
    config: WorldConfig
    seed: int
    events: tuple[Event, ...]
    frames: np.ndarray
    truth_chain: tuple[Edge, ...]
    density: str
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.events)

    def semantic_edges(self) -> list[Edge]:
        return [e for e in self.truth_chain if not WORLD_CODEBOOK.is_temporal(e.z)]


# --------------------------------------------------------------------------
# Feature construction
# --------------------------------------------------------------------------


def label_base(label: EventLabel, config: WorldConfig) -> np.ndarray:
    """One-hot label block padded with zeros over the relation block."""
    v = np.zeros(config.d)
    n_p, n_a, _ = config.vocab
    v[label.p] = 1.0
    v[n_p + label.a] = 1.0
    v[n_p + n_a + label.o] = 1.0
    return v


def relation_matrices(config: WorldConfig) -> dict[int, np.ndarray]:
    """Fixed per-relation coupling matrices, (d, d) acting on label blocks."""
    rng = SeededRng(config.world_seed, (0xC0DE,))
    n_label = config.n_label
    d_rel = config.d - n_label
    mats = {}
    for name in SEMANTIC_OPS:
        block = rng.normal((d_rel, n_label)) / np.sqrt(d_rel)
        full = np.zeros((config.d, config.d))
        full[n_label:, :n_label] = block
        mats[WORLD_CODEBOOK.id(name)] = full
    return mats


def density_tier(n_semantic: int) -> str:
    if n_semantic <= 3:
        return "sparse"
    if n_semantic <= 6:
        return "medium"
    return "dense"


def _sample_supports(config: WorldConfig, rng: SeededRng) -> list[TemporalSupport]:
    k, lo, hi = config.k, config.event_len[0], config.event_len[1]
    if k * lo + (k - 1) * config.min_gap > config.t and config.overlap_prob == 0:
        raise GenerationError(
            f"cannot place {k} events of length >= {lo} with gaps >= {config.min_gap} in {config.t} frames"
        )
    if k * lo > config.t:
        raise GenerationError(f"cannot place {k} events of length >= {lo} in {config.t} frames")
    lengths = [int(x) for x in rng.integers(lo, hi + 1, size=k)]
    overlapped = [False] + [bool(rng.uniform() < config.overlap_prob) for _ in range(k - 1)]
    gaps = [0 if o else config.min_gap for o in overlapped[1:]]

    def span() -> int:
        total = sum(lengths)
        for j in range(1, k):
            total += gaps[j - 1] if not overlapped[j] else -(min(lengths[j - 1], lengths[j]) // 2)
        return total

    while span() > config.t:
        j = int(np.argmax(lengths))
        if lengths[j] <= lo:
            raise GenerationError("event supports do not fit in the stream")
        lengths[j] -= 1
    slack = config.t - span()
    shares = rng.integers(0, k + 1, size=slack) if slack > 0 else np.zeros(0, dtype=int)
    extra = np.bincount(shares, minlength=k + 1)
    supports, cursor = [], int(extra[0])
    for j in range(k):
        if j > 0:
            if overlapped[j]:
                cursor -= min(lengths[j - 1], lengths[j]) // 2
            else:
                cursor += gaps[j - 1] + int(extra[j])
        supports.append(TemporalSupport(float(cursor), float(cursor + lengths[j])))
        cursor += lengths[j]
    return supports


def generate_scenario(config: WorldConfig, seed: int) -> Scenario:
    """Pure function of ``(config, seed)``."""
    rng = SeededRng(seed, (1,))
    supports = _sample_supports(config, rng)
    k = config.k
    labels = [
        EventLabel(int(rng.integers(0, config.vocab[0])), int(rng.integers(0, config.vocab[1])),
                   int(rng.integers(0, config.vocab[2])))
        for _ in range(k)
    ]
    candidates = [(a, b) for a in range(k) for b in range(a + 1, k) if supports[a].end < supports[b].start]
    lo, hi = config.n_semantic
    n_sem = min(int(rng.integers(lo, hi + 1)), len(candidates))
    if n_sem and not config.relations:
        raise GenerationError("semantic edges requested but no relation types configured")
    picked = sorted(int(i) for i in rng.permutation(len(candidates))[:n_sem])
    semantic = [
        Edge(candidates[i][0], WORLD_CODEBOOK.id(config.relations[int(rng.integers(0, len(config.relations)))]),
             candidates[i][1])
        for i in picked
    ]
    mats = relation_matrices(config)
    bases = [label_base(lab, config) for lab in labels]
    rel_mask = np.zeros(config.d)
    rel_mask[config.n_label:] = 1.0
    features = [b + config.feature_jitter * rng.normal(config.d) * rel_mask for b in bases]
    for e in semantic:
        features[e.b] = features[e.b] + config.beta * (mats[e.z] @ bases[e.a])
    events = tuple(Event(labels[j], features[j], supports[j], j) for j in range(k))
    truth = canonicalize_chain(semantic + [Edge(e.a, BEFORE, e.b) for e in semantic])
    require_valid(truth, k, WORLD_CODEBOOK)
    frames = render_frames(events, config, seed)
    return Scenario(config, seed, events, frames, truth, density_tier(len(semantic)))


def generate_corpus(config: WorldConfig, n: int, seed: int) -> list[Scenario]:
    """``n`` scenarios with per-scenario seeds ``seed * 100003 + i``."""
    return [generate_scenario(config, seed * 100003 + i) for i in range(n)]


def render_frames(events: Sequence[Event], config: WorldConfig, seed: int) -> np.ndarray:
    """Frame ``t`` = sum of features of events active at ``t`` + Gaussian noise."""
    frames = SeededRng(seed, (2,)).normal((config.t, config.d)) * config.noise
    for e in events:
        e.support.check(config.t)
        s, t_end = int(np.ceil(e.support.start)), int(np.ceil(e.support.end))
        frames[s:t_end] += e.feature
    return frames


# --------------------------------------------------------------------------
# Counterfactuals
# --------------------------------------------------------------------------


def _pick_pair(scenario: Scenario, rng: SeededRng, prefer_cause: bool) -> Edge:
    semantic = scenario.semantic_edges()
    if not semantic:
        raise GenerationError("scenario has no semantic edge to perturb")
    pool = [e for e in semantic if e.z == CAUSE] if prefer_cause else []
    pool = pool or semantic
    return pool[int(rng.integers(0, len(pool)))]


def make_counterfactual(scenario: Scenario, mode: str, seed: int,
                        pool: Sequence[Scenario] | None = None) -> Scenario:
    """Structural negative ``V-`` for ``scenario``.

    ``temporal`` swaps the supports of one planted (preferably ``cause``) pair,
    ``feature_swap`` swaps the features of one planted pair, and
    ``cross_video`` retrieves a pool scenario with similar labels but a
    different truth chain.  The first two keep the truth chain of the source
    (it is the claim being contradicted) and re-render frames with the
    source's noise seed.
    """
    rng = SeededRng(seed, (3,))
    if mode == "temporal":
        pair = _pick_pair(scenario, rng, prefer_cause=True)
        events = list(scenario.events)
        ea, eb = events[pair.a], events[pair.b]
        events[pair.a] = ea.replace(support=eb.support)
        events[pair.b] = eb.replace(support=ea.support)
    elif mode == "feature_swap":
        pair = _pick_pair(scenario, rng, prefer_cause=False)
        events = list(scenario.events)
        ea, eb = events[pair.a], events[pair.b]
        events[pair.a] = ea.replace(feature=eb.feature)
        events[pair.b] = eb.replace(feature=ea.feature)
    elif mode == "cross_video":
        return structural_negative(scenario, pool or (), rng)
    else:
        raise ValueError(f"unknown counterfactual mode {mode!r}")
    events = tuple(events)
    frames = render_frames(events, scenario.config, scenario.seed)
    meta = dict(scenario.meta, counterfactual=mode, pair=[pair.a, pair.b])
    return replace(scenario, events=events, frames=frames, meta=meta)


def visual_similarity(a: Scenario, b: Scenario) -> float:
    return multiset_jaccard([e.label for e in a.events], [e.label for e in b.events])


def logic_similarity(a: Scenario, b: Scenario) -> float:
    return jaccard(a.truth_chain, b.truth_chain)


def structural_negative(scenario: Scenario, pool: Iterable[Scenario], rng: SeededRng) -> Scenario:
    cfg = scenario.config
    matches = [
        s for s in pool
        if s is not scenario and s.k == scenario.k
        and visual_similarity(scenario, s) >= cfg.delta_vis
        and logic_similarity(scenario, s) <= cfg.delta_logic
    ]
    if not matches:
        raise NoStructuralNegative(
            f"no structural negative found for scenario seed {scenario.seed} "
            f"(delta_vis={cfg.delta_vis}, delta_logic={cfg.delta_logic})"
        )
    chosen = matches[int(rng.integers(0, len(matches)))]
    return replace(chosen, meta=dict(chosen.meta, counterfactual="cross_video", source_seed=scenario.seed))


# --------------------------------------------------------------------------
# Corpus files
# --------------------------------------------------------------------------


def scenario_to_json(s: Scenario, with_frames: bool = False) -> dict:
    out = {
        "seed": s.seed,
        "config": s.config.to_dict(),
        "events": [
            {"label": list(e.label), "feature": e.feature.tolist(), "support": [e.support.start, e.support.end]}
            for e in s.events
        ],
        "truth_chain": [[e.a, WORLD_CODEBOOK.name(e.z), e.b] for e in s.truth_chain],
        "density": s.density,
    }
    if s.meta:
        out["meta"] = s.meta
    if with_frames:
        out["frames"] = s.frames.tolist()
    return out


def scenario_from_json(data: dict) -> Scenario:
    config = WorldConfig.from_dict(data["config"])
    events = tuple(
        Event(EventLabel(*ev["label"]), np.array(ev["feature"]), TemporalSupport(*ev["support"]), j)
        for j, ev in enumerate(data["events"])
    )
    truth = tuple(Edge(a, WORLD_CODEBOOK.id(op), b) for a, op, b in data["truth_chain"])
    require_valid(truth, len(events), WORLD_CODEBOOK)
    frames = np.array(data["frames"]) if "frames" in data else render_frames(events, config, data["seed"])
    return Scenario(config, int(data["seed"]), events, frames, truth, data["density"], data.get("meta", {}))


def write_corpus(path, scenarios: Iterable[Scenario]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(json.dumps(scenario_to_json(s), sort_keys=True) + "\n")


def read_corpus(path) -> list[Scenario]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(scenario_from_json(json.loads(line)))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad scenario record ({exc})") from exc
    return out
