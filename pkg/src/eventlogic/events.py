"""Symbolic data model: grounded events, operator codebook, reasoning chains."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

TEMPORAL_OPS = ("before", "after", "meets")
SEMANTIC_OPS = ("cause", "enable", "prevent")


class EventLabel(NamedTuple):
    """Premise / action / object indices into fixed vocabularies."""

    p: int
    a: int
    o: int

    def check(self, vocab: tuple[int, int, int]) -> None:
        for value, size, name in zip(self, vocab, "PAO"):
            if not 0 <= value < size:
                raise ValueError(f"label component {name}={value} outside vocabulary of size {size}")


@dataclass(frozen=True)
class TemporalSupport:
    """Half-open frame interval ``[start, end)``; real valued."""

    start: float
    end: float

    def __post_init__(self):
        if not self.start <= self.end:
            raise ValueError(f"support start {self.start} after end {self.end}")

    def check(self, horizon: float) -> None:
        if self.start < 0 or self.end > horizon:
            raise ValueError(f"support [{self.start}, {self.end}] outside [0, {horizon}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    def overlap(self, other: "TemporalSupport") -> float:
        return max(0.0, min(self.end, other.end) - max(self.start, other.start))

    def iou(self, other: "TemporalSupport") -> float:
        inter = self.overlap(other)
        union = self.length + other.length - inter
        return inter / union if union > 0 else 0.0


@dataclass(frozen=True, eq=False)
class Event:
    label: EventLabel
    feature: np.ndarray
    support: TemporalSupport
    index: int = 0

    def __post_init__(self):
        feat = np.array(self.feature, dtype=np.float64)
        if feat.ndim != 1 or not np.all(np.isfinite(feat)):
            raise ValueError("event feature must be a finite vector")
        feat.setflags(write=False)
        object.__setattr__(self, "feature", feat)
        object.__setattr__(self, "label", EventLabel(*self.label))

    def replace(self, **changes) -> "Event":
        fields = {"label": self.label, "feature": self.feature, "support": self.support, "index": self.index}
        fields.update(changes)
        return Event(**fields)

    def __eq__(self, other):
        if not isinstance(other, Event):
            return NotImplemented
        return (self.label == other.label and self.support == other.support
                and self.index == other.index and np.array_equal(self.feature, other.feature))

    __hash__ = None


class EventArrays(NamedTuple):
    """Column view of an event list used by the numeric code."""

    features: np.ndarray  # (K, d)
    starts: np.ndarray    # (K,)
    ends: np.ndarray      # (K,)

    @property
    def k(self) -> int:
        return self.features.shape[0]


def event_arrays(events: Sequence[Event]) -> EventArrays:
    if not events:
        return EventArrays(np.zeros((0, 0)), np.zeros(0), np.zeros(0))
    return EventArrays(
        np.stack([e.feature for e in events]),
        np.array([e.support.start for e in events], dtype=np.float64),
        np.array([e.support.end for e in events], dtype=np.float64),
    )


# --------------------------------------------------------------------------
# Operator codebook
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OperatorCodebook:
    """Operator inventory ``Z = Z_T ∪ Z_S``.

    Temporal operators come first, then the named semantic operators, then
    inert padding operators.  Padding operators are routed to the learned
    semantic scorer; they have no planted ground truth.  The learnable
    embeddings live in the model parameters under ``codebook.emb`` with one
    row per operator id.
    """

    temporal: tuple[str, ...] = TEMPORAL_OPS
    semantic: tuple[str, ...] = SEMANTIC_OPS
    size: int = 32

    def __post_init__(self):
        if set(self.temporal) & set(self.semantic):
            raise ValueError("temporal and semantic operator sets overlap")
        if self.size < len(self.temporal) + len(self.semantic):
            raise ValueError(f"codebook size {self.size} smaller than the named operators")

    @property
    def names(self) -> tuple[str, ...]:
        n_pad = self.size - len(self.temporal) - len(self.semantic)
        return self.temporal + self.semantic + tuple(f"pad{i}" for i in range(n_pad))

    @property
    def n_temporal(self) -> int:
        return len(self.temporal)

    def id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown operator {name!r}") from None

    def name(self, op_id: int) -> str:
        return self.names[op_id]

    def is_temporal(self, op_id: int) -> bool:
        return 0 <= op_id < self.n_temporal

    def semantic_ids(self) -> list[int]:
        return list(range(self.n_temporal, self.size))


# --------------------------------------------------------------------------
# Reasoning chains
# --------------------------------------------------------------------------


class Edge(NamedTuple):
    a: int
    z: int
    b: int


ReasoningChain = tuple  # tuple[Edge, ...]


def make_chain(edges: Iterable) -> tuple[Edge, ...]:
    return tuple(Edge(*e) for e in edges)


@dataclass(frozen=True)
class Violation:
    position: int
    kind: str  # "self_loop" | "event_range" | "operator_range" | "duplicate"
    detail: str


def validate_chain(chain: Sequence, k: int, codebook: OperatorCodebook) -> list[Violation]:
    """Every violated chain invariant, with edge position; empty list = ok."""
    found: list[Violation] = []
    seen: set[Edge] = set()
    for pos, raw in enumerate(chain):
        e = Edge(*raw)
        for end in (e.a, e.b):
            if not 0 <= end < k:
                found.append(Violation(pos, "event_range", f"event index {end} not in [0, {k})"))
        if not 0 <= e.z < codebook.size:
            found.append(Violation(pos, "operator_range", f"operator id {e.z} not in [0, {codebook.size})"))
        if e.a == e.b:
            found.append(Violation(pos, "self_loop", f"edge ({e.a}, {e.z}, {e.b}) is a self-loop"))
        if e in seen:
            found.append(Violation(pos, "duplicate", f"edge ({e.a}, {e.z}, {e.b}) repeated"))
        seen.add(e)
    return found


class InvalidChainError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(f"#{v.position} {v.kind}: {v.detail}" for v in violations))


def require_valid(chain: Sequence, k: int, codebook: OperatorCodebook) -> None:
    problems = validate_chain(chain, k, codebook)
    if problems:
        raise InvalidChainError(problems)


def canonicalize_chain(chain: Sequence) -> tuple[Edge, ...]:
    """Sort by (a, b, operator id) and drop duplicate edges."""
    return tuple(sorted({Edge(*e) for e in chain}, key=lambda e: (e.a, e.b, e.z)))


def chain_to_text(chain: Sequence, codebook: OperatorCodebook) -> str:
    return "\n".join(f"{e.a} --{codebook.name(e.z)}--> {e.b}" for e in map(lambda x: Edge(*x), chain))


def chain_from_text(text: str, codebook: OperatorCodebook) -> tuple[Edge, ...]:
    edges = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        left, rest = line.split(" --", 1)
        op, right = rest.split("--> ", 1)
        edges.append(Edge(int(left), codebook.id(op), int(right)))
    return tuple(edges)


def edge_f1(predicted: Iterable, truth: Iterable) -> tuple[float, float, float]:
    """Precision, recall and F1 of two edge sets (both empty -> perfect)."""
    p, t = set(map(tuple, predicted)), set(map(tuple, truth))
    if not p and not t:
        return 1.0, 1.0, 1.0
    hit = len(p & t)
    precision = hit / len(p) if p else 0.0
    recall = hit / len(t) if t else 0.0
    f1 = 2 * precision * recall / (precision + recall) if hit else 0.0
    return precision, recall, f1


def jaccard(a: Iterable, b: Iterable) -> float:
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def multiset_jaccard(a: Iterable, b: Iterable) -> float:
    from collections import Counter

    ca, cb = Counter(a), Counter(b)
    inter = sum((ca & cb).values())
    union = sum((ca | cb).values())
    return inter / union if union else 1.0
