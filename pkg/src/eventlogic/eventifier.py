"""Proposal-then-classify lifting of a frame stream into grounded events.

Proposals come from L2 change-point thresholding on consecutive frames;
each segment is mean-pooled and labelled per vocabulary bank (premise,
action, object) by cosine similarity to class prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .events import Event, EventLabel, TemporalSupport


@dataclass(frozen=True)
class Segmentation:
    boundaries: tuple[int, ...]
    segments: tuple[tuple[int, int], ...]


@dataclass
class Prototypes:
    """Per-bank class means; ``banks[i][label]`` is a feature vector.

    Labels never observed in calibration are absent and are never predicted.
    """

    banks: tuple[dict[int, np.ndarray], dict[int, np.ndarray], dict[int, np.ndarray]]

    def to_dict(self) -> dict:
        return {"banks": [{str(k): v.tolist() for k, v in sorted(bank.items())} for bank in self.banks]}

    @classmethod
    def from_dict(cls, data: dict) -> "Prototypes":
        return cls(tuple({int(k): np.array(v) for k, v in bank.items()} for bank in data["banks"]))


@dataclass
class EventifyStats:
    comparisons: int = 0


def default_threshold(noise: float, d: int) -> float:
    return 3.0 * noise * np.sqrt(d) + 0.1


def segment_stream(frames: np.ndarray, threshold: float, min_len: int = 2) -> Segmentation:
    """Split wherever ``||S[t+1] - S[t]|| > threshold``; merge short segments forward."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    if n == 0:
        return Segmentation((), ())
    jumps = np.linalg.norm(np.diff(frames, axis=0), axis=1)
    cuts = [0] + [t + 1 for t in np.flatnonzero(jumps > threshold)] + [n]
    segments = [(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)]
    merged: list[list[int]] = []
    pending: list[int] | None = None
    for s, e in segments:
        if pending is not None:
            s = pending[0]
            pending = None
        if e - s < min_len:
            pending = [s, e]
            continue
        merged.append([s, e])
    if pending is not None:
        if merged:
            merged[-1][1] = pending[1]
        else:
            merged.append(pending)
    segs = tuple((int(s), int(e)) for s, e in merged)
    return Segmentation(tuple(s for s, _ in segs[1:]), segs)


def calibrate_prototypes(labelled: Sequence[Event]) -> Prototypes:
    """Class means of event features for every observed label component."""
    banks: list[dict[int, list[np.ndarray]]] = [{}, {}, {}]
    for ev in labelled:
        for bank, value in zip(banks, ev.label):
            bank.setdefault(int(value), []).append(ev.feature)
    if not banks[0]:
        raise ValueError("calibration split is empty")
    return Prototypes(tuple({k: np.mean(v, axis=0) for k, v in sorted(bank.items())} for bank in banks))


def _nearest(feature: np.ndarray, bank: dict[int, np.ndarray], stats: EventifyStats | None) -> tuple[int, float]:
    norm = np.linalg.norm(feature)
    best, best_cos = -1, -np.inf
    for label in sorted(bank):
        proto = bank[label]
        denom = norm * np.linalg.norm(proto)
        cos = float(feature @ proto / denom) if denom > 0 else 0.0
        if stats is not None:
            stats.comparisons += 1
        # strict '>' keeps the lowest label index on ties
        if cos > best_cos + 1e-12:
            best, best_cos = label, cos
    return best, best_cos


def classify(feature: np.ndarray, prototypes: Prototypes, stats: EventifyStats | None = None) -> tuple[EventLabel, tuple[float, float, float]]:
    picks = [_nearest(feature, bank, stats) for bank in prototypes.banks]
    return EventLabel(*(p[0] for p in picks)), tuple(p[1] for p in picks)


def eventify(frames: np.ndarray, segmentation: Segmentation, prototypes: Prototypes,
             min_norm: float = 0.0, stats: EventifyStats | None = None) -> list[Event]:
    """One event per segment: pooled feature, segment bounds, nearest-prototype label.

    Segments whose pooled feature has norm below ``min_norm`` are treated as
    background (no event active) and skipped.  Output is sorted by start
    frame and re-indexed from 0.
    """
    if not any(prototypes.banks):
        raise ValueError("no prototypes")
    events = []
    for s, e in sorted(segmentation.segments):
        pooled = frames[s:e].mean(axis=0)
        if np.linalg.norm(pooled) < min_norm:
            continue
        label, _ = classify(pooled, prototypes, stats)
        events.append(Event(label, pooled, TemporalSupport(float(s), float(e)), len(events)))
    return events


@dataclass(frozen=True)
class Eventifier:
    """Bundles the proposal and classification settings for a world."""

    prototypes: Prototypes
    threshold: float
    min_len: int = 2
    min_norm: float = 0.5

    @classmethod
    def for_noise(cls, prototypes: Prototypes, noise: float, d: int, min_len: int = 2) -> "Eventifier":
        thr = default_threshold(noise, d)
        return cls(prototypes, thr, min_len, thr / 2.0)

    def __call__(self, frames: np.ndarray, stats: EventifyStats | None = None) -> list[Event]:
        seg = segment_stream(frames, self.threshold, self.min_len)
        return eventify(frames, seg, self.prototypes, self.min_norm, stats)


def align_events(found: Sequence[Event], truth: Sequence[Event], min_iou: float = 0.5) -> list[int]:
    """Map each found event to the truth event with best support IoU, or -1."""
    out = []
    for ev in found:
        best, best_iou = -1, min_iou
        for j, tr in enumerate(truth):
            iou = ev.support.iou(tr.support)
            if iou > best_iou:
                best, best_iou = j, iou
        out.append(best)
    return out
