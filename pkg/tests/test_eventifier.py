import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventlogic.eventifier import (
    Eventifier,
    EventifyStats,
    Prototypes,
    align_events,
    calibrate_prototypes,
    classify,
    default_threshold,
    eventify,
    segment_stream,
)
from eventlogic.world import WorldConfig, generate_corpus, generate_scenario

NOISELESS = WorldConfig(k=3, t=48, noise=0.0)


def noiseless_eventifier(cfg=NOISELESS, n=200):
    protos = calibrate_prototypes([e for s in generate_corpus(cfg, n, 99) for e in s.events])
    return Eventifier.for_noise(protos, cfg.noise, cfg.d)


class TestSegment:
    def test_constant_stream_single_segment(self):
        seg = segment_stream(np.ones((10, 4)), threshold=0.1)
        assert seg.segments == ((0, 10),) and seg.boundaries == ()

    def test_one_jump(self):
        frames = np.zeros((10, 4))
        frames[6:] = 5.0
        seg = segment_stream(frames, threshold=1.0)
        assert seg.segments == ((0, 6), (6, 10))
        assert seg.boundaries == (6,)

    def test_short_segments_merge_forward(self):
        frames = np.zeros((10, 2))
        frames[4] = 5.0  # one-frame spike
        seg = segment_stream(frames, threshold=1.0, min_len=2)
        assert all(e - s >= 2 for s, e in seg.segments)
        assert seg.segments[0][0] == 0 and seg.segments[-1][1] == 10

    @settings(max_examples=100, deadline=None)
    @given(st.integers(4, 40), st.integers(1, 4), st.integers(0, 1000))
    def test_partition(self, n, min_len, seed):
        frames = np.random.default_rng(seed).normal(size=(n, 3))
        seg = segment_stream(frames, threshold=1.0, min_len=min_len)
        flat = [x for s in seg.segments for x in s]
        assert flat[0] == 0 and flat[-1] == n
        assert all(seg.segments[i][1] == seg.segments[i + 1][0] for i in range(len(seg.segments) - 1))
        if n >= 2 * min_len:
            assert all(e - s >= min_len for s, e in seg.segments)

    def test_noiseless_three_events(self):
        s = generate_scenario(NOISELESS, 4)
        seg = segment_stream(s.frames, default_threshold(0.0, 16))
        assert len(seg.segments) >= 3
        for ev in s.events:
            span = (int(ev.support.start), int(ev.support.end))
            assert span in seg.segments
            np.testing.assert_allclose(s.frames[span[0]:span[1]].mean(axis=0), ev.feature, atol=1e-12)


class TestClassify:
    def test_exact_prototype(self):
        protos = Prototypes(({0: np.array([1.0, 0]), 1: np.array([0, 1.0])},) * 3)
        label, cos = classify(np.array([0, 2.0]), protos)
        assert tuple(label) == (1, 1, 1)
        assert cos == pytest.approx((1.0, 1.0, 1.0))

    def test_tie_goes_to_lower_index(self):
        protos = Prototypes(({0: np.array([1.0, 0]), 1: np.array([0, 1.0])},) * 3)
        label, _ = classify(np.array([1.0, 1.0]), protos)
        assert tuple(label) == (0, 0, 0)

    def test_empty_prototypes_rejected(self):
        with pytest.raises(ValueError):
            eventify(np.zeros((4, 2)), segment_stream(np.zeros((4, 2)), 1.0), Prototypes(({}, {}, {})))

    def test_calibration_needs_events(self):
        with pytest.raises(ValueError):
            calibrate_prototypes([])

    def test_prototype_round_trip(self):
        protos = calibrate_prototypes(generate_scenario(NOISELESS, 0).events)
        back = Prototypes.from_dict(protos.to_dict())
        for a, b in zip(protos.banks, back.banks):
            assert a.keys() == b.keys()
            for key in a:
                np.testing.assert_array_equal(a[key], b[key])


def test_noiseless_single_event_recovered():
    cfg = WorldConfig(k=2, t=24, noise=0.0, n_semantic=(0, 0))
    ev = noiseless_eventifier(cfg)
    s = generate_scenario(cfg, 3)
    found = ev(s.frames)
    assert len(found) == 2
    for f, t in zip(found, s.events):
        assert f.label == t.label
        assert abs(f.support.start - t.support.start) <= 2 and abs(f.support.end - t.support.end) <= 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_grounding_fidelity_noiseless(seed):
    ev = EVENTIFIER
    s = generate_scenario(NOISELESS, seed)
    found = ev(s.frames)
    assert len(found) == len(s.events)
    assert [f.label for f in found] == [t.label for t in s.events]
    err = np.mean([abs(f.support.start - t.support.start) + abs(f.support.end - t.support.end)
                   for f, t in zip(found, s.events)]) / 2
    assert err <= ev.min_len
    starts = [f.support.start for f in found]
    assert starts == sorted(starts)


EVENTIFIER = noiseless_eventifier()


def test_classification_cost_linear_in_events():
    ev = EVENTIFIER
    per_event = sum(len(b) for b in ev.prototypes.banks)
    for seed in range(3):
        stats = EventifyStats()
        found = ev(generate_scenario(NOISELESS, seed).frames, stats)
        assert stats.comparisons == per_event * len(found)


def test_alignment():
    s = generate_scenario(WorldConfig(k=4, noise=0.05), 1)
    ev = Eventifier.for_noise(calibrate_prototypes(s.events), 0.05, 16)
    found = ev(s.frames)
    assert align_events(found, s.events) == list(range(4))
    assert align_events(found, []) == [-1] * len(found)
