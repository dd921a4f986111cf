import numpy as np
import pytest

from eventlogic.events import Event, EventArrays, EventLabel, TemporalSupport


def make_events(supports, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return [Event(EventLabel(0, 0, 0), rng.normal(size=d), TemporalSupport(float(s), float(e)), i)
            for i, (s, e) in enumerate(supports)]


def make_arrays(k=3, d=4, seed=0):
    rng = np.random.default_rng(seed)
    starts = np.sort(rng.uniform(0, 10, k))
    return EventArrays(rng.normal(size=(k, d)), starts, starts + 1.0 + rng.uniform(0, 2, k))


@pytest.fixture
def events3():
    return make_events([(0, 2), (3, 5), (6, 9)])


def bandit(stop_loss=1.0, go_loss=2.0):
    """Stop vs. continue as a two-armed bandit with both arm logits at zero.

    Returns ``(model, events, loss_fn)``; continuing splits evenly over two
    sources whose logits are ``-log 2``, so the continue arm's total logit is 0.
    """
    import math

    from eventlogic.model import ModelConfig, init_model

    cfg = ModelConfig(d=4, m=6, head_hidden=2, pred_hidden=2, policy_hidden=2, ctx_width=2, l_max=1)
    m = init_model(cfg, 0)
    for k in m.group("policy"):
        m.params[k] = np.zeros_like(m.params[k])
    m.params["policy.src.b2"] = np.array([-math.log(2.0)])
    events = EventArrays(np.ones((2, 4)), np.array([0.0, 3.0]), np.array([2.0, 5.0]))
    return m, events, lambda chain: go_loss if chain else stop_loss


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Keep one pass/fail line per acceptance criterion for the terminal summary."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
