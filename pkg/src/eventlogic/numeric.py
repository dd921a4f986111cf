"""Small deterministic numeric substrate.

Everything here works on float64 numpy arrays.  Parameters are kept in flat
``dict[str, np.ndarray]`` mappings with dotted names (``"verifier.head.w1"``)
so that the optimizer, the gradient checker and the checkpoint code can treat
every model component the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Params = dict[str, np.ndarray]

_ACTIVATIONS = ("tanh", "sigmoid", "identity")


def sigmoid(x):
    """Numerically stable logistic function (scalar or array)."""
    if np.isscalar(x):
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        z = math.exp(x)
        return z / (1.0 + z)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = z / (1.0 + z)
    return out


def log_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Log-softmax over the unmasked entries; masked entries get -inf."""
    logits = np.asarray(logits, dtype=np.float64)
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    if not mask.any():
        raise ValueError("log_softmax over an all-masked vector")
    out = np.full(logits.shape, -np.inf)
    live = logits[mask]
    top = live.max()
    out[mask] = live - top - math.log(np.exp(live - top).sum())
    return out


# --------------------------------------------------------------------------
# Two-layer perceptron
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Mlp:
    """Two affine maps with an elementwise nonlinearity in between.

    ``w1`` has shape (hidden, in) and ``w2`` shape (out, hidden).  The arrays
    are references, so an ``Mlp`` built with :meth:`view` reads (and an
    optimizer writing into the same dict updates) the shared storage.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        h, n_in = self.w1.shape
        n_out, h2 = self.w2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (n_out,):
            raise ValueError(
                f"inconsistent MLP shapes: w1{self.w1.shape} b1{self.b1.shape} "
                f"w2{self.w2.shape} b2{self.b2.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.w1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_out(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def view(cls, params: Mapping[str, np.ndarray], prefix: str, activation: str = "tanh") -> "Mlp":
        return cls(
            params[f"{prefix}.w1"],
            params[f"{prefix}.b1"],
            params[f"{prefix}.w2"],
            params[f"{prefix}.b2"],
            activation,
        )

    def arrays(self, prefix: str) -> Params:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


def init_mlp(rng: "SeededRng", n_in: int, n_hidden: int, n_out: int, prefix: str,
             out_scale: float = 1.0) -> Params:
    """Scaled-normal weights, zero biases."""
    return {
        f"{prefix}.w1": rng.normal((n_hidden, n_in)) / math.sqrt(n_in),
        f"{prefix}.b1": np.zeros(n_hidden),
        f"{prefix}.w2": rng.normal((n_out, n_hidden)) * (out_scale / math.sqrt(n_hidden)),
        f"{prefix}.b2": np.zeros(n_out),
    }


@dataclass(frozen=True)
class MlpCache:
    x: np.ndarray
    hidden: np.ndarray
    owner: int
    shapes: tuple


def _shapes(p: Mlp) -> tuple:
    return (p.w1.shape, p.w2.shape, p.activation)


def mlp_forward(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Forward pass for one input row ``(in,)`` or a batch ``(n, in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.n_in or x.ndim not in (1, 2):
        raise ValueError(f"input shape {x.shape} does not match MLP input width {params.n_in}")
    pre = x @ params.w1.T + params.b1
    if params.activation == "tanh":
        hidden = np.tanh(pre)
    elif params.activation == "sigmoid":
        hidden = sigmoid(pre)
    else:
        hidden = pre
    out = hidden @ params.w2.T + params.b2
    return out, MlpCache(x, hidden, id(params.w1), _shapes(params))


def mlp_backward(params: Mlp, cache: MlpCache, upstream: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact gradients for the pass recorded in ``cache``.

    Returns ``({"w1", "b1", "w2", "b2"} -> grad, input_grad)``.  Batched
    caches sum parameter gradients over rows.
    """
    if cache.shapes != _shapes(params) or cache.owner != id(params.w1):
        raise ValueError("MLP cache was produced by a different parameter set")
    upstream = np.asarray(upstream, dtype=np.float64)
    h = cache.hidden
    if upstream.shape != h.shape[:-1] + (params.n_out,):
        raise ValueError(f"upstream gradient shape {upstream.shape} does not match output")
    if params.activation == "tanh":
        dact = 1.0 - h * h
    elif params.activation == "sigmoid":
        dact = h * (1.0 - h)
    else:
        dact = np.ones_like(h)
    g_hidden = (upstream @ params.w2) * dact
    if upstream.ndim == 1:
        grads = {
            "w2": np.outer(upstream, h),
            "b2": upstream.copy(),
            "w1": np.outer(g_hidden, cache.x),
            "b1": g_hidden,
        }
    else:
        grads = {
            "w2": upstream.T @ h,
            "b2": upstream.sum(axis=0),
            "w1": g_hidden.T @ cache.x,
            "b1": g_hidden.sum(axis=0),
        }
    return grads, g_hidden @ params.w1


def accumulate(into: Params, prefix: str, grads: Mapping[str, np.ndarray], scale: float = 1.0) -> None:
    """Add ``scale * grads`` into ``into[prefix + "." + name]``."""
    for name, g in grads.items():
        key = f"{prefix}.{name}"
        if key in into:
            into[key] += scale * g
        else:
            into[key] = scale * np.array(g, dtype=np.float64)


def zeros_like(params: Mapping[str, np.ndarray]) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------


class NonFiniteError(FloatingPointError):
    """Raised when a checked function returns a non-finite value."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, int] | None
    n_checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def finite_diff_check(
    f: Callable[[Params], tuple[float, Mapping[str, np.ndarray]]],
    params: Params,
    step: float = 1e-5,
    keys: list[str] | None = None,
    floor: float = 1e-12,
    richardson: bool = False,
    max_per_key: int | None = None,
    rng: "SeededRng | None" = None,
    value: Callable[[Params], float] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f(params)`` returns ``(value, grads)``; analytic gradients are taken at
    the unperturbed point.  The error per entry is
    ``|analytic - central| / (|central| + floor)`` and the maximum over all
    checked entries is reported.  Central differences carry round-off of
    roughly ``eps * |f| / step``, so entries with tiny gradients need a
    larger ``floor`` (which turns the test into an absolute one there).
    With ``richardson`` the estimate is ``(4 D(h/2) - D(h)) / 3``, which
    cancels the ``h^2`` truncation term of the plain central difference.
    ``max_per_key`` checks a random subset of entries per tensor, drawn
    from ``rng``.  ``value(params)``, when given, is used for the perturbed
    evaluations so gradients are only computed once.  Parameters are
    perturbed in place and restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, grads = f(params)
    if value is None:
        value = lambda p: f(p)[0]  # noqa: E731
    keys = sorted(params) if keys is None else keys
    worst_err, worst_at, n = 0.0, None, 0
    for key in keys:
        arr = params[key]
        flat = arr.reshape(-1)
        g = np.asarray(grads.get(key, np.zeros_like(arr))).reshape(-1)
        idx = range(flat.size)
        if max_per_key is not None and flat.size > max_per_key:
            if rng is None:
                raise ValueError("max_per_key needs an rng")
            idx = sorted(int(i) for i in rng.permutation(flat.size)[:max_per_key])
        for i in idx:
            central = _central(value, params, flat, i, step, key)
            if richardson:
                central = (4.0 * _central(value, params, flat, i, step / 2.0, key) - central) / 3.0
            err = abs(g[i] - central) / (abs(central) + floor)
            n += 1
            if err > worst_err:
                worst_err, worst_at = err, (key, i)
    return GradCheckReport(worst_err, worst_at, n)


def _central(value, params, flat: np.ndarray, i: int, step: float, key: str) -> float:
    orig = flat[i]
    flat[i] = orig + step
    fp = value(params)
    flat[i] = orig - step
    fm = value(params)
    flat[i] = orig
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise NonFiniteError(f"non-finite objective while perturbing {key}[{i}]")
    return (fp - fm) / (2.0 * step)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    refused: int = 0

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.refused,
        )


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> tuple[Params, AdamState, bool]:
    """One bias-corrected Adam update over the keys of ``grads``.

    Returns ``(new_params, new_state, applied)``.  Inputs are not mutated.
    A step with any non-finite gradient is refused: parameters and moments
    are returned unchanged and ``refused`` is incremented.
    """
    new_state = state.copy()
    new_params = {k: v.copy() for k, v in params.items()}
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        if not np.all(np.isfinite(g)):
            new_state = state.copy()
            new_state.refused += 1
            return {k: v.copy() for k, v in params.items()}, new_state, False
    new_state.step += 1
    t = new_state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k in sorted(grads):
        g = grads[k]
        m = new_state.m.get(k)
        v = new_state.v.get(k)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_state.m[k] = m
        new_state.v[k] = v
        new_params[k] = params[k] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new_params, new_state, True


# --------------------------------------------------------------------------
# Random source
# --------------------------------------------------------------------------

_HALF_ULP = 2.0 ** -54


class SeededRng:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    PCG64 (O'Neill, 128-bit LCG state with an XSL-RR output permutation) is
    fully specified and platform independent, and numpy documents that its
    ``random()``/``standard_normal()`` transforms are stable across releases
    for a given bit-generator state.  Uniforms are shifted by half an ulp so
    they lie in the open interval (0, 1), which keeps Gumbel draws finite.
    Child streams come from ``SeedSequence`` spawn keys, so
    ``SeededRng(s).child(i)`` is reproducible and independent of how much the
    parent has been consumed.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "SeededRng":
        return SeededRng(self.seed, self.spawn_key + tuple(key))

    def uniform(self, size=None):
        return self._gen.random(size) + _HALF_ULP

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def gumbel(self, size=None):
        return gumbel_from_uniform(self.uniform(size))

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def categorical(self, probs: np.ndarray) -> int:
        """Inverse-CDF draw from a probability vector (zeros never chosen)."""
        cdf = np.cumsum(probs)
        u = self.uniform() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        idx = min(idx, len(probs) - 1)
        while probs[idx] <= 0.0:
            idx -= 1
        return idx

    def get_state(self) -> dict:
        return {"seed": self.seed, "spawn_key": list(self.spawn_key),
                "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"], tuple(state["spawn_key"]))
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng


def seeded_rng(seed: int) -> SeededRng:
    return SeededRng(seed)


def gumbel_from_uniform(u):
    """Standard Gumbel transform ``-log(-log(u))`` for ``u`` in (0, 1)."""
    return -np.log(-np.log(u))
