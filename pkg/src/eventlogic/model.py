"""Model state: every learnable tensor in one flat parameter dict."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .eventifier import Prototypes
from .events import OperatorCodebook
from .numeric import Params, SeededRng, init_mlp

STEP_ENC = 4
PAIR_FEATS = 2  # squashed signed gaps between a candidate target and the source


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    m: int = 32
    head_hidden: int = 32
    pred_hidden: int = 32
    policy_hidden: int = 32
    ctx_width: int = 16
    l_max: int = 12
    slope: float = 1.0
    meets_window: float = 2.0
    init_seed: int = 0

    def __post_init__(self):
        if self.slope <= 0:
            raise ValueError("temporal slope k must be positive")
        if self.l_max < 1:
            raise ValueError("l_max must be >= 1")
        OperatorCodebook(size=self.m)

    @property
    def codebook(self) -> OperatorCodebook:
        return OperatorCodebook(size=self.m)

    @property
    def event_width(self) -> int:
        """Policy event descriptor: feature plus normalised start/end."""
        return self.d + 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class Model:
    config: ModelConfig
    params: Params
    prototypes: Prototypes | None = None
    meta: dict = field(default_factory=dict)

    @property
    def codebook(self) -> OperatorCodebook:
        return self.config.codebook

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, self.prototypes, dict(self.meta))

    def group(self, name: str) -> list[str]:
        """``"policy"`` keys or ``"theta"`` (verifier head, codebook, predictor) keys."""
        if name == "policy":
            return sorted(k for k in self.params if k.startswith("policy."))
        if name == "theta":
            return sorted(k for k in self.params if not k.startswith("policy."))
        raise KeyError(name)


def init_embeddings(rng: SeededRng, m: int, d: int) -> np.ndarray:
    """Random unit-norm rows."""
    emb = rng.normal((m, d))
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def init_model(config: ModelConfig = ModelConfig(), seed: int | None = None,
               prototypes: Prototypes | None = None) -> Model:
    rng = SeededRng(config.init_seed if seed is None else seed, (7,))
    d, m = config.d, config.m
    dx, c = config.event_width, config.ctx_width
    params: Params = {"codebook.emb": init_embeddings(rng.child(0), m, d)}
    params.update(init_mlp(rng.child(1), 3 * d, config.head_hidden, 1, "verifier.head"))
    params.update(init_mlp(rng.child(2), 3 * d, config.pred_hidden, d, "predictor.enc"))
    params["predictor.null"] = np.zeros(d)
    params.update(init_mlp(rng.child(3), 2 * d, config.pred_hidden, d, "predictor.head"))
    ctx_in = dx + (2 * dx + d) + STEP_ENC
    prng = rng.child(4)
    params.update(init_mlp(prng.child(0), ctx_in, config.policy_hidden, c, "policy.ctx"))
    params.update(init_mlp(prng.child(1), dx + c, config.policy_hidden, 1, "policy.src", out_scale=0.1))
    params["policy.stop.w"] = np.zeros(c)
    params["policy.stop.b"] = np.zeros(1)
    params["policy.opq.w"] = prng.child(2).normal((d, c + dx)) * (0.1 / np.sqrt(c + dx))
    params["policy.opq.b"] = np.zeros(d)
    params.update(init_mlp(prng.child(3), 2 * dx + PAIR_FEATS + d + c, config.policy_hidden, 1, "policy.tgt", out_scale=0.1))
    params["policy.tgt_pair.w"] = np.zeros((PAIR_FEATS, d))
    return Model(config, params, prototypes)
