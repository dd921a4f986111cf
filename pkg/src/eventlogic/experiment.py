"""One reproducible experiment: corpus, eventifier, training, held-out evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

from .model import Model, ModelConfig, init_model
from .trainer import EvalReport, Prepared, TrainConfig, TrainResult, build_eventifier, evaluate, prepare_corpus, train
from .world import WorldConfig, generate_corpus

logger = logging.getLogger(__name__)

HELD_OUT_OFFSET = 1_000  # held-out corpus seed = corpus_seed + offset


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=lambda: WorldConfig(k=3))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: int = 200
    n_eval: int = 100
    corpus_seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_eval < 0:
            raise ValueError("n_train >= 1 and n_eval >= 0 required")
        if self.world.d != self.model.d:
            raise ValueError(f"feature width mismatch: world d={self.world.d}, model d={self.model.d}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same corpus, different training seed (model init and sampling)."""
        return replace(self, model=replace(self.model, init_seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return {"world": self.world.to_dict(), "model": self.model.to_dict(), "train": self.train.to_dict(),
                "n_train": self.n_train, "n_eval": self.n_eval, "corpus_seed": self.corpus_seed}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - {"world", "model", "train", "n_train", "n_eval", "corpus_seed"}
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        base = cls()
        return cls(
            world=WorldConfig.from_dict({**base.world.to_dict(), **data.get("world", {})}),
            model=ModelConfig.from_dict({**base.model.to_dict(), **data.get("model", {})}),
            train=TrainConfig.from_dict({**base.train.to_dict(), **data.get("train", {})}),
            n_train=data.get("n_train", base.n_train),
            n_eval=data.get("n_eval", base.n_eval),
            corpus_seed=data.get("corpus_seed", base.corpus_seed),
        )


@dataclass
class Corpora:
    train: list[Prepared]
    held_out: list[Prepared]


def build_corpora(cfg: ExperimentConfig) -> tuple[Corpora, object]:
    """Prepared training and held-out corpora sharing one eventifier calibrated on training truth."""
    scen = generate_corpus(cfg.world, cfg.n_train, cfg.corpus_seed)
    held = generate_corpus(cfg.world, cfg.n_eval, cfg.corpus_seed + HELD_OUT_OFFSET) if cfg.n_eval else []
    eventifier = build_eventifier(scen)
    modes = cfg.train.cf_modes
    return Corpora(prepare_corpus(scen, eventifier, modes), prepare_corpus(held, eventifier, modes)), eventifier


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    initial: Model
    result: TrainResult
    before: EvalReport
    after: EvalReport
    corpora: Corpora


def run_experiment(cfg: ExperimentConfig, corpora: Corpora | None = None, eventifier=None,
                   metrics_path=None, checkpoint_dir=None,
                   on_epoch: Callable[[int, Model], None] | None = None) -> ExperimentResult:
    if corpora is None:
        corpora, eventifier = build_corpora(cfg)
    protos = eventifier.prototypes if eventifier is not None else None
    model0 = init_model(cfg.model, prototypes=protos)
    ocfg = cfg.train.objective
    before = evaluate(model0, corpora.held_out, ocfg, cfg.train.n_select, seed=cfg.train.seed)
    res = train(model0, corpora.train, cfg.train, metrics_path=metrics_path, checkpoint_dir=checkpoint_dir,
                on_epoch=on_epoch)
    after = evaluate(res.model, corpora.held_out, ocfg, cfg.train.n_select, seed=cfg.train.seed)
    logger.info("seed %d: F1 %.4f -> %.4f, mean length %.2f", cfg.train.seed, before.f1, after.f1, after.mean_length)
    return ExperimentResult(cfg, model0, res, before, after, corpora)
