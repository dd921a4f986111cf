"""Event-chain reasoning with a hybrid differentiable logic verifier."""

__version__ = "0.1.0"

from .events import Edge, Event, EventLabel, OperatorCodebook, TemporalSupport, edge_f1
from .experiment import ExperimentConfig, run_experiment
from .model import Model, ModelConfig, init_model
from .objectives import ObjectiveConfig, aux_loss
from .trainer import TrainConfig, evaluate, train
from .verifier import score_chain
from .world import Scenario, WorldConfig, generate_corpus, generate_scenario

__all__ = [
    "Edge", "Event", "EventLabel", "ExperimentConfig", "Model", "ModelConfig", "ObjectiveConfig",
    "OperatorCodebook", "Scenario", "TemporalSupport", "TrainConfig", "WorldConfig", "aux_loss", "edge_f1",
    "evaluate", "generate_corpus", "generate_scenario", "init_model", "run_experiment", "score_chain", "train",
]
