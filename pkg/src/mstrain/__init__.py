"""Mini-sequence transformer training on a CPU reference engine with exact
memory accounting."""

from .model import ConfigError, ModelConfig, init_weights, forward, backward, loss_and_grads
from .miniseq import MiniSeqConfig
from .recompute import CheckpointPolicy
from .optim import OptimConfig
from .train import Trainer, max_seq

__all__ = [
    "CheckpointPolicy",
    "ConfigError",
    "MiniSeqConfig",
    "ModelConfig",
    "OptimConfig",
    "Trainer",
    "backward",
    "forward",
    "init_weights",
    "loss_and_grads",
    "max_seq",
]
