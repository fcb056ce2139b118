"""From-scratch Pre-LN Transformer training lab for weight scaling as reparameterization."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .errors import ConfigError, DivergedError, InputError, StaleCacheError
from .estimator import ByteLM
from .initializers import InitSpec, initialize_model, std_table
from .model import ModelConfig, TransformerLM
from .optim import TrainConfig
from .params import ReparamMode
from .trainer import eval_perplexity, load_corpus, run_training, train

__version__ = "0.1.0"

__all__ = [
    "ByteLM", "ConfigError", "DivergedError", "InitSpec", "InputError", "ModelConfig", "ReparamMode", "RunConfig",
    "StaleCacheError", "TrainConfig", "TransformerLM", "eval_perplexity", "initialize_model", "load_checkpoint",
    "load_config", "load_corpus", "run_training", "save_checkpoint", "std_table", "train",
]
