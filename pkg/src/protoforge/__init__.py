"""Prototypical networks for few-shot relation classification, with label-adapted prototypes
and hardest-triplet representation losses, implemented on numpy with manual gradients."""

from .core import ConfigError, ParamStore, ShapeError, grad_check
from .data import Dataset, IndexedDataset, SyntheticSpec, Vocabulary, make_synthetic, sample_episode
from .encoder import EncoderConfig
from .evaluator import EvalReport, compare, evaluate
from .losses import LossConfig
from .model import Model, ModelConfig
from .trainer import Checkpoint, TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
