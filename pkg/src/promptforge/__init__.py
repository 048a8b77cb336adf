"""Iterative multi-modal prompt evolution on a small numpy dual encoder.

Frozen random image and text transformers are steered by trainable prompt
generators that alternate between the two modalities for N iterations.
"""

from .checkpoint import (Checkpoint, CheckpointError, VersionError, load_checkpoint,
                         load_task, save_checkpoint, save_task)
from .config import ConfigError, ModelConfig, TrainConfig, format_config, load_config, parse_config
from .data import Split, SyntheticTask, generate_task, iterate_batches
from .encoders import ClassTokens, encode_image, encode_text, init_backbone
from .engine import (EpisodeTrace, History, IterationState, Model, episode_loss, forward_episode,
                     initialize, mie_step, train, weighted_loss)
from .filter import class_probabilities, select_top_a, top_a_indices
from .metrics import EvalReport, confidence_gain_fraction, evaluate, harmonic_mean, trace_episode
from .params import ParamStore, finite_diff_check, sgd_step
from .promptgen import gen_text_prompt, gen_vision_prompts

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "VersionError", "load_checkpoint", "load_task",
    "save_checkpoint", "save_task", "ConfigError", "ModelConfig", "TrainConfig",
    "format_config", "load_config", "parse_config", "Split", "SyntheticTask", "generate_task",
    "iterate_batches", "ClassTokens", "encode_image", "encode_text", "init_backbone",
    "EpisodeTrace", "History", "IterationState", "Model", "episode_loss", "forward_episode",
    "initialize", "mie_step", "train", "weighted_loss", "class_probabilities", "select_top_a",
    "top_a_indices", "EvalReport", "confidence_gain_fraction", "evaluate", "harmonic_mean",
    "trace_episode", "ParamStore", "finite_diff_check", "sgd_step", "gen_text_prompt",
    "gen_vision_prompts",
]
