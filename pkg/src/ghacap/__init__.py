"""Gated hierarchical attention for convolutional image captioning."""

from .corpus import FeatureMaps, Vocabulary, build_vocab, generate_synthetic, read_ghaf, write_ghaf
from .model import CaptionModel, ModelConfig, build_variant
from .inference import beam_search, bleu, greedy
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "FeatureMaps", "Vocabulary", "build_vocab", "generate_synthetic", "read_ghaf", "write_ghaf",
    "CaptionModel", "ModelConfig", "build_variant",
    "beam_search", "bleu", "greedy",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
