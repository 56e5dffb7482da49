"""Dual-encoder GRU model that writes a five-sentence story for a sequence of
five images, one sentence per image, each conditioned on a short window of
images and on the sentence before it."""

from .data import Vocabulary, build_vocab, encode_sentence
from .model import ModelConfig, ModelParameters, init_params
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint
from .inference import generate_sentence, generate_story
from .metrics import bleu, meteor_lite, score_corpus

__version__ = "0.1.0"

__all__ = [
    "Vocabulary", "build_vocab", "encode_sentence",
    "ModelConfig", "ModelParameters", "init_params",
    "TrainConfig", "Trainer", "load_checkpoint", "save_checkpoint",
    "generate_sentence", "generate_story",
    "bleu", "meteor_lite", "score_corpus",
]
