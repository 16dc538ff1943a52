"""Query-focused abstractive summarization with an attentive pointer-generator.

A numpy-only implementation: reverse-mode autodiff, GRU encoder/decoder with
query-aware attention, a pointer switch for copying entities, beam search,
ROUGE evaluation, and a command line front end.
"""

from .textprep import Vocabulary, build_vocab, tokenize
from .dataset import RawArticle, TrainingTriple, build_dataset, build_triples
from .model import HyperParams, ModelParams
from .training import TrainConfig, load_checkpoint, new_train_state, save_checkpoint, train
from .inference import BeamConfig, beam_search, greedy_decode
from .evaluation import rouge_l, rouge_n, rouge_su4

__version__ = "0.1.0"

__all__ = [
    "Vocabulary", "build_vocab", "tokenize",
    "RawArticle", "TrainingTriple", "build_dataset", "build_triples",
    "HyperParams", "ModelParams",
    "TrainConfig", "load_checkpoint", "new_train_state", "save_checkpoint", "train",
    "BeamConfig", "beam_search", "greedy_decode",
    "rouge_l", "rouge_n", "rouge_su4",
]
