"""Contextual RNN-Transducer speech recognition, desk scale.

The pieces compose bottom-up: `tensor` (autodiff + Adam), `tokenizer`
(subword vocabulary), `recurrent` (LSTM stacks), `context` (metadata
attention and the bias trie), `transducer` (lattice loss), `model`
(the four wirings), `decoder`, `metrics`, and the `data`/`train`/`cli`
harness around them.
"""

from crnt.config import Config, load_config
from crnt.data import generate_corpus, load_manifest
from crnt.decoder import beam_search, greedy_decode
from crnt.metrics import compute_report
from crnt.model import Model, ModelConfig
from crnt.tokenizer import Vocabulary, train_bpe
from crnt.train import train
from crnt.transducer import ModelMode, rnnt_loss

__version__ = "0.1.0"

__all__ = [
    "Config", "load_config", "generate_corpus", "load_manifest",
    "beam_search", "greedy_decode", "compute_report", "Model",
    "ModelConfig", "Vocabulary", "train_bpe", "train", "ModelMode",
    "rnnt_loss", "__version__",
]
