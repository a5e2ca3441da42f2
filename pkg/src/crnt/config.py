"""Flat `key = value` run configuration.

One config drives corpus generation, training, and decoding so a whole
experiment is reproducible from a single file plus a seed. Lines are
`key = value`; `#` starts a comment; unknown keys are an error. The
CRNT_SEED environment variable, when set, overrides the seed.

Defaults are the desk-scale preset: small enough that a full
generate/train/decode/eval cycle fits on a laptop CPU while leaving the
contextual effects measurable.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

from .data import SyntheticSpec
from .model import ModelConfig


@dataclass
class Config:
    seed: int = 20260814

    # synthetic corpus
    feat_dim: int = 16
    n_common_words: int = 40
    n_entity_pairs: int = 4
    sentence_len_min: int = 3
    sentence_len_max: int = 9
    frames_per_word_min: int = 3
    frames_per_word_max: int = 6
    noise_sigma: float = 0.5
    entity_utterance_rate: float = 0.04
    rho: float = 0.5
    related_words_min: int = 3
    related_words_max: int = 8
    distractors_min: int = 5
    distractors_max: int = 15
    segments_per_video: int = 1
    confusable_distance: float = 0.5
    prototype_min_separation: float = 2.0
    n_train: int = 2000
    n_test: int = 400

    # tokenizer
    vocab_size: int = 64

    # model
    enc_layers: int = 2
    enc_hidden: int = 48
    enc_subsample_after: tuple = (1,)
    enc_proj: int = 64
    pred_hidden: int = 48
    pred_layers: int = 1
    pred_proj: int = 64
    ee_hidden: int = 32
    ee_layers: int = 1
    att_dim: int = 32
    att_conv_channels: int = 2
    att_kernel: int = 3
    joint_dim: int = 64
    joint_activation: str = "relu"
    bias_dropout: float = 0.1
    bias_at_word_start: bool = False

    # training
    epochs: int = 15
    batch_size: int = 8
    lr: float = 0.002
    specaug_freq_masks: int = 1
    specaug_max_freq_width: int = 2
    specaug_time_masks: int = 1
    specaug_max_time_width: int = 3
    checkpoint_every: int = 5

    # decoding
    beam_width: int = 10
    max_symbols_per_step: int = 5

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec.build(
            seed=self.seed,
            feat_dim=self.feat_dim,
            n_common=self.n_common_words,
            n_entity_pairs=self.n_entity_pairs,
            sentence_len=(self.sentence_len_min, self.sentence_len_max),
            frames_per_word=(self.frames_per_word_min, self.frames_per_word_max),
            noise_sigma=self.noise_sigma,
            entity_utterance_rate=self.entity_utterance_rate,
            rho=self.rho,
            related_words=(self.related_words_min, self.related_words_max),
            distractors=(self.distractors_min, self.distractors_max),
            segments_per_video=self.segments_per_video,
            confusable_distance=self.confusable_distance,
            min_separation=self.prototype_min_separation,
        )

    def model_config(self, mode, vocab_size: int) -> ModelConfig:
        """vocab_size is the trained vocabulary's actual size, which can
        undershoot the configured target on tiny corpora."""
        return ModelConfig(
            mode=mode,
            vocab_size=vocab_size,
            feat_dim=self.feat_dim,
            enc_layers=self.enc_layers,
            enc_hidden=self.enc_hidden,
            enc_subsample_after=frozenset(self.enc_subsample_after),
            enc_proj=self.enc_proj,
            pred_hidden=self.pred_hidden,
            pred_layers=self.pred_layers,
            pred_proj=self.pred_proj,
            ee_hidden=self.ee_hidden,
            ee_layers=self.ee_layers,
            att_dim=self.att_dim,
            att_conv_channels=self.att_conv_channels,
            att_kernel=self.att_kernel,
            joint_dim=self.joint_dim,
            joint_activation=self.joint_activation,
            bias_dropout=self.bias_dropout,
            bias_at_word_start=self.bias_at_word_start,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _parse_value(key: str, text: str):
    f = _FIELDS[key]
    if f.type == "int":
        return int(text)
    if f.type == "float":
        return float(text)
    if f.type == "bool":
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if f.type == "tuple":
        if not text.strip():
            return ()
        return tuple(int(p) for p in text.split(","))
    return text


def parse_config(text: str, source: str = "<config>") -> Config:
    cfg = Config()
    seen = set()
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELDS:
            raise ValueError(f"{source}:{ln}: unknown key {key!r}")
        if key in seen:
            raise ValueError(f"{source}:{ln}: duplicate key {key!r}")
        seen.add(key)
        try:
            setattr(cfg, key, _parse_value(key, value))
        except ValueError as e:
            raise ValueError(f"{source}:{ln}: bad value for {key}: {e}") from e
    if "CRNT_SEED" in os.environ:
        cfg.seed = int(os.environ["CRNT_SEED"])
    return cfg


def load_config(path) -> Config:
    return parse_config(Path(path).read_text(), source=str(path))
