"""Training loop: seeded shuffling, masked features, batched Adam steps,
per-epoch loss logging and checkpoints, exact resume.

All randomness is derived from (seed, epoch) streams so an interrupted
run resumed from a float64 checkpoint replays the remaining epochs
bit for bit. The baseline mode never reads the context sets, so
shuffling metadata across utterances cannot change its losses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import config_to_dict, load_checkpoint, save_checkpoint
from .config import Config
from .context import ContextSet, normalize_metadata
from .data import features_for, load_manifest, spec_mask
from .model import Model
from .tensor import Adam, backward
from .tokenizer import Vocabulary, train_bpe
from .transducer import ModelMode


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    out_dir: Path
    vocab_path: Path
    final_checkpoint: Path
    losses_path: Path
    epoch_losses: list[float] = field(default_factory=list)


def build_vocab(records, target_size: int) -> Vocabulary:
    """Sentence pieces trained on the transcripts plus the deduplicated
    metadata words, so context words stay encodable even when rare in
    the transcripts. Using the metadata as a set keeps the vocabulary
    invariant under shuffling metadata across utterances."""
    lines = [r.transcript for r in records]
    lines += sorted({w for r in records for w in r.metadata_words})
    return train_bpe(lines, target_size)


def _first_non_finite(model: Model, loss_value: float) -> str:
    for name in sorted(model.parameters()):
        if not np.isfinite(model.parameters()[name].data).all():
            return name
    if not np.isfinite(loss_value):
        return "loss"
    return "grad"


def train(cfg: Config, manifest_path, mode: ModelMode, out_dir,
          resume=None, quiet: bool = True) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = load_manifest(manifest_path)
    if not records:
        raise ValueError(f"{manifest_path}: empty manifest")

    vocab_path = out_dir / "vocab.tsv"
    if vocab_path.exists():
        vocab = Vocabulary.load(vocab_path)
    else:
        vocab = build_vocab(records, cfg.vocab_size)
        vocab.save(vocab_path)

    model_cfg = cfg.model_config(mode, vocab.size)
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_vocab_sha256=vocab.checksum())
        if ckpt.model.cfg != model_cfg:
            raise ValueError(
                f"{resume}: checkpoint config does not match: "
                f"{config_to_dict(ckpt.model.cfg)} vs {config_to_dict(model_cfg)}"
            )
        model = ckpt.model
        opt = ckpt.make_optimizer()
        start_epoch = ckpt.epoch + 1
    else:
        model = Model(model_cfg, np.random.default_rng(cfg.seed))
        opt = Adam(model.parameters(), lr=cfg.lr)
        start_epoch = 1

    # the corpus is small; hold features and encodings in memory
    feats_cache = [features_for(manifest_path, r) for r in records]
    targets_cache = [vocab.encode(r.transcript) for r in records]
    ctx_cache = [
        ContextSet.build(normalize_metadata(r.metadata_words), vocab,
                         skip_unencodable=True)
        for r in records
    ]

    masking = (cfg.specaug_freq_masks > 0 and cfg.specaug_max_freq_width > 0) \
        or (cfg.specaug_time_masks > 0 and cfg.specaug_max_time_width > 0)

    losses_path = out_dir / "losses.jsonl"
    log = open(losses_path, "a" if resume is not None else "w")
    epoch_losses = []
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(records))
            aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
            drop_rng = np.random.default_rng([cfg.seed, epoch, 2])
            total = 0.0
            for lo in range(0, len(order), cfg.batch_size):
                batch = order[lo:lo + cfg.batch_size]
                opt.zero_grad()
                losses = []
                for idx in batch:
                    feats = feats_cache[idx]
                    if masking:
                        feats = spec_mask(
                            feats, cfg.specaug_freq_masks,
                            min(cfg.specaug_max_freq_width, feats.shape[1]),
                            cfg.specaug_time_masks,
                            min(cfg.specaug_max_time_width, feats.shape[0]),
                            aug_rng,
                        )
                    losses.append(model.forward_loss(
                        feats, targets_cache[idx], ctx_cache[idx],
                        training=True, rng=drop_rng,
                    ))
                batch_loss = losses[0]
                for l in losses[1:]:
                    batch_loss = batch_loss + l
                batch_loss = batch_loss * (1.0 / len(batch))
                value = float(batch_loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"epoch {epoch}: non-finite loss; first non-finite "
                        f"tensor: {_first_non_finite(model, value)}"
                    )
                backward(batch_loss)
                opt.step()
                total += value * len(batch)
            mean_nll = total / len(records)
            epoch_losses.append(mean_nll)
            log.write(json.dumps({"epoch": epoch, "mean_nll": mean_nll}) + "\n")
            log.flush()
            if not quiet:
                print(f"epoch {epoch}: mean nll {mean_nll:.4f}")
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                save_checkpoint(out_dir / f"epoch-{epoch:03d}.ckpt", model,
                                vocab.checksum(), dtype="<f8", epoch=epoch,
                                optimizer=opt)
    finally:
        log.close()

    final = out_dir / "final.ckpt"
    save_checkpoint(final, model, vocab.checksum(), dtype="<f4",
                    epoch=cfg.epochs)
    return TrainResult(out_dir=out_dir, vocab_path=vocab_path,
                       final_checkpoint=final, losses_path=losses_path,
                       epoch_losses=epoch_losses)
