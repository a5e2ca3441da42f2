"""Synthetic corpus generation, binary feature files, dataset manifests,
and time/frequency masking.

The "audio" is a per-word prototype vector repeated for a few frames with
Gaussian noise on top. Entity words come in confusable pairs whose
prototypes sit closer than the noise floor, so acoustics alone cannot
separate them; the metadata can.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"FEAT"


# ---------------------------------------------------------------------------
# feature files


def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    n_t, n_f = features.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", n_t, n_f))
        f.write(features.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    n_t, n_f = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * n_t * n_f:
        raise ValueError(
            f"{path}: expected {12 + 4 * n_t * n_f} bytes for "
            f"{n_t}x{n_f}, found {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=12)
    return data.reshape(n_t, n_f).astype(np.float64)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    utterance_id: str
    video_id: str
    features_path: str
    transcript: str
    entity_word_indices: list[int]
    metadata_words: list[str]

    def to_json(self) -> str:
        return json.dumps(
            {
                "utterance_id": self.utterance_id,
                "video_id": self.video_id,
                "features_path": self.features_path,
                "transcript": self.transcript,
                "entity_word_indices": self.entity_word_indices,
                "metadata_words": self.metadata_words,
            }
        )


def write_manifest(path, records: list[ManifestRecord]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def load_manifest(path, check_features: bool = True) -> list[ManifestRecord]:
    """Parse and validate a manifest. Feature paths are kept relative to
    the manifest's directory; validation happens here, before any
    training or decoding touches the data."""
    base = Path(path).parent
    records = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                rec = ManifestRecord(
                    utterance_id=raw["utterance_id"],
                    video_id=raw["video_id"],
                    features_path=raw["features_path"],
                    transcript=raw["transcript"],
                    entity_word_indices=list(raw["entity_word_indices"]),
                    metadata_words=list(raw["metadata_words"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{ln}: malformed record: {e}") from e
            n_words = len(rec.transcript.split())
            for idx in rec.entity_word_indices:
                if not 0 <= idx < n_words:
                    raise ValueError(
                        f"{path}:{ln}: entity index {idx} out of range for "
                        f"{n_words}-word transcript"
                    )
            if check_features and not (base / rec.features_path).is_file():
                raise ValueError(
                    f"{path}:{ln}: missing feature file {rec.features_path}"
                )
            records.append(rec)
    return records


def features_for(manifest_path, rec: ManifestRecord) -> np.ndarray:
    return read_features(Path(manifest_path).parent / rec.features_path)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    """Materialized generation plan: word lists, prototypes, and the
    sampling policy. Built from scalars via `build`, which derives words
    and prototypes from the seed."""

    seed: int
    feat_dim: int
    common_words: list[str]
    entity_words: list[str]
    entity_pairs: list[tuple[str, str]]
    prototypes: dict[str, np.ndarray]
    sentence_len: tuple[int, int]
    frames_per_word: tuple[int, int]
    noise_sigma: float
    entity_utterance_rate: float
    rho: float
    related_words: tuple[int, int]
    distractors: tuple[int, int]
    segments_per_video: int = 1
    confusable_distance: float = 0.5
    min_separation: float = 2.0

    def validate(self) -> None:
        names = self.common_words + self.entity_words
        if len(set(names)) != len(names):
            raise ValueError("word surfaces must be unique")
        for w in names:
            proto = self.prototypes.get(w)
            if proto is None:
                raise ValueError(f"no prototype for {w!r}")
            if proto.shape != (self.feat_dim,):
                raise ValueError(
                    f"prototype for {w!r} has shape {proto.shape}, "
                    f"expected ({self.feat_dim},)"
                )
        confusable = {frozenset(p) for p in self.entity_pairs}
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                dist = float(np.linalg.norm(self.prototypes[a] - self.prototypes[b]))
                if frozenset((a, b)) in confusable:
                    if dist > self.confusable_distance:
                        raise ValueError(
                            f"confusable pair {a!r}/{b!r} too far apart: {dist:.3f}"
                        )
                elif dist < self.min_separation:
                    raise ValueError(
                        f"prototypes for {a!r} and {b!r} too close: {dist:.3f}"
                    )
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must be in [0, 1]")
        if self.sentence_len[0] < 1 or self.frames_per_word[0] < 1:
            raise ValueError("sentence and frame ranges must start at 1")
        if self.distractors[0] < 0 or self.related_words[0] < 0:
            raise ValueError("word-count ranges must start at 0")
        for lo, hi in (self.sentence_len, self.frames_per_word,
                       self.distractors, self.related_words):
            if hi < lo:
                raise ValueError("ranges must be nondecreasing")

    @classmethod
    def build(cls, seed: int, feat_dim: int = 16, n_common: int = 40,
              n_entity_pairs: int = 4, sentence_len=(3, 9),
              frames_per_word=(3, 6), noise_sigma: float = 0.5,
              entity_utterance_rate: float = 0.04, rho: float = 0.5,
              related_words=(3, 8), distractors=(5, 15),
              segments_per_video: int = 1,
              confusable_distance: float = 0.5,
              min_separation: float = 2.0) -> "SyntheticSpec":
        rng = np.random.default_rng(seed)
        common = _word_surfaces(rng, n_common, lengths=(3, 7))
        pair_bases = _word_surfaces(rng, n_entity_pairs, lengths=(4, 6),
                                    taken=set(common))
        pairs = []
        entity_words = []
        for base in pair_bases:
            # twin differs by a vowel swap, a Sean/Shaun style surface pair
            twin = _twin_surface(base, set(common) | set(entity_words) | {base})
            pairs.append((base, twin))
            entity_words.extend((base, twin))
        prototypes = _prototypes(rng, common + entity_words, pairs, feat_dim,
                                 confusable_distance, min_separation)
        spec = cls(
            seed=seed, feat_dim=feat_dim, common_words=common,
            entity_words=entity_words, entity_pairs=pairs,
            prototypes=prototypes, sentence_len=tuple(sentence_len),
            frames_per_word=tuple(frames_per_word), noise_sigma=noise_sigma,
            entity_utterance_rate=entity_utterance_rate, rho=rho,
            related_words=tuple(related_words),
            distractors=tuple(distractors),
            segments_per_video=segments_per_video,
            confusable_distance=confusable_distance,
            min_separation=min_separation,
        )
        spec.validate()
        return spec


# a reduced alphabet keeps the sentence-piece base inventory small so
# modest merge budgets still yield multi-character pieces
_LETTERS = "abdeiklmnoprstu"


def _word_surfaces(rng, count, lengths, taken=None):
    taken = set(taken or ())
    out = []
    while len(out) < count:
        n = int(rng.integers(lengths[0], lengths[1] + 1))
        w = "".join(_LETTERS[k] for k in rng.integers(0, len(_LETTERS), n))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _twin_surface(base: str, taken: set[str]) -> str:
    vowels = "aeiou"
    for i, ch in enumerate(base):
        if ch in vowels:
            for v in vowels:
                if v != ch:
                    twin = base[:i] + v + base[i + 1:]
                    if twin not in taken:
                        return twin
    for c in _LETTERS:
        twin = base[:-1] + c
        if twin != base and twin not in taken:
            return twin
    raise ValueError(f"cannot derive a twin surface for {base!r}")


def _prototypes(rng, words, pairs, feat_dim, confusable_distance,
                min_separation):
    """Random prototypes kept min_separation apart, except confusable
    twins which sit confusable_distance/2 away from their pair base.

    Bases are placed with margin min_separation + confusable_distance so
    a twin (at most confusable_distance/2 from its base) still clears
    min_separation from every other word. The sampling box widens if
    rejection sampling runs dry."""
    twins = {b: a for a, b in pairs}
    margin = min_separation + confusable_distance
    protos: dict[str, np.ndarray] = {}
    placed: list[np.ndarray] = []
    half_width = 2.0
    for w in words:
        if w in twins:
            base = protos[twins[w]]
            direction = rng.normal(size=feat_dim)
            direction /= np.linalg.norm(direction)
            protos[w] = base + 0.5 * confusable_distance * direction
            continue
        while True:
            for _ in range(2_000):
                cand = rng.uniform(-half_width, half_width, feat_dim)
                if all(np.linalg.norm(cand - p) >= margin for p in placed):
                    break
            else:
                half_width *= 1.5
                continue
            break
        protos[w] = cand
        placed.append(cand)
    return protos


def _render_features(spec: SyntheticSpec, words: list[str], rng) -> np.ndarray:
    chunks = []
    lo, hi = spec.frames_per_word
    for w in words:
        n = int(rng.integers(lo, hi + 1))
        block = np.tile(spec.prototypes[w], (n, 1))
        if spec.noise_sigma > 0:
            block = block + rng.normal(0.0, spec.noise_sigma, block.shape)
        chunks.append(block)
    return np.concatenate(chunks, axis=0)


def _sample_utterance(spec: SyntheticSpec, rng, force_entity: bool,
                      counts: dict[str, int], cap: int | None):
    """(words, entity_indices). At most one entity word per utterance,
    placed at a random position; `cap` bounds how many utterances any one
    entity word may appear in (None for no bound)."""
    n = int(rng.integers(spec.sentence_len[0], spec.sentence_len[1] + 1))
    words = [spec.common_words[k]
             for k in rng.integers(0, len(spec.common_words), n)]
    entity_idx = []
    if force_entity or rng.random() < spec.entity_utterance_rate:
        eligible = [w for w in spec.entity_words
                    if cap is None or counts.get(w, 0) < cap]
        if eligible:
            pos = int(rng.integers(0, n))
            word = eligible[int(rng.integers(0, len(eligible)))]
            words[pos] = word
            counts[word] = counts.get(word, 0) + 1
            entity_idx = [pos]
    return words, entity_idx


def _sample_metadata(spec: SyntheticSpec, rng, entity_surfaces: list[str],
                     transcript_words: set[str]) -> list[str]:
    """Metadata for one video, shaped like title/description text. With
    probability rho the video's metadata is related: it names the video's
    entity words and a sample of its common words, the way a title tends
    to repeat what is said. Otherwise it is unrelated. Either way it
    carries distractor words that appear in none of the video's
    transcripts, so attention always has irrelevant words to ignore.

    Training a model to exploit metadata needs this transcript overlap:
    entity words alone are too rare to teach the copy behavior."""
    meta = []
    if rng.random() < spec.rho:
        meta.extend(dict.fromkeys(entity_surfaces))
        commons = sorted(transcript_words - set(spec.entity_words))
        k = min(len(commons), int(rng.integers(spec.related_words[0],
                                               spec.related_words[1] + 1)))
        picks = rng.permutation(len(commons))[:k]
        meta.extend(commons[j] for j in sorted(picks))
    n_distract = int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))
    pool = [w for w in spec.common_words if w not in transcript_words]
    if pool:
        picks = rng.permutation(len(pool))[:n_distract]
        meta.extend(pool[k] for k in sorted(picks))
    order = rng.permutation(len(meta))
    return [meta[k] for k in order]


def generate_split(spec: SyntheticSpec, n_utts: int, split: str,
                   out_dir, force_entity: bool) -> list[ManifestRecord]:
    """One split's records plus feature files under out_dir/features.
    Training caps each entity word at 0.5% of utterances; the test split
    is uncapped (every utterance carries an entity)."""
    rng = np.random.default_rng([spec.seed, 1 if split == "train" else 2])
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    cap = None if force_entity else int(0.005 * n_utts)
    counts: dict[str, int] = {}
    records = []
    i = 0
    video = 0
    while i < n_utts:
        segments = []
        for _ in range(min(spec.segments_per_video, n_utts - i)):
            words, entity_idx = _sample_utterance(spec, rng, force_entity,
                                                  counts, cap)
            segments.append((words, entity_idx))
        entity_surfaces = [words[k] for words, idx in segments for k in idx]
        in_transcripts = {w for words, _ in segments for w in words}
        meta = _sample_metadata(spec, rng, entity_surfaces, in_transcripts)
        for words, entity_idx in segments:
            uid = f"{split}-{i:06d}"
            rel = f"features/{uid}.feat"
            write_features(out_dir / rel, _render_features(spec, words, rng))
            records.append(ManifestRecord(
                utterance_id=uid,
                video_id=f"{split}-vid-{video:06d}",
                features_path=rel,
                transcript=" ".join(words),
                entity_word_indices=entity_idx,
                metadata_words=meta,
            ))
            i += 1
        video += 1
    return records


def generate_corpus(spec: SyntheticSpec, n_train: int, n_test: int,
                    out_dir) -> tuple[Path, Path]:
    """Writes train.jsonl, test.jsonl, and all feature files. Training
    utterances carry entity words at the capped low rate; every test
    utterance carries one, with related metadata (naming the entity) with
    probability rho, so the test set splits into metadata-matched and
    metadata-unrelated halves."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = generate_split(spec, n_train, "train", out_dir, force_entity=False)
    test = generate_split(spec, n_test, "test", out_dir, force_entity=True)
    train_path = out_dir / "train.jsonl"
    test_path = out_dir / "test.jsonl"
    write_manifest(train_path, train)
    write_manifest(test_path, test)
    return train_path, test_path


# ---------------------------------------------------------------------------
# masking


def spec_mask(features: np.ndarray, n_freq_masks: int, max_freq_width: int,
              n_time_masks: int, max_time_width: int, rng) -> np.ndarray:
    """Zero out random frequency columns and time rows, SpecAugment style.
    Returns a copy; widths are drawn uniformly in [0, max]."""
    n_t, n_f = features.shape
    if max_freq_width > n_f:
        raise ValueError(f"max_freq_width {max_freq_width} > feature dim {n_f}")
    if max_time_width > n_t:
        raise ValueError(f"max_time_width {max_time_width} > frame count {n_t}")
    out = features.copy()
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, max_freq_width + 1))
        start = int(rng.integers(0, n_f - w + 1))
        out[:, start:start + w] = 0.0
    for _ in range(n_time_masks):
        w = int(rng.integers(0, max_time_width + 1))
        start = int(rng.integers(0, n_t - w + 1))
        out[start:start + w, :] = 0.0
    return out
