"""Word error rate, entity error rate, context-word precision/recall, and
the metadata-overlap split of a test set."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class EvalSample:
    utterance_id: str
    reference: list[str]
    hypothesis: list[str]
    entity_flags: list[bool]
    metadata_words: set[str] = field(default_factory=set)
    video_id: str = ""

    def __post_init__(self):
        if len(self.entity_flags) != len(self.reference):
            raise ValueError(
                f"entity_flags length {len(self.entity_flags)} != "
                f"reference length {len(self.reference)}"
            )
        self.metadata_words = set(self.metadata_words)


def align(ref: list[str], hyp: list[str]) -> list[tuple[str, int | None, int | None]]:
    """Minimum-edit alignment with unit costs; ops are (kind, ref_idx,
    hyp_idx) with None on the side an insertion/deletion does not consume.
    Ties resolve match > sub > del > ins, scanning left to right."""
    n, m = len(ref), len(hyp)
    # dp[i][j] = distance between ref[i:] and hyp[j:], so the walk below
    # can pick ops front to back
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for j in range(m + 1):
        dp[n][j] = m - j
    for i in range(n - 1, -1, -1):
        dp[i][m] = n - i
        row, nxt = dp[i], dp[i + 1]
        for j in range(m - 1, -1, -1):
            diag = nxt[j + 1] + (ref[i] != hyp[j])
            row[j] = min(diag, nxt[j] + 1, row[j + 1] + 1)
    out = []
    i = j = 0
    while i < n or j < m:
        if i < n and j < m and ref[i] == hyp[j] and dp[i][j] == dp[i + 1][j + 1]:
            out.append(("match", i, j))
            i, j = i + 1, j + 1
        elif i < n and j < m and ref[i] != hyp[j] and dp[i][j] == dp[i + 1][j + 1] + 1:
            out.append(("sub", i, j))
            i, j = i + 1, j + 1
        elif i < n and dp[i][j] == dp[i + 1][j] + 1:
            out.append(("del", i, None))
            i += 1
        else:
            out.append(("ins", None, j))
            j += 1
    return out


def edit_counts(alignment) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions)."""
    s = sum(1 for op, _, _ in alignment if op == "sub")
    d = sum(1 for op, _, _ in alignment if op == "del")
    i = sum(1 for op, _, _ in alignment if op == "ins")
    return s, d, i


def _pooled(samples):
    for sample in samples:
        yield sample, align(sample.reference, sample.hypothesis)


def wer(samples: list[EvalSample]) -> float:
    """Corpus-pooled (S+D+I)/N."""
    s = d = i = n = 0
    for sample, alignment in _pooled(samples):
        ds, dd, di = edit_counts(alignment)
        s, d, i, n = s + ds, d + dd, i + di, n + len(sample.reference)
    if n == 0:
        raise ValueError("wer needs at least one nonempty reference")
    return (s + d + i) / n


def wer_ne(samples: list[EvalSample]) -> float | None:
    """Error rate over entity-flagged reference words: an entity counts as
    an error when its aligned op is a substitution or deletion; insertions
    have no reference position and are excluded. None when the samples
    contain no entities."""
    errors = total = 0
    for sample, alignment in _pooled(samples):
        for op, ri, _ in alignment:
            if ri is None or not sample.entity_flags[ri]:
                continue
            total += 1
            if op in ("sub", "del"):
                errors += 1
    if total == 0:
        return None
    return errors / total


def context_counts(samples: list[EvalSample]) -> tuple[int, int, int]:
    """(TP, FP, FN) for metadata words, counted per aligned occurrence.
    A reference occurrence is a TP when its position pair is a match,
    otherwise an FN; a hypothesis occurrence on a sub or an insertion is
    an FP."""
    tp = fp = fn = 0
    for sample, alignment in _pooled(samples):
        meta = sample.metadata_words
        if not meta:
            continue
        for op, ri, hi in alignment:
            if ri is not None and sample.reference[ri] in meta:
                if op == "match":
                    tp += 1
                else:
                    fn += 1
            if hi is not None and op != "match" and sample.hypothesis[hi] in meta:
                fp += 1
    return tp, fp, fn


def context_pr(samples: list[EvalSample]) -> tuple[float | None, float | None]:
    """(precision, recall); a ratio is None when its denominator is zero,
    in particular both are None when no sample has metadata."""
    tp, fp, fn = context_counts(samples)
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    return precision, recall


def split_common(samples: list[EvalSample]) -> tuple[list[EvalSample], list[EvalSample]]:
    """(CommonNonZero, CommonZero): a sample is CommonNonZero when its
    reference shares at least one exact word with its metadata."""
    nonzero, zero = [], []
    for sample in samples:
        if set(sample.reference) & sample.metadata_words:
            nonzero.append(sample)
        else:
            zero.append(sample)
    return nonzero, zero


@dataclass
class MetricsReport:
    split: str
    n_samples: int
    wer: float
    wer_ne: float | None
    context_precision: float | None
    context_recall: float | None
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int
    entity_errors: int
    entity_words: int
    context_tp: int
    context_fp: int
    context_fn: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def compute_report(samples: list[EvalSample], split: str = "all") -> MetricsReport:
    s = d = i = n = 0
    ent_err = ent_n = 0
    for sample, alignment in _pooled(samples):
        ds, dd, di = edit_counts(alignment)
        s, d, i, n = s + ds, d + dd, i + di, n + len(sample.reference)
        for op, ri, _ in alignment:
            if ri is not None and sample.entity_flags[ri]:
                ent_n += 1
                if op in ("sub", "del"):
                    ent_err += 1
    if n == 0:
        raise ValueError("metrics need at least one nonempty reference")
    tp, fp, fn = context_counts(samples)
    return MetricsReport(
        split=split,
        n_samples=len(samples),
        wer=(s + d + i) / n,
        wer_ne=ent_err / ent_n if ent_n > 0 else None,
        context_precision=tp / (tp + fp) if tp + fp > 0 else None,
        context_recall=tp / (tp + fn) if tp + fn > 0 else None,
        substitutions=s,
        deletions=d,
        insertions=i,
        ref_words=n,
        entity_errors=ent_err,
        entity_words=ent_n,
        context_tp=tp,
        context_fp=fp,
        context_fn=fn,
    )
