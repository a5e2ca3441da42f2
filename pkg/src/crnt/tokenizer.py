"""Subword vocabulary: pair-merge BPE over whitespace-split words with
word-initial marking.

Pieces are (string, word_initial) pairs; the same string may exist in both
variants with distinct ids. Id 0 is the blank symbol and id 1 the terminator
appended to context words; neither ever appears in an encoded transcript.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

BLANK_ID = 0
CTX_END_ID = 1
BLANK_PIECE = "<blank>"
CTX_END_PIECE = "<ctx_end>"


def normalize_text(s: str) -> str:
    """Collapse whitespace runs. Case is preserved."""
    return " ".join(s.split())


@dataclass
class Vocabulary:
    """Immutable after construction; encode/decode are pure."""

    pieces: list[str]
    word_initial: list[bool]
    _lookup: dict[tuple[str, bool], int] = field(init=False, repr=False)
    _max_piece_len: int = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.pieces) != len(self.word_initial):
            raise ValueError("pieces and word_initial flags differ in length")
        if self.pieces[:2] != [BLANK_PIECE, CTX_END_PIECE]:
            raise ValueError("ids 0 and 1 are reserved for blank and ctx_end")
        self._lookup = {}
        for i in range(2, len(self.pieces)):
            key = (self.pieces[i], self.word_initial[i])
            if key in self._lookup:
                raise ValueError(f"duplicate piece {key}")
            self._lookup[key] = i
        self._max_piece_len = max((len(p) for p in self.pieces[2:]), default=0)

    @property
    def size(self) -> int:
        return len(self.pieces)

    def _encode_word(self, word: str) -> list[int]:
        ids = []
        pos = 0
        while pos < len(word):
            initial = pos == 0
            limit = min(self._max_piece_len, len(word) - pos)
            for ln in range(limit, 0, -1):
                pid = self._lookup.get((word[pos : pos + ln], initial))
                if pid is not None:
                    ids.append(pid)
                    pos += ln
                    break
            else:
                where = "word-initial" if initial else "word-interior"
                raise ValueError(
                    f"character {word[pos]!r} not representable ({where}) in {word!r}"
                )
        return ids

    def encode(self, text: str) -> list[int]:
        """Greedy longest-match segmentation per whitespace-split word."""
        ids: list[int] = []
        for word in text.split():
            ids.extend(self._encode_word(word))
        return ids

    def encode_context_word(self, word: str) -> list[int]:
        """Context words carry a terminator unit after their pieces."""
        return self._encode_word(word) + [CTX_END_ID] if word else [CTX_END_ID]

    def decode(self, ids: list[int]) -> str:
        out: list[str] = []
        for i in ids:
            if not 0 <= i < self.size:
                raise ValueError(f"token id {i} out of range")
            if i in (BLANK_ID, CTX_END_ID):
                raise ValueError(f"reserved id {i} in decode")
            if self.word_initial[i] and out:
                out.append(" ")
            out.append(self.pieces[i])
        return "".join(out)

    # ------------------------------------------------------------------
    # persistence: one piece per line, `<id>\t<piece>\t<word_initial>`

    def dumps(self) -> str:
        lines = [
            f"{i}\t{p}\t{1 if f else 0}"
            for i, (p, f) in enumerate(zip(self.pieces, self.word_initial))
        ]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pieces: list[str] = []
        flags: list[bool] = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"vocabulary line {lineno}: expected 3 fields")
                idx, piece, flag = parts
                if int(idx) != len(pieces):
                    raise ValueError(f"vocabulary line {lineno}: ids must be contiguous")
                if flag not in ("0", "1"):
                    raise ValueError(f"vocabulary line {lineno}: bad flag {flag!r}")
                pieces.append(piece)
                flags.append(flag == "1")
        return cls(pieces, flags)

    def checksum(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def train_bpe(corpus: list[str], target_size: int) -> Vocabulary:
    """Greedy pair-merge BPE. Deterministic given corpus order: the most
    frequent adjacent pair merges first, ties broken by lexicographic pair
    order. Stops early if no pair occurs at least twice.

    target_size counts the two reserved ids, the single-character base
    pieces, and the merge budget on top.
    """
    words = Counter()
    for line in corpus:
        words.update(line.split())
    if not words:
        raise ValueError("empty corpus")

    # a word is a sequence of (string, word_initial) symbols
    seqs: dict[str, list[tuple[str, bool]]] = {
        w: [(ch, i == 0) for i, ch in enumerate(w)] for w in words
    }

    base: list[tuple[str, bool]] = []
    seen = set()
    for line in corpus:
        for w in line.split():
            for sym in seqs[w]:
                if sym not in seen:
                    seen.add(sym)
                    base.append(sym)

    budget = target_size - 2 - len(base)
    if budget < 0:
        raise ValueError(
            f"target_size {target_size} below {len(base)} base pieces + 2 reserved ids"
        )

    merged: list[tuple[str, bool]] = []
    for _ in range(budget):
        pairs = Counter()
        for w, count in words.items():
            seq = seqs[w]
            for a, b in zip(seq, seq[1:]):
                pairs[(a, b)] += count
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p[0][0], p[0][1], p[1][0], p[1][1]))
        if pairs[best] < 2:
            break
        (s1, f1), (s2, _) = best
        new_sym = (s1 + s2, f1)
        merged.append(new_sym)
        for w in seqs:
            seq = seqs[w]
            i = 0
            out = []
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best:
                    out.append(new_sym)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[w] = out

    pieces = [BLANK_PIECE, CTX_END_PIECE] + [s for s, _ in base] + [s for s, _ in merged]
    flags = [False, False] + [f for _, f in base] + [f for _, f in merged]
    return Vocabulary(pieces, flags)
