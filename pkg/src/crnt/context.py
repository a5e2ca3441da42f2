"""Metadata conditioning: surface-word normalization, context-word
embeddings, location-aware attention over the context set, and the
prefix-matching bias vector fed to the joiner.

The attention state is simply the previous step's weight vector alpha;
the bias state is a trie cursor tracking the token sequence of the
current partial word. Both are per-hypothesis values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, custom_op
from .tokenizer import BLANK_ID, Vocabulary

_URL_MARKERS = ("http://", "https://", "www.")


def normalize_metadata(lines: Sequence[str]) -> list[str]:
    """Whitespace-tokenize metadata strings, drop hyperlink-looking tokens,
    add a lowercase variant for any token carrying uppercase, and dedupe
    preserving first-seen order. Word order carries no meaning downstream.

    The hyperlink markers are matched case-insensitively; otherwise the
    lowered variant of a kept token could itself be a dropped token and
    re-applying the function would change its own output."""
    out: list[str] = []
    seen: set[str] = set()
    for line in lines:
        for token in line.split():
            low = token.lower()
            if any(m in low for m in _URL_MARKERS):
                continue
            variants = (token, low) if any(c.isupper() for c in token) else (token,)
            for v in variants:
                if v not in seen:
                    seen.add(v)
                    out.append(v)
    return out


# ---------------------------------------------------------------------------
# context set and bias trie


@dataclass
class ContextWord:
    surface: str
    tokens: list[int]  # canonical tokenization, terminator last


class _TrieNode:
    __slots__ = ("children", "continuations")

    def __init__(self):
        self.children: dict[int, _TrieNode] = {}
        # (word index, that word's next token after this prefix)
        self.continuations: list[tuple[int, int]] = []


class BiasTrie:
    """Prefix trie over each context word's token sequence, terminator
    excluded. Nodes hold the continuation set used by the bias vector."""

    def __init__(self, token_seqs: Sequence[Sequence[int]]):
        self.root = _TrieNode()
        for i, toks in enumerate(token_seqs):
            node = self.root
            for t in toks:
                node.continuations.append((i, t))
                node = node.children.setdefault(t, _TrieNode())

    def initial_cursor(self) -> "BiasCursor":
        return BiasCursor(self.root, at_word_boundary=True)

    def advance(self, cur: "BiasCursor", emitted: int, vocab: Vocabulary) -> "BiasCursor":
        """Track the partial word: a word-initial token restarts matching
        from the root; anything else descends (or stays dead)."""
        if emitted == BLANK_ID:
            raise ValueError("blank must not reach the bias cursor")
        if vocab.word_initial[emitted]:
            return BiasCursor(self.root.children.get(emitted), at_word_boundary=False)
        if cur.node is None:
            return BiasCursor(None, at_word_boundary=False)
        return BiasCursor(cur.node.children.get(emitted), at_word_boundary=False)


@dataclass(frozen=True)
class BiasCursor:
    """Immutable; beam hypotheses share and fork cursors freely.
    node is None once matching has failed (dead until the next
    word-initial token resets it)."""

    node: _TrieNode | None
    at_word_boundary: bool

    @property
    def dead(self) -> bool:
        return self.node is None


class ContextSet:
    """The words of one utterance's metadata, order fixed at ingestion,
    plus the shared trie. Immutable after construction; embeddings are
    computed per forward pass because they depend on current weights."""

    def __init__(self, words: list[ContextWord], vocab: Vocabulary | None = None):
        self.words = words
        self.vocab = vocab  # needed by cursor advances (word-initial flags)
        self.trie = BiasTrie([w.tokens[:-1] for w in words])

    @classmethod
    def build(cls, surfaces: Sequence[str], vocab: Vocabulary,
              skip_unencodable: bool = False) -> "ContextSet":
        """skip_unencodable drops words the vocabulary cannot spell; such
        words could never be emitted, so no bias is lost by dropping them."""
        words = []
        for s in surfaces:
            try:
                words.append(ContextWord(s, vocab.encode_context_word(s)))
            except ValueError:
                if not skip_unencodable:
                    raise
        return cls(words, vocab=vocab)

    def __len__(self) -> int:
        return len(self.words)


def _active_continuations(cur: BiasCursor, ctx: ContextSet,
                          activate_at_boundary: bool) -> list[tuple[int, int]]:
    if cur.node is None:
        return []
    if cur.node is ctx.trie.root:
        # empty prefix: nothing matches unless boundary activation is on
        if cur.at_word_boundary and activate_at_boundary:
            return cur.node.continuations
        return []
    return cur.node.continuations


def bias_vector(cur: BiasCursor, alpha: Tensor | None, ctx: ContextSet,
                vocab_size: int, activate_at_boundary: bool = False) -> Tensor:
    """One scalar per vocabulary entry: the attention mass (or a count, when
    alpha is None) of context words whose next token after the matched
    prefix is that entry. Contributions accumulate in word-index order so
    the result is bit-reproducible."""
    conts = _active_continuations(cur, ctx, activate_at_boundary)
    data = np.zeros(vocab_size)
    if alpha is None:
        for _, k in conts:
            data[k] += 1.0
        return Tensor(data)
    if alpha.shape != (len(ctx),):
        raise ValueError(f"alpha shape {alpha.shape} != ({len(ctx)},)")
    for i, k in conts:
        data[k] += alpha.data[i]

    def back(g):
        ga = np.zeros_like(alpha.data)
        for i, k in conts:
            ga[i] += g[k]
        return (ga,)

    return custom_op(data, (alpha,), back)


# ---------------------------------------------------------------------------
# location-aware attention


class AttentionParams:
    """Projections into the shared attention space: pred holds the current
    predictor output, emb each context embedding, loc the convolved previous
    weights; score reduces the tanh-combined space to one energy per word."""

    def __init__(self, rng: np.random.Generator, att_dim: int, pred_dim: int,
                 emb_dim: int, conv_channels: int = 2, kernel_size: int = 1):
        self.pred_proj = T.uniform_init(rng, (att_dim, pred_dim), fan_in=pred_dim)
        self.emb_proj = T.uniform_init(rng, (att_dim, emb_dim), fan_in=emb_dim)
        self.loc_proj = T.uniform_init(rng, (att_dim, conv_channels), fan_in=conv_channels)
        self.score = T.uniform_init(rng, (att_dim,), fan_in=att_dim)
        self.bias = T.zeros_init((att_dim,))
        self.conv_kernel = T.uniform_init(rng, (conv_channels, kernel_size),
                                          fan_in=kernel_size)
        self._conv_zero = Tensor(np.zeros(conv_channels))

    def parameters(self, prefix: str = "att") -> dict[str, Tensor]:
        return {
            f"{prefix}.pred_proj": self.pred_proj,
            f"{prefix}.emb_proj": self.emb_proj,
            f"{prefix}.loc_proj": self.loc_proj,
            f"{prefix}.score": self.score,
            f"{prefix}.bias": self.bias,
            f"{prefix}.conv_kernel": self.conv_kernel,
        }


def initial_alpha(n: int) -> Tensor:
    """Uniform start for the location-aware recursion."""
    if n < 1:
        raise ValueError("attention needs at least one context word")
    return Tensor(np.full(n, 1.0 / n))


def embedding_scores(params: AttentionParams, embeddings: Tensor) -> Tensor:
    """(N, 2h) -> (N, att). Constant across u for one utterance, so callers
    compute it once and thread it through attention_step."""
    return T.matmul(embeddings, T.transpose(params.emb_proj))


def attention_step(params: AttentionParams, h_pred: Tensor, embeddings: Tensor,
                   alpha_prev: Tensor, emb_scores: Tensor | None = None) -> Tensor:
    """One attention update: convolve the previous weights into per-word
    location features, score every word against the predictor state, and
    renormalize. Returns alpha_u, which is also the next step's state."""
    n = embeddings.shape[0]
    if n == 0:
        raise ValueError("attention_step on an empty context set")
    if alpha_prev.shape != (n,):
        raise ValueError(f"alpha_prev shape {alpha_prev.shape} != ({n},)")
    if emb_scores is None:
        emb_scores = embedding_scores(params, embeddings)
    loc = T.conv1d_same(alpha_prev, params.conv_kernel, params._conv_zero)  # (N, ch)
    combined = T.add(
        T.add(emb_scores, T.matmul(loc, T.transpose(params.loc_proj))),
        T.add(T.matmul(params.pred_proj, h_pred), params.bias),
    )
    energies = T.matmul(T.tanh(combined), params.score)  # (N,)
    return T.softmax(energies)


def context_vector(alpha: Tensor | None, embeddings: Tensor | None, dim: int) -> Tensor:
    """Attention-weighted sum of context embeddings; the empty context set
    contributes an all-zero vector."""
    if alpha is None or embeddings is None or embeddings.shape[0] == 0:
        return Tensor(np.zeros(dim))
    if embeddings.shape[1] != dim:
        raise ValueError(f"embedding dim {embeddings.shape[1]} != {dim}")
    return T.matmul(alpha, embeddings)
