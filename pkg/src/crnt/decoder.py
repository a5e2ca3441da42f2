"""Greedy and beam inference with per-hypothesis contextual state.

Hypotheses carry everything that depends on the emitted prefix (predictor
state, attention weights, bias cursor, cached joiner inputs), so forking
one is cheap and replaying a token sequence from scratch reproduces the
cached state bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .context import ContextSet, attention_step, bias_vector, initial_alpha
from .model import Model
from .recurrent import START
from .tokenizer import BLANK_ID, CTX_END_ID
from .transducer import joiner, output_distribution


@dataclass(frozen=True)
class Hypothesis:
    """One decoding prefix. `alpha` is the current attention state, the
    cached h_pred/c_u/b_u are the joiner inputs for the next emission."""

    tokens: tuple[int, ...]
    log_score: float
    pred_state: tuple
    h_pred: Tensor
    alpha: Tensor | None
    c_u: Tensor | None
    b_u: Tensor | None
    cursor: object | None


@dataclass
class AttentionTrace:
    """Attention weights per emitted unit, one column per context word."""

    weights: np.ndarray
    pieces: list[str]
    surfaces: list[str]


class _UttDecoder:
    """Per-utterance bundle: context embeddings are computed once, then
    every hypothesis advance reuses them."""

    def __init__(self, model: Model, ctx: ContextSet | None):
        self.model = model
        self.ctx = ctx
        self.n_ctx = len(ctx) if ctx is not None else 0
        self.vocab = ctx.vocab if ctx is not None else None
        mode = model.mode
        self.embs = None
        self.escores = None
        self.zero_c = None
        self.zero_b = None
        if mode.uses_attention:
            if self.n_ctx > 0:
                self.embs, self.escores = model.embed_context(ctx)
            else:
                self.zero_c = Tensor(np.zeros(model.context_dim))
        if mode.uses_bias and self.n_ctx == 0:
            self.zero_b = Tensor(np.zeros(model.cfg.vocab_size))
        self.labels = [k for k in range(model.cfg.vocab_size)
                       if k not in (BLANK_ID, CTX_END_ID)]
        self.trace_surfaces = ([w.surface for w in ctx.words]
                               if mode.uses_attention and self.n_ctx > 0 else [])

    def piece_label(self, token: int) -> str:
        if self.vocab is not None:
            return self.vocab.pieces[token]
        return f"<{token}>"

    def trace_row(self, hyp: Hypothesis) -> np.ndarray:
        if hyp.alpha is not None:
            return hyp.alpha.data.copy()
        return np.zeros(len(self.trace_surfaces))

    def _contextual(self, h_pred: Tensor, alpha_prev, cursor, token):
        """(alpha, c_u, b_u, cursor) after consuming `token` (None for the
        start position)."""
        model = self.model
        alpha = c_u = b_u = None
        if model.mode.uses_attention:
            if self.n_ctx > 0:
                alpha = attention_step(model.attention, h_pred, self.embs,
                                       alpha_prev, self.escores)
                c_u = T.matmul(alpha, self.embs)
            else:
                c_u = self.zero_c
        if model.mode.uses_bias:
            if self.n_ctx > 0:
                if token is not None:
                    cursor = self.ctx.trie.advance(cursor, token, self.ctx.vocab)
                b_u = bias_vector(cursor, alpha, self.ctx,
                                  model.cfg.vocab_size,
                                  activate_at_boundary=model.cfg.bias_at_word_start)
            else:
                b_u = self.zero_b
        return alpha, c_u, b_u, cursor

    def initial(self) -> Hypothesis:
        model = self.model
        h, state = model.predictor.step(START, model.predictor.initial_state())
        alpha_prev = initial_alpha(self.n_ctx) if (
            model.mode.uses_attention and self.n_ctx > 0) else None
        cursor = self.ctx.trie.initial_cursor() if (
            model.mode.uses_bias and self.n_ctx > 0) else None
        alpha, c_u, b_u, cursor = self._contextual(h, alpha_prev, cursor, None)
        return Hypothesis(tokens=(), log_score=0.0, pred_state=tuple(state),
                          h_pred=h, alpha=alpha, c_u=c_u, b_u=b_u, cursor=cursor)

    def advance(self, hyp: Hypothesis, token: int, log_score: float) -> Hypothesis:
        h, state = self.model.predictor.step(token, list(hyp.pred_state))
        alpha, c_u, b_u, cursor = self._contextual(h, hyp.alpha, hyp.cursor, token)
        return Hypothesis(tokens=hyp.tokens + (token,), log_score=log_score,
                          pred_state=tuple(state), h_pred=h, alpha=alpha,
                          c_u=c_u, b_u=b_u, cursor=cursor)

    def log_dist(self, hyp: Hypothesis, enc_row: Tensor) -> np.ndarray:
        z = joiner(self.model.joiner, enc_row, hyp.h_pred,
                   c_u=hyp.c_u, b_u=hyp.b_u)
        return output_distribution(self.model.joiner, z).data


def _encoder_rows(model: Model, features) -> list[Tensor]:
    enc = model.encoder.run(Tensor(np.asarray(features, dtype=np.float64)))
    dim = enc.data.shape[1]
    return [T.reshape(T.narrow(enc, 0, t, 1), (dim,))
            for t in range(enc.data.shape[0])]


def _pick(dist: np.ndarray) -> int:
    """Argmax over emittable ids; np.argmax's first-index rule gives the
    required tie order (blank, then lowest id). Reserved non-blank ids are
    never emitted."""
    d = dist.copy()
    d[CTX_END_ID] = -np.inf
    return int(np.argmax(d))


def _greedy(model: Model, features, ctx: ContextSet | None,
            max_symbols_per_step: int) -> tuple[Hypothesis, AttentionTrace]:
    if max_symbols_per_step < 1:
        raise ValueError("max_symbols_per_step must be >= 1")
    with T.no_grad():
        dec = _UttDecoder(model, ctx)
        hyp = dec.initial()
        rows: list[np.ndarray] = []
        pieces: list[str] = []
        for enc_row in _encoder_rows(model, features):
            emitted = 0
            while True:
                dist = dec.log_dist(hyp, enc_row)
                if emitted == max_symbols_per_step:
                    # cap: take the blank arc regardless of the argmax so
                    # the score stays a genuine lattice path sum
                    hyp = replace(hyp, log_score=hyp.log_score + dist[BLANK_ID])
                    break
                k = _pick(dist)
                if k == BLANK_ID:
                    hyp = replace(hyp, log_score=hyp.log_score + dist[BLANK_ID])
                    break
                rows.append(dec.trace_row(hyp))
                pieces.append(dec.piece_label(k))
                hyp = dec.advance(hyp, k, hyp.log_score + dist[k])
                emitted += 1
        matrix = (np.stack(rows) if rows
                  else np.zeros((0, len(dec.trace_surfaces))))
        return hyp, AttentionTrace(matrix, pieces, dec.trace_surfaces)


def greedy_decode(model: Model, features, ctx: ContextSet | None = None,
                  max_symbols_per_step: int = 5) -> tuple[list[int], AttentionTrace]:
    """Frame-synchronous argmax decoding. At each frame, emit the argmax
    label and stay (up to the cap); on blank, move to the next frame."""
    hyp, trace = _greedy(model, features, ctx, max_symbols_per_step)
    return list(hyp.tokens), trace


def trace_for_tokens(model: Model, ctx: ContextSet | None,
                     tokens: list[int]) -> AttentionTrace:
    """Attention trace a given token sequence would produce: row u holds
    the weights that were active when unit u was emitted."""
    with T.no_grad():
        dec = _UttDecoder(model, ctx)
        hyp = dec.initial()
        rows, pieces = [], []
        for k in tokens:
            rows.append(dec.trace_row(hyp))
            pieces.append(dec.piece_label(k))
            hyp = dec.advance(hyp, k, 0.0)
        matrix = (np.stack(rows) if rows
                  else np.zeros((0, len(dec.trace_surfaces))))
        return AttentionTrace(matrix, pieces, dec.trace_surfaces)


def replay_hypothesis(model: Model, ctx: ContextSet | None,
                      tokens) -> Hypothesis:
    """Rebuild the decoder state a token sequence leads to, from scratch.
    Scores are not replayed, only state."""
    with T.no_grad():
        dec = _UttDecoder(model, ctx)
        hyp = dec.initial()
        for k in tokens:
            hyp = dec.advance(hyp, k, 0.0)
        return hyp


def beam_search(model: Model, features, ctx: ContextSet | None = None,
                beam_width: int = 10,
                max_symbols_per_step: int = 5) -> list[tuple[list[int], float]]:
    """Time-synchronous beam search. Per frame, hypotheses expand through
    non-blank emissions until each takes blank (or hits the cap); identical
    token sequences merge by log-sum-exp. Returns (tokens, log_score)
    ranked by score, no length normalization.

    Each pruning round ranks pending expansions and frame finishers
    together, so beam_width=1 commits to the local argmax exactly like
    greedy decoding, ties resolved toward blank then the lowest token id.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_symbols_per_step < 1:
        raise ValueError("max_symbols_per_step must be >= 1")
    with T.no_grad():
        dec = _UttDecoder(model, ctx)
        init = dec.initial()
        kept: dict[tuple[int, ...], Hypothesis] = {(): init}
        for enc_row in _encoder_rows(model, features):
            live = kept
            counters = {tokens: 0 for tokens in live}
            finished: dict[tuple[int, ...], tuple[float, Hypothesis]] = {}
            while live:
                # tokens -> (merged score, parent hyp, emitted token, counter)
                cands: dict[tuple[int, ...], tuple[float, Hypothesis, int, int]] = {}
                for tokens, hyp in live.items():
                    dist = dec.log_dist(hyp, enc_row)
                    count = counters[tokens]
                    _merge_finished(finished, tokens,
                                    hyp.log_score + dist[BLANK_ID], hyp)
                    if count >= max_symbols_per_step:
                        continue
                    for k in dec.labels:
                        seq = tokens + (k,)
                        score = hyp.log_score + dist[k]
                        prev = cands.get(seq)
                        if prev is None:
                            cands[seq] = (score, hyp, k, count + 1)
                        else:
                            cands[seq] = (np.logaddexp(prev[0], score),
                                          prev[1], prev[2],
                                          max(prev[3], count + 1))
                ranked = sorted(
                    [(-s, len(seq), seq, 0) for seq, (s, _) in finished.items()]
                    + [(-c[0], len(seq), seq, 1) for seq, c in cands.items()]
                )[:beam_width]
                surviving = {seq for _, _, seq, tag in ranked if tag == 0}
                finished = {seq: finished[seq] for seq in surviving}
                live = {}
                for _, _, seq, tag in ranked:
                    if tag == 1:
                        score, parent, tok, count = cands[seq]
                        live[seq] = dec.advance(parent, tok, score)
                        counters[seq] = count
            kept = {seq: replace(hyp, log_score=score)
                    for seq, (score, hyp) in finished.items()}
        order = sorted(kept.items(),
                       key=lambda kv: (-kv[1].log_score, len(kv[0]), kv[0]))
        return [(list(seq), hyp.log_score) for seq, hyp in order]


def _merge_finished(finished, tokens, score, hyp):
    prev = finished.get(tokens)
    if prev is None:
        finished[tokens] = (score, hyp)
    else:
        finished[tokens] = (np.logaddexp(prev[0], score), prev[1])


def dump_attention_trace(trace: AttentionTrace, sink) -> None:
    """CSV with one row per emitted unit: the decoded piece, then one
     6-decimal weight per context word."""
    if isinstance(sink, (str, Path)):
        with open(sink, "w", newline="") as f:
            _write_trace(trace, f)
    else:
        _write_trace(trace, sink)


def _write_trace(trace: AttentionTrace, f) -> None:
    writer = csv.writer(f)
    writer.writerow(["piece"] + list(trace.surfaces))
    for piece, row in zip(trace.pieces, trace.weights):
        writer.writerow([piece] + [f"{w:.6f}" for w in row])


def load_attention_trace(source) -> AttentionTrace:
    """Parse a trace CSV back; inverse of dump up to 6-decimal rounding."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as f:
            return _read_trace(f)
    return _read_trace(source)


def _read_trace(f) -> AttentionTrace:
    reader = csv.reader(f)
    header = next(reader)
    surfaces = header[1:]
    pieces, rows = [], []
    for rec in reader:
        pieces.append(rec[0])
        rows.append([float(x) for x in rec[1:]])
    matrix = np.array(rows) if rows else np.zeros((0, len(surfaces)))
    return AttentionTrace(matrix.reshape(len(pieces), len(surfaces)),
                          pieces, surfaces)
