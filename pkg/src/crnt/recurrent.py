"""LSTM cells and stacked recurrent runs.

Covers the three recurrent components: the bidirectional audio encoder with
time subsampling, the unidirectional text predictor, and the bidirectional
extractor that turns a context word's token sequence into a fixed embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, _sigmoid, custom_op

START = -1  # predictor input before any emission; embeds a reserved row


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor


@dataclass
class LstmParams:
    w_ih: Tensor  # (4h, in), gate order: input, forget, cell, output
    w_hh: Tensor  # (4h, h)
    bias: Tensor  # (4h,)

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_ih": self.w_ih, f"{prefix}.w_hh": self.w_hh,
                f"{prefix}.bias": self.bias}


def init_lstm(rng: np.random.Generator, input_dim: int, hidden: int) -> LstmParams:
    return LstmParams(
        w_ih=T.uniform_init(rng, (4 * hidden, input_dim), fan_in=input_dim),
        w_hh=T.uniform_init(rng, (4 * hidden, hidden), fan_in=hidden),
        bias=T.zeros_init((4 * hidden,)),
    )


def zero_state(hidden: int, batch: int | None = None) -> LstmState:
    shape = (hidden,) if batch is None else (batch, hidden)
    return LstmState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


# ---------------------------------------------------------------------------
# cell update. The fused ops below compute all four gate legs in numpy with a
# hand-written backward; _lstm_step_primitive is the same math spelled out in
# graph primitives and exists as the in-repo oracle for the fused path.


def _cell_new(gates: Tensor, c_prev: Tensor) -> Tensor:
    h = gates.shape[-1] // 4
    gd = gates.data
    i = _sigmoid(gd[..., :h])
    f = _sigmoid(gd[..., h : 2 * h])
    g = np.tanh(gd[..., 2 * h : 3 * h])
    c_new = f * c_prev.data + i * g

    def back(grad):
        dg = np.zeros_like(gd)
        dg[..., :h] = grad * g * i * (1.0 - i)
        dg[..., h : 2 * h] = grad * c_prev.data * f * (1.0 - f)
        dg[..., 2 * h : 3 * h] = grad * i * (1.0 - g * g)
        return dg, grad * f

    return custom_op(c_new, (gates, c_prev), back)


def _hidden_out(gates: Tensor, c_new: Tensor) -> Tensor:
    h = gates.shape[-1] // 4
    o = _sigmoid(gates.data[..., 3 * h :])
    tc = np.tanh(c_new.data)

    def back(grad):
        dg = np.zeros_like(gates.data)
        dg[..., 3 * h :] = grad * tc * o * (1.0 - o)
        return dg, grad * o * (1.0 - tc * tc)

    return custom_op(o * tc, (gates, c_new), back)


def _gates(params: LstmParams, x: Tensor, h: Tensor) -> Tensor:
    if x.ndim == 1:
        return T.add(T.add(T.matmul(params.w_ih, x), T.matmul(params.w_hh, h)),
                     params.bias)
    # batched rows: (B, in) @ (in, 4h) + (B, h) @ (h, 4h) + (4h,)
    return T.add(
        T.add(T.matmul(x, T.transpose(params.w_ih)), T.matmul(h, T.transpose(params.w_hh))),
        params.bias,
    )


def lstm_step(params: LstmParams, x: Tensor, state: LstmState) -> LstmState:
    """One step: sigmoid input/forget/output gates, tanh cell candidate."""
    if x.shape[-1] != params.input_size:
        raise ValueError(f"lstm input dim {x.shape[-1]} != {params.input_size}")
    if state.h.shape[-1] != params.hidden_size or state.h.shape != state.c.shape:
        raise ValueError(f"lstm state shape {state.h.shape}/{state.c.shape} mismatch")
    gates = _gates(params, x, state.h)
    c = _cell_new(gates, state.c)
    return LstmState(_hidden_out(gates, c), c)


def _lstm_step_primitive(params: LstmParams, x: Tensor, state: LstmState) -> LstmState:
    """Same update out of graph primitives; oracle for the fused kernels."""
    hsz = params.hidden_size
    gates = _gates(params, x, state.h)
    axis = gates.ndim - 1
    i = T.sigmoid(T.narrow(gates, axis, 0, hsz))
    f = T.sigmoid(T.narrow(gates, axis, hsz, hsz))
    g = T.tanh(T.narrow(gates, axis, 2 * hsz, hsz))
    o = T.sigmoid(T.narrow(gates, axis, 3 * hsz, hsz))
    c = T.add(T.mul(f, state.c), T.mul(i, g))
    return LstmState(T.mul(o, T.tanh(c)), c)


# ---------------------------------------------------------------------------
# sequence runs


def _run_direction(params: LstmParams, xs: Tensor, reverse: bool) -> list[Tensor]:
    """Run one direction over a (T, in) sequence; returns per-frame hidden
    vectors indexed by original frame position."""
    n = xs.shape[0]
    # one big input projection instead of T small ones
    proj = T.matmul(xs, T.transpose(params.w_ih))  # (T, 4h)
    state = zero_state(params.hidden_size)
    outs: list[Tensor | None] = [None] * n
    order = range(n - 1, -1, -1) if reverse else range(n)
    for t in order:
        row = T.reshape(T.narrow(proj, 0, t, 1), (4 * params.hidden_size,))
        gates = T.add(T.add(row, T.matmul(params.w_hh, state.h)), params.bias)
        c = _cell_new(gates, state.c)
        state = LstmState(_hidden_out(gates, c), c)
        outs[t] = state.h
    return outs  # type: ignore[return-value]


def _run_blstm_layer(fwd: LstmParams, bwd: LstmParams, xs: Tensor) -> Tensor:
    """(T, in) -> (T, 2h): forward and backward hidden states concatenated."""
    hf = T.stack(_run_direction(fwd, xs, reverse=False))
    hb = T.stack(_run_direction(bwd, xs, reverse=True))
    return T.concat([hf, hb], axis=1)


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden: int
    subsample_after: frozenset[int]  # 1-based layer indices
    projection_dim: int

    def __post_init__(self):
        bad = set(self.subsample_after) - set(range(1, self.num_layers + 1))
        if bad:
            raise ValueError(f"subsample_after layers {sorted(bad)} out of range")


class BlstmStack:
    """Stacked BLSTM with keep-even time subsampling and a final projection."""

    def __init__(self, cfg: EncoderConfig, input_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.layers: list[tuple[LstmParams, LstmParams]] = []
        in_dim = input_dim
        for _ in range(cfg.num_layers):
            self.layers.append((init_lstm(rng, in_dim, cfg.hidden),
                                init_lstm(rng, in_dim, cfg.hidden)))
            in_dim = 2 * cfg.hidden
        self.proj_w = T.uniform_init(rng, (cfg.projection_dim, in_dim), fan_in=in_dim)
        self.proj_b = T.zeros_init((cfg.projection_dim,))

    def run(self, xs: Tensor) -> Tensor:
        """(T, F) -> (T', projection_dim) with T' = ceil-halving per
        subsample layer."""
        if xs.ndim != 2 or xs.shape[0] == 0:
            raise ValueError(f"encoder input must be (T, F) with T >= 1, got {xs.shape}")
        h = xs
        for li, (fwd, bwd) in enumerate(self.layers, start=1):
            h = _run_blstm_layer(fwd, bwd, h)
            if li in self.cfg.subsample_after:
                h = T.take_rows(h, np.arange(0, h.shape[0], 2))
        return T.add(T.matmul(h, T.transpose(self.proj_w)), self.proj_b)

    def output_length(self, n_frames: int) -> int:
        for li in range(1, self.cfg.num_layers + 1):
            if li in self.cfg.subsample_after:
                n_frames = (n_frames + 1) // 2
        return n_frames

    def parameters(self, prefix: str = "enc") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for li, (fwd, bwd) in enumerate(self.layers):
            out.update(fwd.parameters(f"{prefix}.l{li}.fwd"))
            out.update(bwd.parameters(f"{prefix}.l{li}.bwd"))
        out[f"{prefix}.proj_w"] = self.proj_w
        out[f"{prefix}.proj_b"] = self.proj_b
        return out


class Predictor:
    """Embeds the last non-blank token and advances a stacked LSTM one step.

    Id 0 (blank) is rejected: the recurrence is over non-blank emissions
    only. A reserved embedding row stands in for the start-of-sequence input
    that produces the u=0 representation."""

    def __init__(self, vocab_size: int, hidden: int, num_layers: int, out_dim: int,
                 rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.embedding = T.uniform_init(rng, (vocab_size + 1, hidden), fan_in=hidden)
        self.layers = [init_lstm(rng, hidden if i == 0 else hidden, hidden)
                       for i in range(num_layers)]
        self.proj_w = T.uniform_init(rng, (out_dim, hidden), fan_in=hidden)
        self.proj_b = T.zeros_init((out_dim,))

    def initial_state(self) -> list[LstmState]:
        return [zero_state(p.hidden_size) for p in self.layers]

    def step(self, y_prev: int, state: list[LstmState]) -> tuple[Tensor, list[LstmState]]:
        if y_prev == 0:
            raise ValueError("predictor input must be the last non-blank token")
        if y_prev == START:
            row = self.vocab_size
        elif 0 <= y_prev < self.vocab_size:
            row = y_prev
        else:
            raise ValueError(f"token id {y_prev} outside vocabulary")
        x = T.reshape(T.take_rows(self.embedding, [row]), (self.embedding.shape[1],))
        new_state = []
        for params, st in zip(self.layers, state):
            st = lstm_step(params, x, st)
            new_state.append(st)
            x = st.h
        return T.affine(x, self.proj_w, self.proj_b), new_state

    def parameters(self, prefix: str = "pred") -> dict[str, Tensor]:
        out = {f"{prefix}.embedding": self.embedding}
        for li, p in enumerate(self.layers):
            out.update(p.parameters(f"{prefix}.l{li}"))
        out[f"{prefix}.proj_w"] = self.proj_w
        out[f"{prefix}.proj_b"] = self.proj_b
        return out


class EmbeddingExtractor:
    """BLSTM over a context word's token pieces; the embedding is the
    concatenation of the forward direction's last state and the backward
    direction's state after consuming the first token."""

    def __init__(self, vocab_size: int, hidden: int, num_layers: int,
                 rng: np.random.Generator):
        self.hidden = hidden
        self.embedding = T.uniform_init(rng, (vocab_size, hidden), fan_in=hidden)
        self.layers: list[tuple[LstmParams, LstmParams]] = []
        in_dim = hidden
        for _ in range(num_layers):
            self.layers.append((init_lstm(rng, in_dim, hidden),
                                init_lstm(rng, in_dim, hidden)))
            in_dim = 2 * hidden

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden

    def embed_word(self, token_ids: Sequence[int]) -> Tensor:
        if len(token_ids) == 0:
            raise ValueError("cannot embed an empty token sequence")
        xs = T.take_rows(self.embedding, list(token_ids))  # (L, emb)
        last_f = last_b = None
        for fwd, bwd in self.layers:
            outs_f = _run_direction(fwd, xs, reverse=False)
            outs_b = _run_direction(bwd, xs, reverse=True)
            last_f, last_b = outs_f[-1], outs_b[0]
            xs = T.concat([T.stack(outs_f), T.stack(outs_b)], axis=1)
        return T.concat([last_f, last_b])

    def embed_words(self, token_seqs: Sequence[Sequence[int]]) -> Tensor:
        """(N words) -> (N, 2h). Batches all words through matrix-shaped
        steps when the stack is a single layer; the padded tail of shorter
        words never reaches the gathered states."""
        if any(len(s) == 0 for s in token_seqs):
            raise ValueError("cannot embed an empty token sequence")
        if len(self.layers) != 1 or len(token_seqs) == 0:
            return T.stack([self.embed_word(s) for s in token_seqs])
        fwd, bwd = self.layers[0]
        lengths = [len(s) for s in token_seqs]
        max_len = max(lengths)
        n = len(token_seqs)
        ids_f = np.zeros((n, max_len), dtype=np.int64)
        ids_b = np.zeros((n, max_len), dtype=np.int64)
        for i, seq in enumerate(token_seqs):
            ids_f[i, : lengths[i]] = seq
            ids_b[i, : lengths[i]] = seq[::-1]
        final_f = self._run_batch_to_final(fwd, ids_f, lengths)
        final_b = self._run_batch_to_final(bwd, ids_b, lengths)
        return T.concat([final_f, final_b], axis=1)

    def _run_batch_to_final(self, params: LstmParams, ids: np.ndarray,
                            lengths: list[int]) -> Tensor:
        n, max_len = ids.shape
        state = zero_state(params.hidden_size, batch=n)
        per_step: list[Tensor] = []
        for t in range(max_len):
            x = T.take_rows(self.embedding, ids[:, t])
            state = lstm_step(params, x, state)
            per_step.append(state.h)
        # gather each word's state at its own final step
        by_len: dict[int, list[int]] = {}
        for i, ln in enumerate(lengths):
            by_len.setdefault(ln, []).append(i)
        chunks = []
        order = []
        for ln in sorted(by_len):
            rows = by_len[ln]
            chunks.append(T.take_rows(per_step[ln - 1], rows))
            order.extend(rows)
        gathered = T.concat(chunks, axis=0) if len(chunks) > 1 else chunks[0]
        inverse = np.empty(n, dtype=np.int64)
        inverse[order] = np.arange(n)
        return T.take_rows(gathered, inverse)

    def parameters(self, prefix: str = "ee") -> dict[str, Tensor]:
        out = {f"{prefix}.embedding": self.embedding}
        for li, (fwd, bwd) in enumerate(self.layers):
            out.update(fwd.parameters(f"{prefix}.l{li}.fwd"))
            out.update(bwd.parameters(f"{prefix}.l{li}.bwd"))
        return out
