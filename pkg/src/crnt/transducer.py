"""Transducer core: the joiner in its four contextual variants, the output
head, and the lattice loss.

The loss marginalizes over every monotone alignment path through the
T' x (U+1) lattice: blank consumes an encoder frame, a label emits the next
target token, and a terminal blank closes the last node. Forward/backward
tables run in log space; the gradient with respect to the per-node log
distribution is the (negated) arc posterior, computed analytically.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, custom_op
from .tokenizer import BLANK_ID


class ModelMode(enum.Enum):
    BASELINE = "baseline"
    ATT = "att"
    BIAS = "bias"
    ATT_BIAS = "att_bias"

    @property
    def uses_attention(self) -> bool:
        return self in (ModelMode.ATT, ModelMode.ATT_BIAS)

    @property
    def uses_bias(self) -> bool:
        return self in (ModelMode.BIAS, ModelMode.ATT_BIAS)


_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh}


class JoinerParams:
    """Projections feeding the joint embedding plus the output head.

    The predictor-side projection width depends on the mode: attention modes
    concatenate the context vector in front of the predictor output. Bias
    modes add an affine projection of the bias vector, passed through
    dropout while training."""

    def __init__(self, rng: np.random.Generator, mode: ModelMode, enc_dim: int,
                 pred_dim: int, ctx_dim: int, joint_dim: int, vocab_size: int,
                 activation: str = "relu", bias_dropout: float = 0.0):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown joiner activation {activation!r}")
        self.mode = mode
        self.ctx_dim = ctx_dim
        self.vocab_size = vocab_size
        self.activation = activation
        self.bias_dropout = bias_dropout
        pred_in = pred_dim + (ctx_dim if mode.uses_attention else 0)
        self.enc_proj = T.uniform_init(rng, (joint_dim, enc_dim), fan_in=enc_dim)
        self.pred_proj = T.uniform_init(rng, (joint_dim, pred_in), fan_in=pred_in)
        self.joint_bias = T.zeros_init((joint_dim,))
        if mode.uses_bias:
            self.bias_proj_w = T.uniform_init(rng, (joint_dim, vocab_size),
                                              fan_in=vocab_size)
            self.bias_proj_b = T.zeros_init((joint_dim,))
        self.out_w = T.uniform_init(rng, (vocab_size, joint_dim), fan_in=joint_dim)
        self.out_b = T.zeros_init((vocab_size,))

    def parameters(self, prefix: str = "joint") -> dict[str, Tensor]:
        out = {
            f"{prefix}.enc_proj": self.enc_proj,
            f"{prefix}.pred_proj": self.pred_proj,
            f"{prefix}.joint_bias": self.joint_bias,
            f"{prefix}.out_w": self.out_w,
            f"{prefix}.out_b": self.out_b,
        }
        if self.mode.uses_bias:
            out[f"{prefix}.bias_proj_w"] = self.bias_proj_w
            out[f"{prefix}.bias_proj_b"] = self.bias_proj_b
        return out


def _check_contextual_inputs(mode: ModelMode, c_u, b_u) -> None:
    if mode.uses_attention and c_u is None:
        raise ValueError(f"{mode.value} joiner needs a context vector")
    if not mode.uses_attention and c_u is not None:
        raise ValueError(f"{mode.value} joiner does not take a context vector")
    if mode.uses_bias and b_u is None:
        raise ValueError(f"{mode.value} joiner needs a bias vector")
    if not mode.uses_bias and b_u is not None:
        raise ValueError(f"{mode.value} joiner does not take a bias vector")


def joiner(p: JoinerParams, h_enc: Tensor, h_pred: Tensor, c_u: Tensor | None = None,
           b_u: Tensor | None = None, training: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """Joint embedding for one lattice node."""
    _check_contextual_inputs(p.mode, c_u, b_u)
    pred_in = T.concat([c_u, h_pred]) if p.mode.uses_attention else h_pred
    pre = T.add(T.matmul(p.enc_proj, h_enc), T.matmul(p.pred_proj, pred_in))
    if p.mode.uses_bias:
        path = T.affine(b_u, p.bias_proj_w, p.bias_proj_b)
        path = T.dropout(path, p.bias_dropout, training, rng)
        pre = T.add(pre, path)
    return _ACTIVATIONS[p.activation](T.add(pre, p.joint_bias))


def output_distribution(p: JoinerParams, z: Tensor) -> Tensor:
    """Log distribution over vocabulary (blank included) for one node."""
    return T.log_softmax(T.affine(z, p.out_w, p.out_b))


def lattice_log_probs(p: JoinerParams, enc_out: Tensor, pred_out: Tensor,
                      ctx_rows: Tensor | None = None, bias_rows: Tensor | None = None,
                      training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    """All T' x (U+1) node distributions at once; equals the per-node
    joiner + output head composition. Contextual rows are per-u and
    broadcast across time."""
    _check_contextual_inputs(p.mode, ctx_rows, bias_rows)
    n_t = enc_out.shape[0]
    n_u = pred_out.shape[0]
    joint_dim = p.joint_bias.shape[0]
    pred_in = T.concat([ctx_rows, pred_out], axis=1) if p.mode.uses_attention else pred_out
    enc_part = T.matmul(enc_out, T.transpose(p.enc_proj))  # (T', j)
    pred_part = T.matmul(pred_in, T.transpose(p.pred_proj))  # (U+1, j)
    if p.mode.uses_bias:
        path = T.add(T.matmul(bias_rows, T.transpose(p.bias_proj_w)), p.bias_proj_b)
        path = T.dropout(path, p.bias_dropout, training, rng)
        pred_part = T.add(pred_part, path)
    pre = T.add(
        T.add(T.reshape(enc_part, (n_t, 1, joint_dim)),
              T.reshape(pred_part, (1, n_u, joint_dim))),
        p.joint_bias,
    )
    z = _ACTIVATIONS[p.activation](pre)
    logits = T.add(T.matmul(T.reshape(z, (n_t * n_u, joint_dim)), T.transpose(p.out_w)),
                   p.out_b)
    return T.reshape(T.log_softmax(logits, axis=-1), (n_t, n_u, p.vocab_size))


# ---------------------------------------------------------------------------
# lattice loss


def _validate_loss_inputs(lp: np.ndarray, targets: Sequence[int]) -> None:
    if lp.ndim != 3:
        raise ValueError(f"lattice log-probs must be (T', U+1, vocab), got {lp.shape}")
    n_t, n_u, vocab = lp.shape
    if n_t < 1:
        raise ValueError("empty time axis")
    if n_u != len(targets) + 1:
        raise ValueError(f"label axis {n_u} != len(targets)+1 = {len(targets) + 1}")
    for y in targets:
        if not 0 < y < vocab:
            raise ValueError(f"target token {y} invalid (blank or out of range)")


def rnnt_tables(lp: np.ndarray, targets: Sequence[int]) -> tuple[np.ndarray, np.ndarray, float]:
    """Log-space forward (reach-node) and backward (finish-from-node)
    tables plus the total log-likelihood."""
    n_t, n_u, _ = lp.shape
    n_labels = len(targets)
    la = np.full((n_t, n_u), -np.inf)
    la[0, 0] = 0.0
    for t in range(n_t):
        for u in range(n_u):
            if t == 0 and u == 0:
                continue
            via_blank = la[t - 1, u] + lp[t - 1, u, BLANK_ID] if t > 0 else -np.inf
            via_label = la[t, u - 1] + lp[t, u - 1, targets[u - 1]] if u > 0 else -np.inf
            la[t, u] = np.logaddexp(via_blank, via_label)
    log_z = la[n_t - 1, n_labels] + lp[n_t - 1, n_labels, BLANK_ID]

    lb = np.full((n_t, n_u), -np.inf)
    lb[n_t - 1, n_labels] = lp[n_t - 1, n_labels, BLANK_ID]
    for t in range(n_t - 1, -1, -1):
        for u in range(n_u - 1, -1, -1):
            if t == n_t - 1 and u == n_labels:
                continue
            via_blank = lp[t, u, BLANK_ID] + lb[t + 1, u] if t + 1 < n_t else -np.inf
            via_label = lp[t, u, targets[u]] + lb[t, u + 1] if u < n_labels else -np.inf
            lb[t, u] = np.logaddexp(via_blank, via_label)
    return la, lb, log_z


def rnnt_loss(log_probs: Tensor, targets: Sequence[int]) -> Tensor:
    """Negative log-likelihood of the target sequence under the lattice.
    Gradient w.r.t. log_probs is minus the arc posterior."""
    targets = list(targets)
    lp = log_probs.data
    _validate_loss_inputs(lp, targets)
    n_t, n_u, _ = lp.shape
    n_labels = len(targets)
    la, lb, log_z = rnnt_tables(lp, targets)

    def back(g):
        grad = np.zeros_like(lp)
        # blank arcs (t,u) -> (t+1,u); the final node's blank leaves the lattice
        cont = np.full((n_t, n_u), -np.inf)
        cont[: n_t - 1, :] = lb[1:, :]
        cont[n_t - 1, n_labels] = 0.0
        grad[:, :, BLANK_ID] = -np.exp(la + lp[:, :, BLANK_ID] + cont - log_z)
        # label arcs (t,u) -> (t,u+1)
        for u in range(n_labels):
            grad[:, u, targets[u]] -= np.exp(
                la[:, u] + lp[:, u, targets[u]] + lb[:, u + 1] - log_z
            )
        return (g * grad,)

    return custom_op(np.asarray(-log_z), (log_probs,), back)


def rnnt_bruteforce(lp: np.ndarray, targets: Sequence[int]) -> float:
    """Explicit enumeration of every alignment path, summed in linear
    space. Test oracle only; refuses lattices big enough to explode."""
    targets = list(targets)
    _validate_loss_inputs(lp, targets)
    n_t, n_u, _ = lp.shape
    n_labels = len(targets)
    if n_t * n_u > 20:
        raise ValueError(f"lattice {n_t}x{n_u} too large for enumeration")

    total = 0.0

    def walk(t: int, u: int, acc: float) -> None:
        nonlocal total
        if t == n_t - 1 and u == n_labels:
            total += acc * np.exp(lp[t, u, BLANK_ID])
            return
        if t + 1 < n_t:
            walk(t + 1, u, acc * np.exp(lp[t, u, BLANK_ID]))
        if u < n_labels:
            walk(t, u + 1, acc * np.exp(lp[t, u, targets[u]]))

    walk(0, 0, 1.0)
    return -float(np.log(total))


def count_lattice_paths(n_t: int, n_labels: int) -> int:
    """Pascal-style DP for the number of monotone paths; pairs with the
    brute-force enumerator in tests."""
    table = np.zeros((n_t, n_labels + 1), dtype=np.int64)
    table[0, 0] = 1
    for t in range(n_t):
        for u in range(n_labels + 1):
            if t > 0:
                table[t, u] += table[t - 1, u]
            if u > 0:
                table[t, u] += table[t, u - 1]
    return int(table[n_t - 1, n_labels])
