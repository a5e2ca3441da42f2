"""Full transducer assembly.

Wires the audio encoder, the text predictor, and (mode permitting) the
metadata attention and bias machinery into a single object that can score
a (features, transcript, context) triple and expose the pieces the
decoder steps through one label at a time.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .recurrent import BlstmStack, EmbeddingExtractor, EncoderConfig, Predictor, START
from .context import (
    AttentionParams,
    ContextSet,
    attention_step,
    bias_vector,
    embedding_scores,
    initial_alpha,
)
from .transducer import JoinerParams, ModelMode, lattice_log_probs, rnnt_loss


@dataclass(frozen=True)
class ModelConfig:
    mode: ModelMode
    vocab_size: int
    feat_dim: int
    enc_layers: int = 2
    enc_hidden: int = 64
    enc_subsample_after: frozenset = field(default_factory=lambda: frozenset({1}))
    enc_proj: int = 128
    pred_hidden: int = 64
    pred_layers: int = 1
    pred_proj: int = 128
    ee_hidden: int = 32
    ee_layers: int = 1
    att_dim: int = 32
    att_conv_channels: int = 2
    att_kernel: int = 1
    joint_dim: int = 64
    joint_activation: str = "relu"
    bias_dropout: float = 0.1
    # when True a bias row also fires for words startable at a boundary
    bias_at_word_start: bool = False

    def __post_init__(self):
        if not isinstance(self.mode, ModelMode):
            object.__setattr__(self, "mode", ModelMode(self.mode))
        if not isinstance(self.enc_subsample_after, frozenset):
            object.__setattr__(
                self, "enc_subsample_after", frozenset(self.enc_subsample_after)
            )


class Model:
    """One trainable transducer in one of the four wiring modes."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.mode = cfg.mode
        self.encoder = BlstmStack(
            EncoderConfig(
                num_layers=cfg.enc_layers,
                hidden=cfg.enc_hidden,
                subsample_after=cfg.enc_subsample_after,
                projection_dim=cfg.enc_proj,
            ),
            cfg.feat_dim,
            rng,
        )
        self.predictor = Predictor(
            cfg.vocab_size, cfg.pred_hidden, cfg.pred_layers, cfg.pred_proj, rng
        )
        self.extractor = None
        self.attention = None
        if cfg.mode.uses_attention:
            self.extractor = EmbeddingExtractor(
                cfg.vocab_size, cfg.ee_hidden, cfg.ee_layers, rng
            )
            self.attention = AttentionParams(
                rng,
                att_dim=cfg.att_dim,
                pred_dim=cfg.pred_proj,
                emb_dim=self.extractor.output_dim,
                conv_channels=cfg.att_conv_channels,
                kernel_size=cfg.att_kernel,
            )
        self.context_dim = 2 * cfg.ee_hidden if cfg.mode.uses_attention else 0
        self.joiner = JoinerParams(
            rng,
            mode=cfg.mode,
            enc_dim=cfg.enc_proj,
            pred_dim=cfg.pred_proj,
            ctx_dim=self.context_dim,
            joint_dim=cfg.joint_dim,
            vocab_size=cfg.vocab_size,
            activation=cfg.joint_activation,
            bias_dropout=cfg.bias_dropout,
        )

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.encoder.parameters("enc"))
        params.update(self.predictor.parameters("pred"))
        if self.extractor is not None:
            params.update(self.extractor.parameters("ee"))
        if self.attention is not None:
            params.update(self.attention.parameters("att"))
        params.update(self.joiner.parameters("joint"))
        return params

    def predictor_rows(self, targets: list[int]) -> list[Tensor]:
        """Predictor outputs for label positions 0..U, teacher forced:
        position 0 sees the start symbol, position u sees targets[u-1]."""
        h, state = self.predictor.step(START, self.predictor.initial_state())
        rows = [h]
        for y in targets:
            h, state = self.predictor.step(y, state)
            rows.append(h)
        return rows

    def embed_context(self, ctx: ContextSet):
        """(embeddings, precomputed attention scores) for a non-empty set."""
        embs = self.extractor.embed_words([w.tokens for w in ctx.words])
        return embs, embedding_scores(self.attention, embs)

    def attention_rows(self, pred_rows: list[Tensor], embs, escores) -> list[Tensor]:
        """Attention weights per label position; each step feeds on the
        previous step's weights, seeded with the uniform distribution."""
        n = embs.data.shape[0]
        prev = initial_alpha(n)
        alphas = []
        for h in pred_rows:
            prev = attention_step(self.attention, h, embs, prev, escores)
            alphas.append(prev)
        return alphas

    def bias_rows(
        self, targets: list[int], ctx: ContextSet, alphas: list[Tensor] | None
    ) -> Tensor:
        """Bias vectors per label position. The cursor at position u has
        consumed targets[:u]; attended modes weight each continuation by the
        position's attention, the ones-only mode counts them."""
        if ctx.vocab is None:
            raise ValueError("context set was built without a vocabulary")
        cursor = ctx.trie.initial_cursor()
        rows = []
        for u in range(len(targets) + 1):
            alpha = alphas[u] if alphas is not None else None
            rows.append(
                bias_vector(
                    cursor,
                    alpha,
                    ctx,
                    self.cfg.vocab_size,
                    activate_at_boundary=self.cfg.bias_at_word_start,
                )
            )
            if u < len(targets):
                cursor = ctx.trie.advance(cursor, targets[u], ctx.vocab)
        return T.stack(rows)

    def forward_loss(
        self,
        features: np.ndarray,
        targets: list[int],
        ctx: ContextSet | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Negative log-likelihood of the transcript given the features.

        `ctx` may be None or empty; contextual modes then run with zeroed
        context and bias inputs and no attention steps at all.
        """
        enc_out = self.encoder.run(Tensor(np.asarray(features, dtype=np.float64)))
        pred_list = self.predictor_rows(targets)
        pred_out = T.stack(pred_list)
        n_ctx = len(ctx) if ctx is not None else 0
        n_rows = len(targets) + 1

        ctx_rows = None
        alphas = None
        if self.mode.uses_attention:
            if n_ctx > 0:
                embs, escores = self.embed_context(ctx)
                # stack once so the context rows come from one matmul
                alphas = self.attention_rows(pred_list, embs, escores)
                ctx_rows = T.matmul(T.stack(alphas), embs)
            else:
                ctx_rows = Tensor(np.zeros((n_rows, self.context_dim)))

        bias_rows = None
        if self.mode.uses_bias:
            if n_ctx > 0:
                bias_rows = self.bias_rows(targets, ctx, alphas)
            else:
                bias_rows = Tensor(np.zeros((n_rows, self.cfg.vocab_size)))

        lattice = lattice_log_probs(
            self.joiner,
            enc_out,
            pred_out,
            ctx_rows=ctx_rows,
            bias_rows=bias_rows,
            training=training,
            rng=rng,
        )
        return rnnt_loss(lattice, targets)
