"""The two caption decoders and greedy decoding.

Both models share an encoder, a word-embedding table, an LSTM cell and an
output layer over the vocabulary. They differ in how the image reaches the
LSTM at every step:

* vanilla: the pooled image feature is projected to the embedding width and
  added to the word embedding (or concatenated, with ``merge="concat"``);
* attention: additive (Bahdanau) scores over the annotation vectors give
  softmax weights, whose weighted sum is concatenated to the word embedding.

Both start from ``h0 = tanh(W·pooled + b)`` and ``c0 = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import END, PAD, START, Vocabulary
from .encoder import EncoderConfig, EncoderParams, FeatureGrid, encode
from .errors import ContractError, DimensionError
from .layers import (
    Dense,
    EmbeddingTable,
    LSTMCell,
    dense_forward,
    embedding_lookup,
    lstm_step,
    xavier_init,
)
from .tensor import Tensor

MODEL_KINDS = ("vanilla", "attention")
MERGES = ("add", "concat")


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    vocab_size: int
    embed_dim: int = 256
    hidden_dim: int = 256
    attention_dim: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    merge: str = "add"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ContractError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.merge not in MERGES:
            raise ContractError(f"merge must be one of {MERGES}, got {self.merge!r}")
        dims = (self.vocab_size, self.embed_dim, self.hidden_dim, self.attention_dim)
        if min(dims) < 1:
            raise ContractError(f"model widths must be positive, got {dims}")


@dataclass
class AttentionParams:
    W_h: Tensor  # (A, D)
    W_s: Tensor  # (A, hidden)
    v: Tensor  # (A,)

    @classmethod
    def init(cls, feature_dim: int, hidden_dim: int, width: int, seed) -> "AttentionParams":
        return cls(
            xavier_init(feature_dim, width, (*seed, 0)),
            xavier_init(hidden_dim, width, (*seed, 1)),
            xavier_init(width, 1, (*seed, 2), shape=(width,)),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"W_h": self.W_h, "W_s": self.W_s, "v": self.v}


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    last_token: np.ndarray | int


@dataclass
class AttentionTrace:
    """One weight vector per emitted token."""

    steps: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def as_array(self) -> np.ndarray:
        return np.array([np.asarray(s.data if isinstance(s, Tensor) else s) for s in self.steps])


class CaptionModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        enc = config.encoder
        D, E, H, V = enc.feature_dim, config.embed_dim, config.hidden_dim, config.vocab_size
        self.encoder = EncoderParams.init(enc, seed)
        self.embedding = EmbeddingTable.init(V, E, (seed, 100))
        self.init_h = Dense.init(D, H, (seed, 101))
        self.output = Dense.init(H, V, (seed, 102))
        self.merge = None
        self.attention = None
        if config.kind == "attention":
            self.attention = AttentionParams.init(D, H, config.attention_dim, (seed, 103))
            lstm_in = E + D
        elif config.merge == "add":
            self.merge = Dense.init(D, E, (seed, 104))
            lstm_in = E
        else:
            lstm_in = E + D
        self.lstm = LSTMCell.init(lstm_in, H, (seed, 105))

    @property
    def kind(self) -> str:
        return self.config.kind

    def parameters(self) -> dict[str, Tensor]:
        parts = {
            "encoder": self.encoder,
            "embedding": self.embedding,
            "init_h": self.init_h,
            "merge": self.merge,
            "attention": self.attention,
            "lstm": self.lstm,
            "output": self.output,
        }
        params = {}
        for prefix, part in parts.items():
            if part is None:
                continue
            for name, p in part.parameters().items():
                params[f"{prefix}.{name}"] = p
        return params

    def encode(self, images: Tensor) -> FeatureGrid:
        return encode(self.config.encoder, self.encoder, images)


# ---------------------------------------------------------------- attention pieces


def bahdanau_alignment(p: AttentionParams, s_prev: Tensor, grid: FeatureGrid, projected: Tensor | None = None) -> Tensor:
    """Scores ``v · tanh(W_h h_i + W_s s_prev)`` for every annotation ``h_i``.

    ``projected`` may carry a precomputed ``W_h h_i`` (it does not change over
    decoding steps).
    """
    if projected is None:
        projected = T.linear(grid.annotations, p.W_h)
    s = T.linear(s_prev, p.W_s)
    s = T.reshape(s, (*s.shape[:-1], 1, s.shape[-1]))
    if s.shape[:-2] != projected.shape[:-2]:
        raise DimensionError(f"alignment: state batch {s_prev.shape} does not match grid {grid.annotations.shape}")
    hidden = T.tanh(projected + s)
    width = p.v.shape[0]
    scores = T.matmul(hidden, T.reshape(p.v, (width, 1)))
    return T.reshape(scores, scores.shape[:-1])


def attention_weights(scores: Tensor) -> Tensor:
    return T.softmax(scores)


def context_vector(weights: Tensor, grid: FeatureGrid) -> Tensor:
    ann = grid.annotations
    if weights.shape != ann.shape[:-1]:
        raise DimensionError(f"context: weights {weights.shape} do not match annotations {ann.shape}")
    w = T.reshape(weights, (*weights.shape, 1))
    return T.reduce(w * ann, "sum", axis=-2)


# ---------------------------------------------------------------- steps


def initial_state(model: CaptionModel, pooled: Tensor) -> DecoderState:
    h = T.tanh(dense_forward(model.init_h, pooled))
    c = Tensor._wrap(np.zeros(h.shape))
    start = START if pooled.ndim == 1 else np.full(pooled.shape[0], START, dtype=np.int64)
    return DecoderState(h, c, start)


def attention_step(model: CaptionModel, state: DecoderState, grid: FeatureGrid, projected: Tensor | None = None):
    """Returns ``(logits, new_state, alpha)``; the new state keeps ``last_token``."""
    scores = bahdanau_alignment(model.attention, state.h, grid, projected)
    alpha = attention_weights(scores)
    context = context_vector(alpha, grid)
    emb = embedding_lookup(model.embedding, state.last_token)
    h, c = lstm_step(model.lstm, T.concat([emb, context], axis=-1), state.h, state.c)
    logits = dense_forward(model.output, h)
    return logits, DecoderState(h, c, state.last_token), alpha


def vanilla_step(model: CaptionModel, state: DecoderState, pooled: Tensor, merged: Tensor | None = None):
    """Returns ``(logits, new_state)``; ``merged`` may cache the projected image feature."""
    emb = embedding_lookup(model.embedding, state.last_token)
    if model.merge is not None:
        if merged is None:
            merged = dense_forward(model.merge, pooled)
        x = merged + emb
    else:
        x = T.concat([emb, pooled], axis=-1)
    h, c = lstm_step(model.lstm, x, state.h, state.c)
    logits = dense_forward(model.output, h)
    return logits, DecoderState(h, c, state.last_token)


def doubly_stochastic_penalty(trace: AttentionTrace, n: int, mask: np.ndarray | None = None) -> Tensor:
    """``sum_p (1 - sum_t alpha[p, t])**2``, averaged over a leading batch axis if present.

    ``mask`` (``[B, T]`` of 0/1) drops the weights of padded steps.
    """
    if not trace.steps:
        raise ContractError("doubly-stochastic penalty needs a nonempty trace")
    total = None
    for t, alpha in enumerate(trace.steps):
        alpha = T.as_tensor(alpha)
        if alpha.shape[-1] != n:
            raise DimensionError(f"penalty: weight vector {alpha.shape} does not have {n} regions")
        if mask is not None:
            alpha = alpha * Tensor._wrap(mask[:, t:t + 1].astype(np.float64))
        total = alpha if total is None else total + alpha
    gap = T.add_const(T.scale(total, -1.0), 1.0)
    per_example = T.reduce(gap * gap, "sum", axis=-1)
    return per_example if per_example.ndim == 0 else T.reduce(per_example, "mean")


# ---------------------------------------------------------------- whole sequences


@dataclass
class SequenceOutput:
    logits: Tensor  # [B, L, V]
    alphas: list  # per-step attention weights [B, n] (attention model only)


def teacher_forced(model: CaptionModel, grid: FeatureGrid, inputs: np.ndarray) -> SequenceOutput:
    """Run the decoder on ground-truth input tokens ``inputs[B, L]``.

    Step ``t`` consumes ``inputs[:, t]`` and predicts the token after it.
    """
    inputs = np.asarray(inputs, dtype=np.int64)
    if inputs.ndim != 2 or inputs.shape[1] < 1:
        raise DimensionError(f"teacher_forced needs inputs [B, L], got {inputs.shape}")
    state = initial_state(model, grid.pooled)
    steps, alphas = [], []
    projected = merged = None
    if model.kind == "attention":
        projected = T.linear(grid.annotations, model.attention.W_h)
    elif model.merge is not None:
        merged = dense_forward(model.merge, grid.pooled)
    for t in range(inputs.shape[1]):
        state = replace(state, last_token=inputs[:, t])
        if model.kind == "attention":
            logits, state, alpha = attention_step(model, state, grid, projected)
            alphas.append(alpha)
        else:
            logits, state = vanilla_step(model, state, grid.pooled, merged)
        steps.append(logits)
    logits = T.stack(steps, axis=1)
    return SequenceOutput(logits, alphas)


def greedy_decode_ids(model: CaptionModel, grid: FeatureGrid, max_len: int):
    """Batched greedy decoding; returns per-row id lists and per-row weight arrays.

    Ties in the argmax go to the lowest id. A row stops at END (not emitted)
    or after ``max_len`` emitted tokens.
    """
    if max_len < 1:
        raise ContractError(f"max_len must be at least 1, got {max_len}")
    with T.no_grad():
        single = grid.annotations.ndim == 2
        if single:
            grid = FeatureGrid(T.reshape(grid.annotations, (1, *grid.annotations.shape)))
        B = grid.annotations.shape[0]
        state = initial_state(model, grid.pooled)
        outputs = [[] for _ in range(B)]
        traces = [[] for _ in range(B)]
        alive = np.ones(B, dtype=bool)
        projected = merged = alpha = None
        if model.kind == "attention":
            projected = T.linear(grid.annotations, model.attention.W_h)
        elif model.merge is not None:
            merged = dense_forward(model.merge, grid.pooled)
        for _ in range(max_len):
            if model.kind == "attention":
                logits, state, alpha = attention_step(model, state, grid, projected)
            else:
                logits, state = vanilla_step(model, state, grid.pooled, merged)
            tokens = np.argmax(logits.data, axis=-1)
            for b in np.flatnonzero(alive):
                if tokens[b] == END:
                    alive[b] = False
                    continue
                outputs[b].append(int(tokens[b]))
                if alpha is not None:
                    traces[b].append(alpha.data[b].copy())
            if not alive.any():
                break
            state = replace(state, last_token=tokens)
    return outputs, traces


def greedy_decode(model: CaptionModel, grid, vocab: Vocabulary, max_len: int):
    """Decode one image. ``grid`` is a FeatureGrid (or the pooled vector for the vanilla model).

    Returns ``(tokens, trace)``; ``trace`` is None for the vanilla model.
    """
    if isinstance(grid, Tensor):
        if model.kind == "attention":
            raise ContractError("the attention model needs a FeatureGrid, not a pooled vector")
        grid = FeatureGrid(T.reshape(grid, (1, grid.shape[-1])), pooled=grid)
    ids, traces = greedy_decode_ids(model, grid, max_len)
    tokens = vocab.tokens(ids[0])
    trace = AttentionTrace(traces[0]) if model.kind == "attention" else None
    return tokens, trace


def pad_mask(targets: np.ndarray) -> np.ndarray:
    return (np.asarray(targets) != PAD).astype(np.float64)
