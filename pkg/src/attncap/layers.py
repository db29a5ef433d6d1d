"""Parameterized layers and the masked cross-entropy loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


def xavier_init(fan_in: int, fan_out: int, rng_seed, shape=None) -> Tensor:
    """Glorot-uniform weights on [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))].

    The default shape is ``(fan_out, fan_in)``. ``rng_seed`` is anything
    ``numpy.random.default_rng`` accepts, so a ``(seed, index)`` pair works.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ContractError(f"xavier_init needs positive fans, got fan_in={fan_in}, fan_out={fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(rng_seed)
    values = rng.uniform(-bound, bound, size=(fan_out, fan_in) if shape is None else tuple(shape))
    return Tensor(values, requires_grad=True)


def _zeros(*shape: int) -> Tensor:
    return Tensor.zeros(*shape, requires_grad=True)


@dataclass
class Dense:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    @classmethod
    def init(cls, fan_in: int, fan_out: int, seed) -> "Dense":
        return cls(xavier_init(fan_in, fan_out, seed), _zeros(fan_out))

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def dense_forward(layer: Dense, x: Tensor) -> Tensor:
    if x.shape[-1:] != layer.weight.shape[1:]:
        raise DimensionError(f"dense: input {x.shape} does not end in {layer.weight.shape[1]}")
    return T.linear(x, layer.weight, layer.bias)


@dataclass
class EmbeddingTable:
    table: Tensor  # (V, d)

    @classmethod
    def init(cls, vocab_size: int, width: int, seed) -> "EmbeddingTable":
        return cls(xavier_init(vocab_size, width, seed, shape=(vocab_size, width)))

    def parameters(self) -> dict[str, Tensor]:
        return {"table": self.table}


def embedding_lookup(table: EmbeddingTable, ids) -> Tensor:
    return T.take_rows(table.table, np.asarray(ids, dtype=np.int64))


@dataclass
class LSTMCell:
    """Four gate blocks, each acting on ``concat(x, h_prev)``."""

    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, seed) -> "LSTMCell":
        fan_in = input_dim + hidden_dim
        weights = [xavier_init(fan_in, hidden_dim, (*np.atleast_1d(seed), k)) for k in range(4)]
        return cls(*weights, *(_zeros(hidden_dim) for _ in range(4)))

    @property
    def hidden_dim(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_i.shape[1] - self.W_i.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in ("W_i", "W_f", "W_o", "W_g", "b_i", "b_f", "b_o", "b_g")}


def lstm_step(cell: LSTMCell, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    hd = cell.hidden_dim
    if x.shape[-1] != cell.input_dim or h_prev.shape[-1] != hd or c_prev.shape[-1] != hd:
        raise DimensionError(
            f"lstm_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"do not fit input width {cell.input_dim} and hidden width {hd}"
        )
    weights = (cell.W_i, cell.W_f, cell.W_o, cell.W_g)
    biases = (cell.b_i, cell.b_f, cell.b_o, cell.b_g)
    z = np.concatenate([x.data, h_prev.data], axis=-1)
    i, f, o = (_sigmoid(z @ w.data.T + b.data) for w, b in zip(weights[:3], biases[:3]))
    g = np.tanh(z @ cell.W_g.data.T + cell.b_g.data)
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    # one recorded op over stacked [h, c]; gate derivatives are applied in place
    def back(ghc):
        gh, gc = ghc[..., :hd], ghc[..., hd:] + ghc[..., :hd] * o * (1.0 - tc * tc)
        pre = (
            gc * g * i * (1.0 - i),
            gc * c_prev.data * f * (1.0 - f),
            gh * tc * o * (1.0 - o),
            gc * i * (1.0 - g * g),
        )
        z2 = z.reshape(-1, z.shape[-1])
        gz = sum(p @ w.data for p, w in zip(pre, weights))
        gws = [p.reshape(-1, hd).T @ z2 if w.requires_grad else None for p, w in zip(pre, weights)]
        gbs = [p.reshape(-1, hd).sum(axis=0) if b.requires_grad else None for p, b in zip(pre, biases)]
        return (gz[..., :cell.input_dim], gz[..., cell.input_dim:], gc * f, *gws, *gbs)

    hc = T.custom_op(
        np.concatenate([h, c], axis=-1), (x, h_prev, c_prev, *weights, *biases), back,
    )
    return hc[..., :hd], hc[..., hd:]


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class Conv2D:
    kernels: Tensor  # (outC, inC, kH, kW)
    bias: Tensor  # (outC,)
    stride: int = 1
    padding: int = 0

    @classmethod
    def init(cls, in_channels: int, out_channels: int, kernel: int, seed, padding: int = 0) -> "Conv2D":
        area = kernel * kernel
        kernels = xavier_init(
            in_channels * area, out_channels * area, seed,
            shape=(out_channels, in_channels, kernel, kernel),
        )
        return cls(kernels, _zeros(out_channels), 1, padding)

    def parameters(self) -> dict[str, Tensor]:
        return {"kernels": self.kernels, "bias": self.bias}


def conv2d_forward(conv: Conv2D, image: Tensor) -> Tensor:
    """Accepts ``[C, H, W]`` or a batch ``[B, C, H, W]``."""
    if image.ndim == 3:
        out = T.conv2d(T.reshape(image, (1, *image.shape)), conv.kernels, conv.bias, conv.stride, conv.padding)
        return T.reshape(out, out.shape[1:])
    return T.conv2d(image, conv.kernels, conv.bias, conv.stride, conv.padding)


@dataclass(frozen=True)
class MaxPool2D:
    window: int = 2


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    return T.maxpool2d(x, window)


def cross_entropy_masked(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean of -ln softmax(logits)[target] over positions whose target is not ``pad_id``.

    ``logits`` is ``[..., T, V]`` and ``targets`` the matching ``[..., T]`` ids.
    Padded positions contribute neither value nor gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} do not match targets {targets.shape}")
    rows_all = logits.data.reshape(-1, V)
    t_all = targets.reshape(-1)
    keep = np.flatnonzero(t_all != pad_id)
    if keep.size == 0:
        raise ContractError("cross_entropy: every position is padding, loss is empty")
    t = t_all[keep]
    if t.min() < 0 or t.max() >= V:
        raise ContractError(f"cross_entropy: target id outside [0, {V})")
    rows = rows_all[keep]
    z = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.arange(keep.size)
    nll = lse - z[picked, t]
    count = keep.size

    def back(g):
        p = np.exp(z - lse[:, None])
        p[picked, t] -= 1.0
        grad = np.zeros_like(rows_all)
        grad[keep] = p * (g / count)
        return (grad.reshape(logits.shape),)

    return T.custom_op(np.asarray(nll.sum() / count), (logits,), back)


def position_nll(logits: np.ndarray, targets, pad_id: int) -> np.ndarray:
    """Per-position negative log-likelihood (zero at padded positions); no gradient."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - np.take_along_axis(z, np.where(targets == pad_id, 0, targets)[..., None], axis=-1)[..., 0]
    return np.where(targets == pad_id, 0.0, nll)
