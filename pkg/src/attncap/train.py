"""Teacher-forced training, optimizers, run logs and model (de)serialization."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .data import PAD, DatasetManifest, Vocabulary, make_batches
from .decoders import (
    MERGES,
    MODEL_KINDS,
    AttentionTrace,
    CaptionModel,
    ModelConfig,
    doubly_stochastic_penalty,
    teacher_forced,
)
from .encoder import EncoderConfig
from .errors import AttncapError, ContractError, DivergenceError, FormatError
from .layers import cross_entropy_masked
from .tensor import Tensor

log = logging.getLogger(__name__)

ALPHA_TOLERANCE = 1e-9


class ConfigError(AttncapError, ValueError):
    """Invalid training configuration."""


@dataclass
class TrainConfig:
    model: str = "attention"
    embed_dim: int = 256
    hidden_dim: int = 256
    feature_dim: int = 128
    attention_dim: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    grid_side: int = 6
    merge: str = "add"
    vocab_cap: int = 5000
    learning_rate: float = 4e-4
    batch_size: int = 64
    epochs: int = 30
    penalty: float = 0.0
    param_seed: int = 0
    shuffle_seed: int = 0
    t_max: int = 16
    optimizer: str = "adam"
    clip_norm: float = 5.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.merge not in MERGES:
            raise ConfigError(f"merge must be one of {MERGES}, got {self.merge!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        positive = ("embed_dim", "hidden_dim", "feature_dim", "attention_dim", "grid_side",
                    "vocab_cap", "learning_rate", "batch_size", "epochs", "clip_norm")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"channels must be a nonempty list of positive widths, got {self.channels}")
        if self.penalty < 0:
            raise ConfigError(f"penalty must be nonnegative, got {self.penalty}")
        if self.t_max < 3:
            raise ConfigError(f"t_max must be at least 3, got {self.t_max}")
        if self.param_seed < 0 or self.shuffle_seed < 0:
            raise ConfigError("seeds must be nonnegative")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.channels, self.feature_dim, self.grid_side)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            kind=self.model,
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            attention_dim=self.attention_dim,
            encoder=self.encoder,
            merge=self.merge,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        return cls(**d)


def build_model(config: TrainConfig, vocab: Vocabulary) -> CaptionModel:
    return CaptionModel(config.model_config(len(vocab)), seed=config.param_seed)


# ---------------------------------------------------------------- optimizers


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


def make_optimizer(config: TrainConfig, params):
    if config.optimizer == "sgd":
        return SGD(params, config.learning_rate)
    return Adam(params, config.learning_rate)


# ---------------------------------------------------------------- loss


@dataclass
class BatchOutcome:
    loss: Tensor
    alphas: list = field(default_factory=list)
    steps: int = 0


def batch_loss(model: CaptionModel, images: Tensor, tokens: np.ndarray, penalty: float = 0.0) -> BatchOutcome:
    """Masked cross-entropy under teacher forcing (plus the attention penalty).

    Rows are ``[START, w1, ..., END, PAD, ...]``; step ``t`` reads token ``t``
    and predicts token ``t + 1``, so a row of effective length ``L`` yields
    ``L - 1`` scored predictions.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = (tokens != PAD).sum(axis=1)
    width = int(lengths.max())
    inputs, targets = tokens[:, : width - 1], tokens[:, 1:width]
    grid = model.encode(images)
    out = teacher_forced(model, grid, inputs)
    loss = cross_entropy_masked(out.logits, targets, PAD)
    if penalty > 0 and model.kind == "attention":
        mask = targets != PAD
        reg = doubly_stochastic_penalty(AttentionTrace(out.alphas), grid.num_regions, mask)
        loss = loss + T.scale(reg, penalty)
    return BatchOutcome(loss, out.alphas, width - 1)


def alpha_violations(alphas, tolerance: float = ALPHA_TOLERANCE) -> tuple[int, int]:
    """(violating vectors, checked vectors) for per-step weight normalization."""
    bad = checked = 0
    for alpha in alphas:
        a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
        a = a.reshape(-1, a.shape[-1])
        ok = (np.abs(a.sum(axis=-1) - 1.0) <= tolerance) & (a >= 0).all(axis=-1)
        bad += int((~ok).sum())
        checked += ok.size
    return bad, checked


# ---------------------------------------------------------------- run log


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_bleu4: float | None
    wall_time: float = 0.0
    alpha_violations: int = 0
    alpha_checked: int = 0

    def deterministic(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class RunLog:
    rows: list[EpochRecord] = field(default_factory=list)

    def append(self, row: EpochRecord) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ContractError(f"run log epochs must increase: {row.epoch} after {self.rows[-1].epoch}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def dumps(self) -> str:
        """JSON lines without wall-clock times, so reruns compare byte-for-byte."""
        return "".join(json.dumps(r.deterministic()) + "\n" for r in self.rows)

    def timing_dumps(self) -> str:
        return "".join(json.dumps({"epoch": r.epoch, "wall_time": r.wall_time}) + "\n" for r in self.rows)

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        (out_dir / "runlog.jsonl").write_text(self.dumps(), encoding="utf-8")
        (out_dir / "timing.jsonl").write_text(self.timing_dumps(), encoding="utf-8")

    @classmethod
    def load(cls, out_dir) -> "RunLog":
        out = cls()
        path = Path(out_dir) / "runlog.jsonl"
        for line in path.read_text(encoding="utf-8").splitlines():
            out.append(EpochRecord(**json.loads(line)))
        return out


# ---------------------------------------------------------------- checkpoints


def config_echo(config: TrainConfig, vocab: Vocabulary) -> dict:
    return {"train": config.to_dict(), "vocab_size": len(vocab), "vocab_fingerprint": vocab.fingerprint()}


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"epoch_{epoch:03d}.ckpt"


def save_model(path, model: CaptionModel, config: TrainConfig, vocab: Vocabulary, epoch: int = 0, rng_state=None) -> None:
    tensors = {name: p.data for name, p in model.parameters().items()}
    ckpt_io.save(path, ckpt_io.Checkpoint(config_echo(config, vocab), epoch, rng_state or {}, tensors))


@dataclass
class LoadedModel:
    model: CaptionModel
    config: TrainConfig
    epoch: int
    vocab_size: int
    vocab_fingerprint: str
    rng_state: dict


def load_model(path) -> LoadedModel:
    """Rebuild a model from a checkpoint; the model is only returned if every tensor fits."""
    ck = ckpt_io.load(path)
    try:
        config = TrainConfig.from_dict(ck.config["train"])
        vocab_size = int(ck.config["vocab_size"])
        fingerprint = str(ck.config["vocab_fingerprint"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: invalid config echo ({exc})") from None
    model = CaptionModel(config.model_config(vocab_size), seed=config.param_seed)
    params = model.parameters()
    if set(params) != set(ck.tensors):
        raise FormatError(f"{path}: parameter names do not match a {config.model} model")
    for name, p in params.items():
        if ck.tensors[name].shape != p.shape:
            raise FormatError(f"{path}: {name} has shape {ck.tensors[name].shape}, expected {p.shape}")
    for name, p in params.items():
        p.data = ck.tensors[name].copy()
    return LoadedModel(model, config, ck.epoch, vocab_size, fingerprint, ck.rng_state)


def check_vocab(loaded: LoadedModel, vocab: Vocabulary) -> None:
    if loaded.vocab_size != len(vocab) or loaded.vocab_fingerprint != vocab.fingerprint():
        raise ContractError("vocabulary does not match the one the checkpoint was trained with")


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: CaptionModel
    runlog: RunLog
    checkpoints: list[Path]


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    out_dir=None,
    val_manifest: DatasetManifest | None = None,
) -> TrainResult:
    """Train from scratch for ``config.epochs`` epochs.

    Checkpoints ``epoch_XXX.ckpt`` and ``runlog.jsonl`` go to ``out_dir`` when
    it is given. Raises :class:`DivergenceError` on a non-finite loss.
    """
    from .evaluation import evaluate_model  # circular at import time

    side = config.encoder.image_side
    if manifest.images().shape[-2:] != (side, side):
        raise ContractError(
            f"corpus images are {manifest.images().shape[-2:]}, the encoder expects side {side}"
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(config, vocab)
    params = list(model.parameters().values())
    optimizer = make_optimizer(config, params)
    rng = np.random.default_rng(config.shuffle_seed)
    runlog = RunLog()
    saved = []
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        losses = []
        bad = checked = 0
        for batch in make_batches(manifest, vocab, config.batch_size, config.t_max, rng):
            for p in params:
                p.grad = None
            with T.Tape() as tape:
                outcome = batch_loss(model, batch.images, batch.tokens, config.penalty)
            value = outcome.loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} in epoch {epoch}")
            tape.backward(outcome.loss)
            clip_grad_norm(params, config.clip_norm)
            optimizer.step()
            losses.append(value)
            b, c = alpha_violations(outcome.alphas)
            bad += b
            checked += c
        val_bleu4 = None
        if val_manifest is not None and len(val_manifest):
            report = evaluate_model(model, val_manifest, vocab, config.t_max - 2, which=("bleu",))
            val_bleu4 = report.corpus["bleu4"]
        row = EpochRecord(
            epoch, math.fsum(losses) / len(losses), val_bleu4,
            time.perf_counter() - started, bad, checked,
        )
        runlog.append(row)
        log.info("epoch %d loss %.4f val_bleu4 %s (%.1fs)", epoch, row.train_loss, val_bleu4, row.wall_time)
        if out_dir is not None:
            path = checkpoint_path(out_dir, epoch)
            save_model(path, model, config, vocab, epoch, rng.bit_generator.state)
            saved.append(path)
            runlog.save(out_dir)
    return TrainResult(model, runlog, saved)
