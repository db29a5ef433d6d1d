"""Evaluation, captioning, attention heatmaps, model comparison and sweeps."""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, Vocabulary, build_vocabulary, load_manifest, tokenize
from .decoders import AttentionTrace, CaptionModel, greedy_decode_ids
from .errors import ContractError, DimensionError
from .metrics import METRICS, EvalReport, corpus_evaluate
from .pnm import read_ppm, write_pgm
from .tensor import Tensor
from .train import (
    TrainConfig,
    check_vocab,
    checkpoint_path,
    config_echo,
    load_model,
    train,
)

DECODE_CHUNK = 128
SWEEP_COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "gleu", "meteor", "wer")


def decode_images(model: CaptionModel, images: np.ndarray, max_len: int):
    """Greedy-decode ``[N, 3, H, W]`` images in chunks; returns id lists and weight traces."""
    ids, traces = [], []
    for start in range(0, len(images), DECODE_CHUNK):
        grid = model.encode(Tensor._wrap(images[start:start + DECODE_CHUNK]))
        chunk_ids, chunk_traces = greedy_decode_ids(model, grid, max_len)
        ids += chunk_ids
        traces += chunk_traces
    return ids, traces


def evaluate_model(
    model: CaptionModel,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    max_len: int,
    which=METRICS,
) -> EvalReport:
    if not len(manifest):
        raise ContractError(f"split {manifest.split!r} is empty")
    ids, _ = decode_images(model, manifest.images(), max_len)
    candidates = [vocab.tokens(row) for row in ids]
    pairs = [(cand, [tokenize(c) for c in rec.captions]) for cand, rec in zip(candidates, manifest.records)]
    report = corpus_evaluate(pairs, which, ids=[r.id for r in manifest.records])
    for row, cand in zip(report.per_sentence, candidates):
        row["caption"] = " ".join(cand)
    report.model = model.kind
    return report


def evaluate(checkpoint, manifest: DatasetManifest, vocab: Vocabulary, report_path=None) -> EvalReport:
    loaded = load_model(checkpoint)
    check_vocab(loaded, vocab)
    report = evaluate_model(loaded.model, manifest, vocab, loaded.config.t_max - 2)
    report.config = {**config_echo(loaded.config, vocab), "epoch": loaded.epoch, "split": manifest.split}
    if report_path is not None:
        report.save(report_path)
    return report


# ---------------------------------------------------------------- single images


def load_image(path, side: int) -> Tensor:
    rgb = read_ppm(path)
    if rgb.shape[:2] != (side, side):
        raise DimensionError(f"{path}: image is {rgb.shape[1]}x{rgb.shape[0]}, the encoder expects {side}x{side}")
    return Tensor._wrap(rgb.transpose(2, 0, 1).astype(np.float64) / 255.0)


def write_trace(path, tokens: Sequence[str], trace: AttentionTrace, grid_side: int) -> None:
    payload = {
        "grid_side": grid_side,
        "tokens": list(tokens),
        "alphas": [np.asarray(a).tolist() for a in trace.steps],
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def read_trace(path) -> tuple[list[str], AttentionTrace, int]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    steps = [np.asarray(a, dtype=np.float64) for a in payload["alphas"]]
    return payload["tokens"], AttentionTrace(steps), int(payload["grid_side"])


def caption(checkpoint, image_path, vocab: Vocabulary, trace_path=None) -> str:
    """Greedy caption for one image; attention models also write their weight trace."""
    loaded = load_model(checkpoint)
    check_vocab(loaded, vocab)
    config = loaded.config
    image = load_image(image_path, config.encoder.image_side)
    grid = loaded.model.encode(image)
    ids, traces = greedy_decode_ids(loaded.model, grid, config.t_max - 2)
    tokens = vocab.tokens(ids[0])
    if loaded.model.kind == "attention" and trace_path is not None:
        write_trace(trace_path, tokens, AttentionTrace(traces[0]), config.grid_side)
    return " ".join(tokens)


def heatmap(alpha: np.ndarray, grid_side: int, upscale: int) -> np.ndarray:
    """Min-max scale to 0..255 (constant maps become 128), nearest-neighbour upscale."""
    a = np.asarray(alpha, dtype=np.float64).reshape(grid_side, grid_side)
    lo, hi = a.min(), a.max()
    if hi == lo:
        gray = np.full(a.shape, 128, dtype=np.uint8)
    else:
        gray = np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return np.repeat(np.repeat(gray, upscale, axis=0), upscale, axis=1)


def export_attention_maps(trace: AttentionTrace, tokens: Sequence[str], grid_side: int, upscale: int, out_dir) -> list[Path]:
    if not len(trace):
        raise ContractError("attention trace is empty")
    if len(tokens) != len(trace):
        raise ContractError(f"{len(tokens)} tokens but {len(trace)} attention steps")
    if upscale < 1:
        raise ContractError(f"upscale must be at least 1, got {upscale}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, (token, alpha) in enumerate(zip(tokens, trace.steps)):
        safe = re.sub(r"[^A-Za-z0-9]", "", token) or "tok"
        path = out / f"{index}_{safe}.pgm"
        write_pgm(path, heatmap(alpha, grid_side, upscale))
        paths.append(path)
    return paths


# ---------------------------------------------------------------- comparison


def _sign(x: float) -> int:
    return (x > 0) - (x < 0)


def compare_reports(a: EvalReport, b: EvalReport) -> dict:
    """Side-by-side corpus metrics, per-sentence wins, and BLEU-4/WER disagreements."""
    ids_a = [row["id"] for row in a.per_sentence]
    ids_b = [row["id"] for row in b.per_sentence]
    if ids_a != ids_b:
        raise ContractError("reports were computed on different splits")
    metrics = [m for m in SWEEP_COLUMNS if m in a.corpus and m in b.corpus]
    wins = {}
    for m in metrics:
        better = -1 if m == "wer" else 1
        counts = {"a": 0, "b": 0, "tie": 0}
        for ra, rb in zip(a.per_sentence, b.per_sentence):
            s = _sign(ra[m] - rb[m]) * better
            counts["a" if s > 0 else "b" if s < 0 else "tie"] += 1
        wins[m] = counts
    disagreements = []
    for ra, rb in zip(a.per_sentence, b.per_sentence):
        by_bleu = _sign(ra["bleu4"] - rb["bleu4"])
        by_wer = _sign(rb["wer"] - ra["wer"])
        if by_bleu * by_wer < 0:
            disagreements.append({
                "id": ra["id"],
                "bleu4_a": ra["bleu4"], "bleu4_b": rb["bleu4"],
                "wer_a": ra["wer"], "wer_b": rb["wer"],
                "caption_a": ra.get("caption"), "caption_b": rb.get("caption"),
            })
    return {
        "models": {"a": a.model, "b": b.model},
        "corpus": {m: {"a": a.corpus[m], "b": b.corpus[m]} for m in metrics},
        "per_sentence_wins": wins,
        "bleu4_wer_disagreements": disagreements,
    }


def compare(checkpoint_a, checkpoint_b, manifest: DatasetManifest, vocab_a: Vocabulary, vocab_b: Vocabulary | None = None, report_path=None) -> dict:
    report_a = evaluate(checkpoint_a, manifest, vocab_a)
    report_b = evaluate(checkpoint_b, manifest, vocab_b or vocab_a)
    result = compare_reports(report_a, report_b)
    result["split"] = manifest.split
    result["checkpoints"] = {"a": str(checkpoint_a), "b": str(checkpoint_b)}
    if report_path is not None:
        Path(report_path).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return result


# ---------------------------------------------------------------- sweep


def sweep(
    base: TrainConfig,
    data_dir,
    out_dir,
    vocab_caps: Sequence[int],
    epoch_counts: Sequence[int],
    image_counts: Sequence[int],
    split: str = "test",
) -> list[dict]:
    """Train and evaluate every (vocabulary cap, epochs, images) setting.

    Runs that differ only in epoch count share one training run: it is trained
    to the largest count and each shorter setting reads its per-epoch
    checkpoint, which is what a separate shorter run would have produced.
    """
    if not vocab_caps or not epoch_counts or not image_counts:
        raise ContractError("sweep lists must be nonempty")
    if min(epoch_counts) < 1:
        raise ContractError("epoch counts must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_all = load_manifest(data_dir, "train")
    val = load_manifest(data_dir, "val") if (Path(data_dir) / "val.jsonl").exists() else None
    test = load_manifest(data_dir, split)
    runs = {}
    for k, n in itertools.product(vocab_caps, image_counts):
        if n > len(train_all):
            raise ContractError(f"sweep asks for {n} images but the train split has {len(train_all)}")
        subset = train_all.subset(n)
        vocab = build_vocabulary([c for r in subset.records for c in r.captions], k)
        run_dir = out / f"k{k}_n{n}"
        run_dir.mkdir(parents=True, exist_ok=True)
        vocab.save(run_dir / "vocab.tsv")
        config = replace(base, vocab_cap=k, epochs=max(epoch_counts))
        result = train(config, subset, vocab, run_dir, val)
        runs[k, n] = (run_dir, vocab, result.runlog)
    rows = []
    for k, e, n in itertools.product(vocab_caps, epoch_counts, image_counts):
        run_dir, vocab, runlog = runs[k, n]
        report = evaluate(checkpoint_path(run_dir, e), test, vocab)
        row = {"vocab_cap": k, "epochs": e, "images": n}
        row.update({m: report.corpus[m] for m in SWEEP_COLUMNS})
        row["runlog_epochs"] = [r.epoch for r in runlog.rows[:e]]
        row["train_loss"] = [r.train_loss for r in runlog.rows[:e]]
        rows.append(row)
    (out / "sweep.json").write_text(json.dumps({"model": base.model, "rows": rows}, indent=2) + "\n", encoding="utf-8")
    header = ("vocab_cap", "epochs", "images", *SWEEP_COLUMNS)
    lines = ["\t".join(header)]
    lines += ["\t".join(str(row[c]) if c in ("vocab_cap", "epochs", "images") else f"{row[c]:.6f}" for c in header) for row in rows]
    (out / "sweep.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
