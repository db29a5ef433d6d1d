"""Caption evaluation metrics: BLEU-1..4, GLEU, METEOR-lite and WER.

All functions take pre-tokenized sentences (lists of strings). Scores are
deterministic and, at corpus level, independent of the order of the pairs.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError

Tokens = Sequence[str]

METRICS = ("bleu", "gleu", "meteor", "wer")

METRIC_VARIANTS = {
    "bleu": (
        "clipped n-gram precision, geometric mean over orders 1..N with uniform weights, "
        "brevity penalty min(1, exp(1 - r/c)) with r the reference length closest to c (ties to shorter); "
        "sentence level is unsmoothed (any zero precision gives 0); corpus level pools counts and lengths"
    ),
    "gleu": (
        "n-grams of orders 1..4 pooled; per reference min(matches/candidate n-grams, matches/reference n-grams); "
        "maximum over references; corpus value is the arithmetic mean"
    ),
    "meteor": (
        "METEOR-lite: exact unigram matches only (no stemming or synonyms), greedy left-to-right alignment, "
        "Fmean = 10PR/(R+9P), penalty 0.5*(chunks/matches)^3, maximum over references; corpus value is the mean"
    ),
    "wer": "word-level Levenshtein distance over reference length, minimum over references; corpus value is the mean",
}


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_refs(references: Sequence[Tokens]) -> None:
    if not references or not any(len(r) for r in references):
        raise ContractError("at least one nonempty reference is required")


def modified_precision(candidate: Tokens, references: Sequence[Tokens], n: int) -> tuple[int, int]:
    """Clipped n-gram matches and the candidate's n-gram total."""
    if not 1 <= n <= 4:
        raise ContractError(f"n-gram order must be in 1..4, got {n}")
    cand = ngrams(candidate, n)
    if not cand:
        return 0, 0
    ceiling: Counter = Counter()
    for ref in references:
        for gram, count in ngrams(ref, n).items():
            ceiling[gram] = max(ceiling[gram], count)
    matches = sum(min(count, ceiling[gram]) for gram, count in cand.items())
    return matches, sum(cand.values())


def closest_ref_length(candidate_length: int, references: Sequence[Tokens]) -> int:
    return min((abs(len(r) - candidate_length), len(r)) for r in references)[1]


def brevity_penalty(candidate_length: int, reference_length: int) -> float:
    if candidate_length == 0:
        return 0.0
    if candidate_length >= reference_length:
        return 1.0
    return math.exp(1.0 - reference_length / candidate_length)


def _bleu_from_counts(matches: Sequence[int], totals: Sequence[int], c: int, r: int) -> float:
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    max_n = len(matches)
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    return brevity_penalty(c, r) * math.exp(log_p)


def bleu(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4) -> float:
    _check_refs(references)
    if not 1 <= max_n <= 4:
        raise ContractError(f"max_n must be in 1..4, got {max_n}")
    counts = [modified_precision(candidate, references, n) for n in range(1, max_n + 1)]
    return _bleu_from_counts(
        [m for m, _ in counts], [t for _, t in counts],
        len(candidate), closest_ref_length(len(candidate), references),
    )


def corpus_bleu(pairs: Sequence[tuple[Tokens, Sequence[Tokens]]], max_n: int = 4) -> float:
    """BLEU with n-gram counts and lengths pooled over all pairs before the geometric mean."""
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for candidate, references in pairs:
        _check_refs(references)
        for n in range(1, max_n + 1):
            m, t = modified_precision(candidate, references, n)
            matches[n - 1] += m
            totals[n - 1] += t
        c += len(candidate)
        r += closest_ref_length(len(candidate), references)
    return _bleu_from_counts(matches, totals, c, r)


def gleu(candidate: Tokens, references: Sequence[Tokens]) -> float:
    _check_refs(references)
    cand = Counter()
    for n in range(1, 5):
        cand.update(ngrams(candidate, n))
    cand_total = sum(cand.values())
    if cand_total == 0:
        return 0.0
    best = 0.0
    for ref in references:
        grams = Counter()
        for n in range(1, 5):
            grams.update(ngrams(ref, n))
        ref_total = sum(grams.values())
        if ref_total == 0:
            continue
        overlap = sum((cand & grams).values())
        best = max(best, min(overlap / cand_total, overlap / ref_total))
    return best


def _align(candidate: Tokens, reference: Tokens) -> list[tuple[int, int]]:
    used = [False] * len(reference)
    pairs = []
    for i, word in enumerate(candidate):
        for j, ref_word in enumerate(reference):
            if not used[j] and ref_word == word:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def _chunks(alignment: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(candidate: Tokens, references: Sequence[Tokens]) -> float:
    _check_refs(references)
    best = 0.0
    for ref in references:
        alignment = _align(candidate, ref)
        m = len(alignment)
        if m == 0:
            continue
        precision = m / len(candidate)
        recall = m / len(ref)
        fmean = 10.0 * precision * recall / (recall + 9.0 * precision)
        penalty = 0.5 * (_chunks(alignment) / m) ** 3
        best = max(best, fmean * (1.0 - penalty))
    return best


def edit_distance(a: Tokens, b: Tokens) -> int:
    """Word-level Levenshtein distance with unit costs."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(reference: Tokens, hypothesis: Tokens) -> float:
    if not reference:
        raise ContractError("WER needs a nonempty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def wer_multi(references: Sequence[Tokens], hypothesis: Tokens) -> float:
    _check_refs(references)
    return min(wer(r, hypothesis) for r in references if r)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    per_sentence: list[dict]
    corpus: dict
    model: str = ""
    config: dict = field(default_factory=dict)
    metric_variants: dict = field(default_factory=lambda: dict(METRIC_VARIANTS))

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "config": self.config,
            "per_sentence": self.per_sentence,
            "corpus": self.corpus,
            "metric_variants": self.metric_variants,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(obj["per_sentence"], obj["corpus"], obj["model"], obj["config"], obj["metric_variants"])


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def corpus_evaluate(
    pairs: Sequence[tuple[Tokens, Sequence[Tokens]]],
    which: Iterable[str] = METRICS,
    ids: Sequence | None = None,
) -> EvalReport:
    """Per-sentence rows (in input order) plus order-independent corpus aggregates."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("corpus_evaluate needs at least one pair")
    which = tuple(which)
    unknown = set(which) - set(METRICS)
    if unknown:
        raise ContractError(f"unknown metrics {sorted(unknown)}")
    ids = list(range(len(pairs))) if ids is None else list(ids)
    rows = []
    for pid, (cand, refs) in zip(ids, pairs):
        row = {"id": pid}
        if "bleu" in which:
            for n in range(1, 5):
                row[f"bleu{n}"] = bleu(cand, refs, n)
        if "gleu" in which:
            row["gleu"] = gleu(cand, refs)
        if "meteor" in which:
            row["meteor"] = meteor_lite(cand, refs)
        if "wer" in which:
            row["wer"] = wer_multi(refs, cand)
        rows.append(row)
    corpus = {}
    if "bleu" in which:
        for n in range(1, 5):
            corpus[f"bleu{n}"] = corpus_bleu(pairs, n)
    for name in ("gleu", "meteor", "wer"):
        if name in which:
            corpus[name] = _mean(row[name] for row in rows)
    variants = {k: v for k, v in METRIC_VARIANTS.items() if k in which}
    return EvalReport(rows, corpus, metric_variants=variants)
