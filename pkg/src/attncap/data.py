"""Synthetic captioned-shapes corpus, tokenizer, vocabulary and batching.

Each scene holds one to three coloured shapes on a 3x3 placement grid. Scenes
are rendered with integer arithmetic only, so a corpus is byte-identical for
a given ``(seed, counts, side)`` on every platform. Every scene gets five
captions drawn from a small pool of paraphrase templates; all of them name the
colour and shape of every object.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, FormatError
from .pnm import read_ppm, write_ppm
from .tensor import Tensor

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 205, 30),
}
BACKGROUND = (255, 255, 255)
GRID = 3
SPLITS = ("train", "val", "test")
ROW_WORDS = ("top", "middle", "bottom")
COL_WORDS = ("left", "center", "right")

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<start>", "<end>", "<unk>")
CAPTIONS_PER_IMAGE = 5


# ---------------------------------------------------------------- scenes


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]  # (row, col) on the placement grid

    @property
    def phrase(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: int
    objects: tuple[SceneObject, ...]  # sorted row-major by cell
    seed: int


def make_scene(corpus_seed: int, scene_id: int) -> SyntheticScene:
    rng = np.random.default_rng([corpus_seed, scene_id])
    count = int(rng.integers(1, 4))
    cells = sorted(int(c) for c in rng.choice(GRID * GRID, size=count, replace=False))
    color_names = list(COLORS)
    objects = tuple(
        SceneObject(
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            color=color_names[int(rng.integers(len(color_names)))],
            cell=divmod(cell, GRID),
        )
        for cell in cells
    )
    return SyntheticScene(scene_id, objects, corpus_seed)


def _shape_mask(shape: str, s: int) -> np.ndarray:
    # doubled pixel-centre coordinates keep everything in integers
    v2 = 2 * np.arange(s)[:, None] + 1
    u2 = 2 * np.arange(s)[None, :] + 1
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "circle":
        return (u2 - s) ** 2 + (v2 - s) ** 2 <= s * s
    if shape == "triangle":
        return 2 * np.abs(u2 - s) <= v2
    raise ContractError(f"unknown shape {shape!r}")


def render_scene(scene: SyntheticScene, side: int) -> np.ndarray:
    """Rasterize to an ``(side, side, 3)`` uint8 image, no anti-aliasing."""
    if side < 16:
        raise ContractError(f"image side {side} is too small to render (minimum 16)")
    img = np.empty((side, side, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    cell = side // GRID
    offset = (side - cell * GRID) // 2
    margin = max(1, cell // 8)
    s = cell - 2 * margin
    for obj in scene.objects:
        r, c = obj.cell
        y0 = offset + r * cell + margin
        x0 = offset + c * cell + margin
        mask = _shape_mask(obj.shape, s)
        img[y0:y0 + s, x0:x0 + s][mask] = COLORS[obj.color]
    return img


def _position(cell: tuple[int, int]) -> str:
    r, c = cell
    return f"{ROW_WORDS[r]} {COL_WORDS[c]}"


def _templates(scene: SyntheticScene) -> list[str]:
    objs = scene.objects
    if len(objs) == 1:
        o = objs[0].phrase
        pos = _position(objs[0].cell)
        return [
            f"a {o} in the {pos}",
            f"there is a {o} in the {pos}",
            f"a {o} at the {pos} of the image",
            f"the image shows a {o}",
            f"a single {o}",
            f"one {o} on a plain background",
        ]
    a, b = objs[0], objs[1]
    vertical = a.cell[0] < b.cell[0]
    rel, rel_alt, inv = (
        ("above", "over", "below") if vertical else ("to the left of", "left of", "to the right of")
    )
    A, B = a.phrase, b.phrase
    if len(objs) == 2:
        return [
            f"a {A} {rel} a {B}",
            f"there is a {A} {rel_alt} a {B}",
            f"a {B} {inv} a {A}",
            f"a {A} and a {B}",
            f"two shapes a {A} and a {B}",
            f"the image shows a {A} {rel} a {B}",
        ]
    C = objs[2].phrase
    return [
        f"a {A} a {B} and a {C}",
        f"there is a {A} a {B} and a {C}",
        f"three shapes a {A} a {B} and a {C}",
        f"the image shows a {A} a {B} and a {C}",
        f"a {A} {rel} a {B} and a {C}",
        f"a {C} a {B} and a {A}",
    ]


def scene_captions(scene: SyntheticScene) -> list[str]:
    """Five distinct paraphrases, chosen deterministically per scene."""
    pool = _templates(scene)
    rng = np.random.default_rng([scene.seed, scene.scene_id, 1])
    order = rng.permutation(len(pool))[:CAPTIONS_PER_IMAGE]
    return [pool[i] for i in order]


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestRecord:
    id: int
    image: str
    captions: list[str]


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    split: str
    root: Path
    _images: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, record: ManifestRecord) -> Path:
        return self.root / record.image

    def images(self) -> np.ndarray:
        """All images as float ``[N, 3, H, W]`` in [0, 1] (cached)."""
        if self._images is None:
            arrays = [read_ppm(self.image_path(r)) for r in self.records]
            if arrays and any(a.shape != arrays[0].shape for a in arrays):
                raise FormatError(f"images in split {self.split!r} have differing sizes")
            stacked = np.stack(arrays) if arrays else np.zeros((0, 1, 1, 3), dtype=np.uint8)
            self._images = stacked.transpose(0, 3, 1, 2).astype(np.float64) / 255.0
        return self._images

    def subset(self, count: int) -> "DatasetManifest":
        return DatasetManifest(self.records[:count], self.split, self.root)


def manifest_path(root, split: str) -> Path:
    return Path(root) / f"{split}.jsonl"


def load_manifest(root, split: str) -> DatasetManifest:
    root = Path(root)
    path = manifest_path(root, split)
    if not path.exists():
        raise FormatError(f"no manifest for split {split!r} at {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            record = ManifestRecord(int(obj["id"]), str(obj["image"]), [str(c) for c in obj["captions"]])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed record ({exc})") from None
        if len(record.captions) != CAPTIONS_PER_IMAGE:
            raise FormatError(f"{path}:{lineno}: expected 5 captions, found {len(record.captions)}")
        if not (root / record.image).is_file():
            raise FormatError(f"{path}:{lineno}: missing image {record.image}")
        records.append(record)
    return DatasetManifest(records, split, root)


def generate_dataset(seed: int, counts: dict[str, int], side: int, out_dir) -> dict[str, DatasetManifest]:
    """Render a corpus under ``out_dir``; scene ids run consecutively across splits."""
    if side < 16:
        raise ContractError(f"image side {side} is too small to render (minimum 16)")
    if not counts or any(int(n) < 1 for n in counts.values()):
        raise ContractError(f"every split needs at least one image, got {counts}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifests = {}
    next_id = 0
    for split in sorted(counts, key=lambda s: SPLITS.index(s) if s in SPLITS else len(SPLITS)):
        records = []
        for scene_id in range(next_id, next_id + int(counts[split])):
            scene = make_scene(seed, scene_id)
            rel = f"images/{scene_id:06d}.ppm"
            write_ppm(out / rel, render_scene(scene, side))
            records.append(ManifestRecord(scene_id, rel, scene_captions(scene)))
        next_id += int(counts[split])
        lines = [
            json.dumps({"id": r.id, "image": r.image, "captions": r.captions}, ensure_ascii=False)
            for r in records
        ]
        manifest_path(out, split).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        manifests[split] = DatasetManifest(records, split, out)
    meta = {"seed": seed, "side": side, "counts": {k: int(v) for k, v in counts.items()}}
    (out / "corpus.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    return manifests


# ---------------------------------------------------------------- text

_STRIP = re.compile(r"[^a-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, drop characters outside [a-z0-9]."""
    tokens = (_STRIP.sub("", word) for word in text.lower().split())
    return [t for t in tokens if t]


class Vocabulary:
    """Frequency-ranked token table with reserved ids 0-3."""

    def __init__(self, tokens: Sequence[str], cap: int | None = None):
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractError("vocabulary tokens must be unique")
        self.cap = len(tokens) if cap is None else cap

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def tokens(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids]

    def dumps(self) -> str:
        return "".join(f"{tok}\t{i}\n" for i, tok in enumerate(self.id_to_token))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].isdigit():
                raise FormatError(f"{path}:{lineno}: expected 'token<TAB>id'")
            rows.append((parts[0], int(parts[1])))
        if [i for _, i in rows] != list(range(len(rows))):
            raise FormatError(f"{path}: ids must run 0..{len(rows) - 1} in order")
        if tuple(t for t, _ in rows[:4]) != RESERVED:
            raise FormatError(f"{path}: reserved tokens {RESERVED} must come first")
        return cls([t for t, _ in rows[4:]])


def build_vocabulary(captions: Sequence[str], k: int) -> Vocabulary:
    """Keep the ``k`` most frequent tokens; ties break lexicographically."""
    if k < 1:
        raise ContractError(f"vocabulary cap must be at least 1, got {k}")
    counts = Counter(tok for caption in captions for tok in tokenize(caption))
    if not counts:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return Vocabulary([tok for tok, _ in ranked], cap=k)


def encode_caption(vocab: Vocabulary, text: str, t_max: int) -> np.ndarray:
    if t_max < 3:
        raise ContractError(f"t_max must be at least 3, got {t_max}")
    ids = vocab.ids(tokenize(text))[: t_max - 2]
    row = np.full(t_max, PAD, dtype=np.int64)
    row[0] = START
    row[1:1 + len(ids)] = ids
    row[1 + len(ids)] = END
    return row


def decode_caption(vocab: Vocabulary, ids: Sequence[int]) -> list[str]:
    """Tokens between START and the first END, skipping padding."""
    out = []
    for i in ids:
        i = int(i)
        if i == END:
            break
        if i in (PAD, START):
            continue
        out.append(vocab.id_to_token[i])
    return out


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    images: Tensor  # [B, 3, H, W]
    tokens: np.ndarray  # [B, T] ids, PAD-filled after END
    lengths: np.ndarray  # effective lengths, START and END included
    image_ids: np.ndarray


def encode_manifest(manifest: DatasetManifest, vocab: Vocabulary, t_max: int) -> np.ndarray:
    """Token rows ``[N, 5, t_max]`` for every caption of every record."""
    rows = np.stack([
        np.stack([encode_caption(vocab, c, t_max) for c in r.captions]) for r in manifest.records
    ])
    body = rows[:, :, 1:]
    if rows.size and not np.any(body >= len(RESERVED)):
        raise ContractError("vocabulary shares no token with the manifest captions")
    return rows


def make_batches(
    manifest: DatasetManifest,
    vocab: Vocabulary,
    batch_size: int,
    t_max: int,
    shuffle_seed,
) -> Iterator[Batch]:
    """One example per (image, caption) pair, shuffled; the last batch may be partial.

    ``shuffle_seed`` may be an int or a ``numpy.random.Generator`` (advanced in place).
    """
    if batch_size < 1:
        raise ContractError(f"batch size must be at least 1, got {batch_size}")
    rows = encode_manifest(manifest, vocab, t_max)
    images = manifest.images()
    n_img, n_cap = rows.shape[:2]
    rng = np.random.default_rng(shuffle_seed)
    order = rng.permutation(n_img * n_cap)
    ids = np.array([r.id for r in manifest.records], dtype=np.int64)
    for start in range(0, order.size, batch_size):
        pick = order[start:start + batch_size]
        img_idx, cap_idx = np.divmod(pick, n_cap)
        tokens = rows[img_idx, cap_idx]
        lengths = np.argmax(tokens == END, axis=1) + 1
        yield Batch(Tensor._wrap(images[img_idx]), tokens, lengths, ids[img_idx])
