import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attncap.data import (
    COLORS,
    END,
    PAD,
    SHAPES,
    START,
    UNK,
    Vocabulary,
    build_vocabulary,
    decode_caption,
    encode_caption,
    generate_dataset,
    load_manifest,
    make_batches,
    make_scene,
    render_scene,
    scene_captions,
    tokenize,
)
from attncap.errors import ContractError, FormatError


def test_generation_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(7, {"train": 5, "test": 2}, 24, a)
    generate_dataset(7, {"train": 5, "test": 2}, 24, b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    match, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
    assert not mismatch and not errors


def test_ids_consecutive_and_five_captions(corpus):
    ids = []
    for split in ("train", "val", "test"):
        manifest = load_manifest(corpus, split)
        for record in manifest.records:
            assert len(record.captions) == 5
            assert len(set(record.captions)) == 5
            ids.append(record.id)
    assert ids == list(range(len(ids)))


def test_one_object_captions_name_one_shape_and_colour():
    checked = 0
    for scene_id in range(200):
        scene = make_scene(0, scene_id)
        if len(scene.objects) != 1:
            continue
        for caption in scene_captions(scene):
            words = tokenize(caption)
            assert sum(w in SHAPES for w in words) == 1
            assert sum(w in COLORS for w in words) == 1
            assert scene.objects[0].shape in words and scene.objects[0].color in words
        checked += 1
    assert checked > 10


def test_every_caption_names_every_object():
    for scene_id in range(100):
        scene = make_scene(1, scene_id)
        for caption in scene_captions(scene):
            words = tokenize(caption)
            for obj in scene.objects:
                assert obj.shape in words and obj.color in words


def test_render_places_colours_in_cells():
    scene = make_scene(0, 4)
    img = render_scene(scene, 48)
    assert img.shape == (48, 48, 3) and img.dtype == np.uint8
    for obj in scene.objects:
        r, c = obj.cell
        cell = img[r * 16:(r + 1) * 16, c * 16:(c + 1) * 16].reshape(-1, 3)
        assert (cell == COLORS[obj.color]).all(axis=1).any()


def test_side_too_small(tmp_path):
    with pytest.raises(ContractError):
        generate_dataset(0, {"train": 1}, 15, tmp_path)


def test_manifest_validation(tmp_path):
    generate_dataset(0, {"train": 2}, 16, tmp_path)
    path = tmp_path / "train.jsonl"
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    rows[0]["captions"] = rows[0]["captions"][:4]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    with pytest.raises(FormatError, match="5 captions"):
        load_manifest(tmp_path, "train")
    with pytest.raises(FormatError):
        load_manifest(tmp_path, "val")


def test_tokenize_examples():
    assert tokenize("A Red Circle.") == ["a", "red", "circle"]
    assert tokenize("") == []
    assert tokenize("don't-stop") == ["dontstop"]


def test_vocabulary_examples():
    corpus = ["a cat", "a dog"]
    one = build_vocabulary(corpus, 1)
    assert one.tokens(range(4, len(one))) == ["a"]
    assert one.ids(["cat", "dog"]) == [UNK, UNK]
    two = build_vocabulary(corpus, 2)
    assert two.tokens(range(4, len(two))) == ["a", "cat"]
    full = build_vocabulary(corpus, 10)
    assert UNK not in full.ids(["a", "cat", "dog"])
    with pytest.raises(ContractError):
        build_vocabulary([], 5)
    with pytest.raises(ContractError):
        build_vocabulary(["...", "!"], 5)


def test_vocabulary_roundtrip_and_validation(tmp_path):
    vocab = build_vocabulary(["a red circle", "a blue square"], 10)
    vocab.save(tmp_path / "v.tsv")
    again = Vocabulary.load(tmp_path / "v.tsv")
    assert again == vocab and again.fingerprint() == vocab.fingerprint()
    (tmp_path / "bad.tsv").write_text("a\t0\n")
    with pytest.raises(FormatError):
        Vocabulary.load(tmp_path / "bad.tsv")


def test_encode_caption_examples():
    vocab = build_vocabulary(["a red circle"], 10)
    assert encode_caption(vocab, "", 5).tolist() == [START, END, PAD, PAD, PAD]
    row = encode_caption(vocab, "a green circle", 8)
    assert row[2] == UNK
    text = "a red circle"
    assert decode_caption(vocab, encode_caption(vocab, text, 8)) == tokenize(text)


def test_encode_caption_truncates():
    vocab = build_vocabulary(["a b c d e"], 10)
    row = encode_caption(vocab, "a b c d e", 5)
    assert row.tolist()[0] == START and row.tolist()[-1] == END
    assert len(decode_caption(vocab, row)) == 3


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["red", "blue", "circle", "a", "over"]), max_size=10), st.integers(3, 16))
def test_encoded_rows_satisfy_batch_invariants(words, t_max):
    vocab = build_vocabulary(["red blue circle a over"], 10)
    row = encode_caption(vocab, " ".join(words), t_max)
    assert row.shape == (t_max,) and row[0] == START
    end = int(np.argmax(row == END))
    assert row[end] == END and np.all(row[end + 1:] == PAD)
    assert np.all(row[1:end] >= 4)


def test_batch_sizes(corpus, vocab, tmp_path):
    generate_dataset(0, {"train": 10}, 16, tmp_path)
    manifest = load_manifest(tmp_path, "train")
    v = build_vocabulary([c for r in manifest.records for c in r.captions], 100)
    sizes = [len(b.tokens) for b in make_batches(manifest, v, 16, 16, 0)]
    assert sizes == [16, 16, 16, 2]


def test_batches_deterministic_and_well_formed(corpus, vocab):
    manifest = load_manifest(corpus, "train")
    a = list(make_batches(manifest, vocab, 7, 16, 3))
    b = list(make_batches(manifest, vocab, 7, 16, 3))
    assert all(np.array_equal(x.tokens, y.tokens) for x, y in zip(a, b))
    assert all(np.array_equal(x.image_ids, y.image_ids) for x, y in zip(a, b))
    for batch in a:
        assert batch.images.shape[1:] == (3, 16, 16)
        assert np.all(batch.tokens[:, 0] == START)
        for row, length in zip(batch.tokens, batch.lengths):
            assert row[length - 1] == END and np.all(row[length:] == PAD)


def test_vocab_sharing_nothing_is_a_contract_error(corpus):
    manifest = load_manifest(corpus, "train")
    with pytest.raises(ContractError):
        next(make_batches(manifest, Vocabulary(["zebra"]), 4, 16, 0))
