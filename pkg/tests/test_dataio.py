import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aclip.dataio import (EOS, PAD, SOS, Corpus, PPMFormatError, Vocab, decode_ppm, detokenize, encode_ppm,
                          gen_synthetic, read_manifest, read_ppm, tokenize, write_ppm)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_white_pixel_bytes(tmp_path):
    write_ppm(tmp_path / "w.ppm", np.ones((3, 1, 1)))
    assert (tmp_path / "w.ppm").read_bytes() == b"P6\n1 1\n255\n" + b"\xff" * 3


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    raw = encode_ppm(img)
    back = decode_ppm(raw)
    assert back.shape == (3, 5, 7)
    assert encode_ppm(back) == raw
    write_ppm(tmp_path / "a.ppm", back)
    assert (tmp_path / "a.ppm").read_bytes() == raw
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), back)


@pytest.mark.parametrize("raw, where", [
    (b"P5\n1 1\n255\n\0", "byte 0"),
    (b"P6\n1 1\n65535\n\0\0\0\0\0\0", "maxval"),
    (b"P6\nx 1\n255\n\0\0\0", "byte 3"),
    (b"P6\n2 1\n255\n\0\0\0", "byte 11"),
])
def test_ppm_malformed(raw, where):
    with pytest.raises(PPMFormatError, match=where):
        decode_ppm(raw)


def test_ppm_header_comments():
    img = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff")
    np.testing.assert_array_equal(img[:, 0, 0], [0, 128 / 255, 1])


def test_tokenizer_examples():
    v = Vocab.build(["a photo of a red circle"])
    empty = tokenize("", v, 6)
    assert list(empty) == [v.sos_id, v.eos_id, v.pad_id, v.pad_id, v.pad_id, v.pad_id]
    long = tokenize("a photo of a red circle a photo", v, 5)
    assert len(long) == 5 and long[-1] == v.eos_id and list(long).count(v.eos_id) == 1
    assert np.array_equal(tokenize("A photo", v, 8), tokenize("a PHOTO", v, 8))
    assert tokenize("a blue circle", v, 8)[2] == v.unk_id
    assert v.tokens[:4] == [PAD, SOS, EOS, "<unk>"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["a", "photo", "of", "red", "circle", "there", "is"]), max_size=10))
def test_tokenize_detokenize_fixed_point(ws):
    v = Vocab.build(["a photo of red circle there is"])
    ids = tokenize(" ".join(ws), v, 16)
    assert np.array_equal(tokenize(detokenize(ids, v), v, 16), ids)


def test_vocab_validation():
    with pytest.raises(ValueError):
        Vocab(["a", "a", PAD, SOS, EOS, "<unk>"])
    with pytest.raises(ValueError):
        Vocab(["a", "b"])


def test_gen_synthetic_empty(tmp_path):
    assert gen_synthetic(0, tmp_path) == []
    assert (tmp_path / "manifest.jsonl").read_text() == ""
    assert read_manifest(tmp_path / "manifest.jsonl") == []


def test_gen_synthetic_deterministic(tmp_path):
    gen_synthetic(12, tmp_path / "a", seed=7)
    gen_synthetic(12, tmp_path / "b", seed=7)
    gen_synthetic(12, tmp_path / "c", seed=8)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_class_balance_and_records(tmp_path):
    recs = gen_synthetic(800, tmp_path, seed=1, image_size=16)
    counts = np.bincount([r.class_id for r in recs], minlength=8)
    assert counts.tolist() == [100] * 8
    for r in recs[:40]:
        x0, y0, x1, y1 = r.bbox
        assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1
        assert 0.15 <= (x1 - x0) * (y1 - y0) <= 0.35
        assert r.captions[0].startswith("a photo of a ")
    line = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert set(line) == {"image", "captions", "bbox", "class_id"}


def test_corpus_load(tiny_corpus):
    c = tiny_corpus
    assert len(c) == 24 and c.images.shape == (24, 3, 32, 32)
    assert len(c.class_names) == 8 and c.class_names[0] == "red circle"
    assert c.class_ids[:9].tolist() == [0, 1, 2, 3, 4, 5, 6, 7, 0]
    assert "a photo of a red circle" in c.all_texts()


def test_manifest_missing_field(tmp_path):
    (tmp_path / "manifest.jsonl").write_text('{"image": "x.ppm", "captions": ["a"]}\n')
    with pytest.raises(ValueError, match="bbox"):
        read_manifest(tmp_path / "manifest.jsonl")
