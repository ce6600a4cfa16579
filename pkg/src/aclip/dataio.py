"""Synthetic image-caption corpus, binary PPM codec and a word-level tokenizer."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
SPECIALS = (PAD, SOS, EOS, UNK)

COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.12, 0.20, 0.92),
    "yellow": (0.95, 0.88, 0.10),
    "purple": (0.60, 0.10, 0.75),
    "cyan": (0.10, 0.85, 0.90),
}
SHAPES = ("circle", "square", "triangle", "cross")
TEMPLATES = (
    "a photo of a {color} {shape}",
    "a {color} {shape} on a noisy background",
    "there is a {shape} colored {color}",
)


class PPMFormatError(ValueError):
    pass


# -- PPM ----------------------------------------------------------------------------

def encode_ppm(pixels: np.ndarray) -> bytes:
    """Binary P6 bytes for a (3, H, W) float image in [0, 1] or an (H, W, 3) uint8 image."""
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"uint8 image must be (H, W, 3), got {arr.shape}")
        hwc = arr
    else:
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"float image must be (3, H, W), got {arr.shape}")
        hwc = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w = hwc.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(hwc).tobytes()


def write_ppm(path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(pixels))


def decode_ppm(raw: bytes, where: str = "<bytes>") -> np.ndarray:
    """Parse P6 bytes into a (3, H, W) float64 image in [0, 1]."""
    pos = 0
    fields: list[int] = []

    def skip_space_and_comments(p):
        while p < len(raw):
            ch = raw[p:p + 1]
            if ch == b"#":
                while p < len(raw) and raw[p:p + 1] not in (b"\n", b"\r"):
                    p += 1
            elif ch.isspace():
                p += 1
            else:
                break
        return p

    if raw[:2] != b"P6":
        raise PPMFormatError(f"{where}: byte 0: expected magic 'P6'")
    pos = 2
    for label in ("width", "height", "maxval"):
        start = skip_space_and_comments(pos)
        if start == pos:
            raise PPMFormatError(f"{where}: byte {pos}: expected whitespace before {label}")
        end = start
        while end < len(raw) and raw[end:end + 1].isdigit():
            end += 1
        if end == start:
            raise PPMFormatError(f"{where}: byte {start}: expected decimal {label}")
        fields.append(int(raw[start:end]))
        pos = end
    width, height, maxval = fields
    if maxval != 255:
        raise PPMFormatError(f"{where}: byte {pos}: maxval {maxval} unsupported (only 255)")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise PPMFormatError(f"{where}: byte {pos}: expected single whitespace after maxval")
    pos += 1
    need = width * height * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise PPMFormatError(f"{where}: byte {pos}: expected {need} pixel bytes, found {len(body)}")
    hwc = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return hwc.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    return decode_ppm(path.read_bytes(), str(path))


# -- vocabulary and tokenizer ------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        missing = [s for s in SPECIALS if s not in self.index]
        if missing:
            raise ValueError(f"vocabulary lacks specials {missing}")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        seen = sorted({w for t in texts for w in words(t)})
        return cls(list(SPECIALS) + [w for w in seen if w not in SPECIALS])

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def sos_id(self) -> int:
        return self.index[SOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]


def tokenize(caption: str, vocab: Vocab, context_length: int) -> np.ndarray:
    """SOS + word ids + EOS, truncated to keep EOS, right-padded to ``context_length``."""
    if context_length < 2:
        raise ValueError("context_length must be >= 2")
    ids = [vocab.index.get(w, vocab.unk_id) for w in words(caption)][: context_length - 2]
    seq = [vocab.sos_id] + ids + [vocab.eos_id]
    seq += [vocab.pad_id] * (context_length - len(seq))
    return np.array(seq, dtype=np.int64)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    out = []
    for i in ids:
        tok = vocab.tokens[int(i)]
        if tok == EOS:
            break
        if tok in SPECIALS:
            continue
        out.append(tok)
    return " ".join(out)


# -- synthetic corpus -------------------------------------------------------------------

@dataclass
class PairRecord:
    image: str
    captions: list[str]
    bbox: tuple[float, float, float, float]
    class_id: int

    def to_json(self) -> str:
        return json.dumps({"image": self.image, "captions": self.captions,
                           "bbox": [float(v) for v in self.bbox], "class_id": self.class_id})


def class_names(colors: Sequence[str], shapes: Sequence[str]) -> list[str]:
    return [f"{c} {s}" for c in colors for s in shapes]


def captions_for(color: str, shape: str) -> list[str]:
    return [t.format(color=color, shape=shape) for t in TEMPLATES]


def format_prompt(template: str, class_name: str) -> str:
    """Fill a template's {color}/{shape} (or {name}) slots from a "color shape" class name."""
    color, _, shape = class_name.partition(" ")
    return template.format(color=color, shape=shape, name=class_name)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    c = (np.arange(size) + 0.5) / size * 2 - 1
    y, x = np.meshgrid(c, c, indexing="ij")
    if shape == "circle":
        return x * x + y * y <= 1.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        return (y >= -1) & (np.abs(x) <= (y + 1) / 2)
    if shape == "cross":
        return (np.abs(x) <= 0.35) | (np.abs(y) <= 0.35)
    raise ValueError(f"unknown shape {shape!r}")


def render_sample(rng: np.random.Generator, color: str, shape: str, image_size: int,
                  area_range=(0.20, 0.30)) -> tuple[np.ndarray, tuple[float, float, float, float]]:
    """Draw one object on a gray textured-noise background; returns ((3, S, S) image, bbox)."""
    s = image_size
    cell = max(s // 8, 1)
    coarse = rng.uniform(0.25, 0.75, size=(s // cell + 1, s // cell + 1))
    texture = np.kron(coarse, np.ones((cell, cell)))[:s, :s]
    gray = np.clip(texture + rng.normal(0, 0.06, size=(s, s)), 0, 1)
    img = np.repeat(gray[None], 3, axis=0) + rng.normal(0, 0.02, size=(3, s, s))
    frac = rng.uniform(*area_range)
    side = int(round(np.sqrt(frac) * s))
    side = min(max(side, 2), s)
    top = int(rng.integers(0, s - side + 1))
    left = int(rng.integers(0, s - side + 1))
    mask = _shape_mask(shape, side)
    rgb = np.asarray(COLORS[color])[:, None, None] + rng.normal(0, 0.03, size=(3, side, side))
    patch = img[:, top:top + side, left:left + side]
    img[:, top:top + side, left:left + side] = np.where(mask[None], rgb, patch)
    bbox = (left / s, top / s, (left + side) / s, (top + side) / s)
    return np.clip(img, 0.0, 1.0), bbox


def gen_synthetic(n: int, out_dir, image_size: int = 32, seed: int = 0,
                  colors: Sequence[str] = ("red", "green", "blue", "yellow"),
                  shapes: Sequence[str] = ("circle", "square"), start_index: int = 0) -> list[PairRecord]:
    """Write ``n`` PPM images plus ``manifest.jsonl`` and ``classes.json`` under ``out_dir``.

    Classes are assigned round-robin over colors x shapes, so every class gets
    n // n_classes or one more sample. Output is a pure function of the arguments.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    names = class_names(colors, shapes)
    records = []
    for i in range(n):
        cls = (start_index + i) % len(names)
        color, shape = colors[cls // len(shapes)], shapes[cls % len(shapes)]
        rng = np.random.default_rng([seed, start_index + i])
        img, bbox = render_sample(rng, color, shape, image_size)
        rel = f"images/{start_index + i:06d}.ppm"
        write_ppm(out / rel, img)
        records.append(PairRecord(rel, captions_for(color, shape), bbox, cls))
    with open(out / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    (out / "classes.json").write_text(json.dumps({"names": names, "templates": list(TEMPLATES)}, indent=1) + "\n")
    return records


def read_manifest(path) -> list[PairRecord]:
    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            try:
                rec = PairRecord(d["image"], list(d["captions"]), tuple(d["bbox"]), int(d["class_id"]))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
            if not rec.captions:
                raise ValueError(f"{path}:{lineno}: record has no captions")
            records.append(rec)
    return records


@dataclass
class Corpus:
    """A manifest loaded into memory."""

    root: Path
    records: list[PairRecord]
    images: np.ndarray
    class_names: list[str]
    templates: list[str]

    @classmethod
    def load(cls, manifest) -> "Corpus":
        manifest = Path(manifest)
        if manifest.is_dir():
            manifest = manifest / "manifest.jsonl"
        root = manifest.parent
        records = read_manifest(manifest)
        images = np.stack([read_ppm(root / r.image) for r in records]) if records else np.zeros((0, 3, 1, 1))
        meta_path = root / "classes.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            names, templates = meta["names"], meta["templates"]
        else:
            names, templates = [], list(TEMPLATES)
        return cls(root, records, images, names, templates)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([r.class_id for r in self.records], dtype=np.int64)

    def all_texts(self) -> list[str]:
        texts = [c for r in self.records for c in r.captions]
        texts += [format_prompt(t, n) for n in self.class_names for t in self.templates]
        return texts
