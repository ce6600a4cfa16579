"""ViT image encoder, causal text encoder and the projections into the joint space.

Parameters live in flat ``{name: Tensor}`` mappings so the same forward code
runs on the online weights and on the EMA shadow weights.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import ndgrad as nd
from .ndgrad import DimensionError, Tensor


class EncoderFormatError(ValueError):
    """Malformed encoder input (e.g. a caption without exactly one EOS)."""


class DegenerateEmbeddingError(ArithmeticError):
    pass


@dataclass
class VisualEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    layers: int = 2
    heads: int = 2
    width: int = 64
    embed_dim: int = 32
    frozen_patch_embed: bool = True
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise DimensionError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise DimensionError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass
class TextEncoderConfig:
    vocab_size: int = 32
    context_length: int = 16
    layers: int = 2
    heads: int = 2
    width: int = 64
    embed_dim: int = 32
    eos_id: int = 2

    def __post_init__(self):
        if self.context_length < 2:
            raise DimensionError("context_length must leave room for EOS (>= 2)")
        if self.width % self.heads:
            raise DimensionError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class AttentionRecord:
    """CLS-query attention rows.

    ``cls_rows`` has shape (B, L, H, 1 + n): for every image, layer and head the
    softmax weights of the CLS query over CLS (column 0) and the n surviving patches.
    """

    cls_rows: np.ndarray
    keep_indices: np.ndarray | None = None
    grid: tuple[int, int] | None = None

    @property
    def layers(self) -> int:
        return self.cls_rows.shape[1]


@dataclass
class ViTOutput:
    cls_feature: Tensor
    attn: AttentionRecord
    patch_features: Tensor


# -- tokenization ------------------------------------------------------------

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(C, H, W) -> (N, C*P*P), or batched (B, C, H, W) -> (B, N, C*P*P).

    Patches are ordered row-major over the grid; each token flattens (C, P, P).
    """
    img = np.asarray(image)
    single = img.ndim == 3
    if single:
        img = img[None]
    b, c, h, w = img.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    t = img.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    t = np.ascontiguousarray(t.reshape(b, gh * gw, c * patch * patch))
    return t[0] if single else t


def unpatchify(tokens: np.ndarray, patch: int, grid: tuple[int, int], channels: int = 3) -> np.ndarray:
    tok = np.asarray(tokens)
    single = tok.ndim == 2
    if single:
        tok = tok[None]
    b = tok.shape[0]
    gh, gw = grid
    img = tok.reshape(b, gh, gw, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    img = np.ascontiguousarray(img.reshape(b, channels, gh * patch, gw * patch))
    return img[0] if single else img


# -- parameter construction --------------------------------------------------

def _block_params(prefix: str, width: int, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
    std = 1.0 / math.sqrt(width)
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.attn.{name}.weight"] = rng.normal(0, std, (width, width))
        # a key bias shifts a whole softmax row by q.b and has no effect, so keys carry none
        if name != "k":
            p[f"{prefix}.attn.{name}.bias"] = np.zeros(width)
    p[f"{prefix}.ln1.gain"] = np.ones(width)
    p[f"{prefix}.ln1.bias"] = np.zeros(width)
    p[f"{prefix}.ln2.gain"] = np.ones(width)
    p[f"{prefix}.ln2.bias"] = np.zeros(width)
    p[f"{prefix}.mlp.fc1.weight"] = rng.normal(0, std, (width, 4 * width))
    p[f"{prefix}.mlp.fc1.bias"] = np.zeros(4 * width)
    p[f"{prefix}.mlp.fc2.weight"] = rng.normal(0, 1.0 / math.sqrt(4 * width), (4 * width, width))
    p[f"{prefix}.mlp.fc2.bias"] = np.zeros(width)
    return p


def init_visual_params(cfg: VisualEncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    w = cfg.width
    p = {
        "visual.patch_embed.weight": rng.normal(0, 1.0 / math.sqrt(cfg.patch_dim), (cfg.patch_dim, w)),
        "visual.patch_embed.bias": np.zeros(w),
        "visual.cls": rng.normal(0, 0.02, (w,)),
        "visual.pos": rng.normal(0, 0.02, (cfg.num_patches + 1, w)),
    }
    for layer in range(cfg.layers):
        p.update(_block_params(f"visual.blocks.{layer}", w, rng, None))
    p["visual.ln_post.gain"] = np.ones(w)
    p["visual.ln_post.bias"] = np.zeros(w)
    p["visual.proj"] = rng.normal(0, 1.0 / math.sqrt(w), (w, cfg.embed_dim))
    return p


def init_text_params(cfg: TextEncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    w = cfg.width
    p = {
        "text.token_embed": rng.normal(0, 0.02, (cfg.vocab_size, w)),
        "text.pos": rng.normal(0, 0.01, (cfg.context_length, w)),
    }
    for layer in range(cfg.layers):
        p.update(_block_params(f"text.blocks.{layer}", w, rng, None))
    p["text.ln_final.gain"] = np.ones(w)
    p["text.ln_final.bias"] = np.zeros(w)
    p["text.proj"] = rng.normal(0, 1.0 / math.sqrt(w), (w, cfg.embed_dim))
    return p


# -- transformer pieces --------------------------------------------------------

def _block(params: Mapping[str, Tensor], prefix: str, x: Tensor, heads: int, mask=None):
    b, k, w = x.shape
    c = w // heads
    h = nd.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])

    def split(name):
        y = nd.linear(h, params[f"{prefix}.attn.{name}.weight"], params.get(f"{prefix}.attn.{name}.bias"))
        return y.reshape(b, k, heads, c).transpose(0, 2, 1, 3)

    q, kk, v = split("q"), split("k"), split("v")
    logits = nd.matmul(q, kk.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(c))
    if mask is not None:
        logits = logits + mask
    attn = nd.softmax(logits, axis=-1)
    o = nd.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, k, w)
    x = x + nd.linear(o, params[f"{prefix}.attn.o.weight"], params[f"{prefix}.attn.o.bias"])
    h2 = nd.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    mid = nd.gelu(nd.linear(h2, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    x = x + nd.linear(mid, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])
    return x, attn.data


def check_keep_indices(keep, n: int, batch: int) -> np.ndarray:
    idx = np.asarray(keep)
    if idx.dtype.kind not in "iu":
        raise IndexError("keep indices must be integers")
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (batch, idx.shape[0]))
    if idx.ndim != 2 or idx.shape[0] != batch:
        raise IndexError(f"keep indices shape {idx.shape} does not match batch {batch}")
    if idx.shape[1] == 0:
        raise IndexError("keep indices are empty")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"keep index out of range [0, {n})")
    if idx.shape[1] > 1 and not (np.diff(idx, axis=1) > 0).all():
        raise IndexError("keep indices must be distinct and sorted ascending")
    return idx.astype(np.intp)


def vit_forward(params: Mapping[str, Tensor], cfg: VisualEncoderConfig, tokens,
                keep_indices=None, pos_embed: Tensor | None = None) -> ViTOutput:
    """Encode patch tokens (B, N, C*P*P); drop all but ``keep_indices`` before the stack.

    ``pos_embed`` overrides the learned (1 + N, width) position table, e.g. with a
    resampled one for a lower input resolution. The token count N is inferred
    from ``tokens`` and must match the position table.
    """
    tok = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    if tok.ndim == 2:
        tok = tok[None]
    bsz, n, _ = tok.shape
    pos = params["visual.pos"] if pos_embed is None else pos_embed
    if pos.shape[0] != n + 1:
        raise DimensionError(f"position table has {pos.shape[0] - 1} patch rows, tokens have {n}")
    idx = np.broadcast_to(np.arange(n), (bsz, n)) if keep_indices is None else check_keep_indices(keep_indices, n, bsz)
    kept = idx.shape[1]
    flat = (idx + (np.arange(bsz) * n)[:, None]).reshape(-1)
    picked = tok.reshape(bsz * n, -1)[flat].reshape(bsz, kept, -1)
    x = nd.linear(Tensor(picked, dtype=pos.dtype), params["visual.patch_embed.weight"], params["visual.patch_embed.bias"])
    x = x + nd.gather(pos, (idx + 1).reshape(-1), axis=0).reshape(bsz, kept, cfg.width)
    cls = params["visual.cls"] + nd.gather(pos, [0], axis=0)
    cls = Tensor(np.zeros((bsz, 1, cfg.width), dtype=pos.dtype)) + cls
    x = nd.concat([cls, x], axis=1)
    rows = []
    for layer in range(cfg.layers):
        x, attn = _block(params, f"visual.blocks.{layer}", x, cfg.heads)
        rows.append(attn[:, :, 0, :])
    x = nd.layer_norm(x, params["visual.ln_post.gain"], params["visual.ln_post.bias"])
    cls_feat = nd.gather(x, [0], axis=1).reshape(bsz, cfg.width)
    patch_feat = nd.gather(x, np.arange(1, kept + 1), axis=1)
    record = AttentionRecord(np.stack(rows, axis=1), None if keep_indices is None else idx, None)
    return ViTOutput(cls_feat, record, patch_feat)


def find_eos(token_ids: np.ndarray, eos_id: int) -> np.ndarray:
    ids = np.atleast_2d(np.asarray(token_ids))
    hits = ids == eos_id
    counts = hits.sum(axis=1)
    if (counts != 1).any():
        bad = int(np.flatnonzero(counts != 1)[0])
        raise EncoderFormatError(f"sequence {bad} has {int(counts[bad])} EOS tokens, expected exactly 1")
    return hits.argmax(axis=1)


def text_forward(params: Mapping[str, Tensor], cfg: TextEncoderConfig, token_ids) -> Tensor:
    """Causal transformer over (B, T) ids; returns the (B, width) feature at each EOS."""
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.intp))
    bsz, t = ids.shape
    if t > cfg.context_length:
        raise DimensionError(f"sequence length {t} exceeds context length {cfg.context_length}")
    eos = find_eos(ids, cfg.eos_id)
    table = params["text.token_embed"]
    x = nd.embedding_lookup(table, ids) + nd.gather(params["text.pos"], np.arange(t), axis=0)
    dt = table.dtype
    causal = np.triu(np.full((t, t), -np.inf, dtype=dt), k=1)
    pad = np.where(np.arange(t)[None, :] > eos[:, None], -np.inf, 0.0).astype(dt)
    mask = causal[None, None] + pad[:, None, None, :]
    # rows past EOS still see position 0, so no row is fully masked
    for layer in range(cfg.layers):
        x, _ = _block(params, f"text.blocks.{layer}", x, cfg.heads, mask)
    x = nd.layer_norm(x, params["text.ln_final.gain"], params["text.ln_final.bias"])
    flat = x.reshape(bsz * t, cfg.width)
    return nd.gather(flat, eos + np.arange(bsz) * t, axis=0)


def project_and_normalize(feature: Tensor, w_proj: Tensor) -> Tensor:
    """Project features into the joint space and scale each row to unit L2 norm."""
    z = nd.matmul(feature if feature.ndim > 1 else feature.reshape(1, -1), w_proj)
    norms = np.linalg.norm(z.data, axis=-1)
    if not (norms > 0).all():
        raise DegenerateEmbeddingError("projected embedding has zero norm")
    z = nd.l2_normalize(z, axis=-1)
    return z if feature.ndim > 1 else z.reshape(-1)


# -- bicubic position-table resize ---------------------------------------------

def _cubic_weights(t: np.ndarray) -> np.ndarray:
    # Catmull-Rom (a = -0.5) kernel at offsets -1, 0, 1, 2
    t2, t3 = t * t, t * t * t
    return np.stack([
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ], axis=-1)


def _resize_axis(a: np.ndarray, new: int, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    old = a.shape[0]
    # pad two rows each side by linear extrapolation so linear data is reproduced exactly
    lo1, lo2 = 2 * a[0] - a[1], 3 * a[0] - 2 * a[1]
    hi1, hi2 = 2 * a[-1] - a[-2], 3 * a[-1] - 2 * a[-2]
    padded = np.concatenate([lo2[None], lo1[None], a, hi1[None], hi2[None]], axis=0)
    src = (np.arange(new) + 0.5) * old / new - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    wts = _cubic_weights(frac)
    out = np.zeros((new,) + a.shape[1:], dtype=a.dtype)
    for j in range(4):
        rows = padded[base + j - 1 + 2]
        out += wts[:, j].reshape((new,) + (1,) * (a.ndim - 1)) * rows
    exact = frac == 0
    if exact.any():
        out[exact] = a[base[exact]]
    return np.moveaxis(out, 0, axis)


def interpolate_pos_embed(grid_pos: np.ndarray, new_grid: int | tuple[int, int]) -> np.ndarray:
    """Resample a (g, g, width) position grid to (g', g', width) with Catmull-Rom bicubic.

    Sample points use half-cell alignment; borders are extended linearly.
    """
    pos = np.asarray(grid_pos)
    gh, gw = (new_grid, new_grid) if isinstance(new_grid, int) else new_grid
    if pos.shape[0] < 2 or pos.shape[1] < 2 or gh < 2 or gw < 2:
        raise DimensionError("bicubic resize needs grids of at least 2x2")
    out = pos
    if out.shape[0] != gh:
        out = _resize_axis(out, gh, 0)
    if out.shape[1] != gw:
        out = _resize_axis(out, gw, 1)
    return out.copy()


def resize_pos_table(pos: np.ndarray, new_grid: int) -> np.ndarray:
    """(1 + g*g, width) table -> (1 + g'*g', width); the CLS row passes through."""
    g = int(round(math.sqrt(pos.shape[0] - 1)))
    grid = pos[1:].reshape(g, g, -1)
    if new_grid == g:
        return pos.copy()
    new = interpolate_pos_embed(grid, new_grid).reshape(new_grid * new_grid, -1)
    return np.concatenate([pos[:1], new], axis=0)


# -- checkpoint container ------------------------------------------------------

CHECKPOINT_MAGIC = b"ACLIPCKP"


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays to a flat binary file.

    Layout: 8-byte magic ``ACLIPCKP``; uint64 little-endian header length H;
    H bytes of UTF-8 JSON ``{"meta": ..., "tensors": {name: {"shape", "dtype",
    "offset", "nbytes"}}}`` space-padded so the data section starts on an
    8-byte boundary; then each array's little-endian C-order bytes at
    ``offset`` (relative to the data section start, 8-byte aligned).
    """
    entries = {}
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr, order="C")
        if a.dtype not in (np.float32, np.float64):
            raise TypeError(f"checkpoint array {name} has unsupported dtype {a.dtype}")
        raw = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        entries[name] = {"shape": list(a.shape), "dtype": a.dtype.name, "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        pad = (-len(raw)) % 8
        if pad:
            blobs.append(b"\0" * pad)
        offset += len(raw) + pad
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    header += b" " * ((-(16 + len(header))) % 8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise EncoderFormatError(f"{path}: bad checkpoint magic")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    base = 16 + hlen
    arrays = {}
    for name, e in header["tensors"].items():
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arrays[name] = np.frombuffer(buf, dtype=dt).astype(np.dtype(e["dtype"])).reshape(e["shape"])
    return arrays, header["meta"]
