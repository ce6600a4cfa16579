"""Optimization loop for masked multi-view CLIP training with an EMA scorer."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import ndgrad as nd
from .attnmask import CropRect, EmaState, crop_resize, ema_update, plan_batch
from .dataio import Corpus, Vocab, tokenize
from .encoders import (TextEncoderConfig, VisualEncoderConfig, init_text_params, init_visual_params,
                       load_checkpoint, patchify, save_checkpoint, text_forward, vit_forward)
from .losses import (LossReport, TrainingDivergenceError, byol_loss, init_ssl_params, mlp_head,
                     multi_view_clip_loss, simclr_loss, simsiam_loss, total_loss)
from .ndgrad import Tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    data: str = ""
    batch_size: int = 64
    total_steps: int = 2000
    lr: float = 3e-3
    warmup_steps: int = 100
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    views: int = 2
    keep_ratio: float | None = None
    strategy: str = "low"
    mixed_random_fraction: float = 0.25
    granularity: int = 8
    ema_resolution: str = "full"
    ema_momentum: float = 0.996
    ema_layers: str = "all"
    ssl: str = "none"
    byol: bool = False
    lambda_ssl: float = 1.0
    tau_ssl: float = 0.1
    tau_init: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 1.0
    crop_scale_min: float = 0.5
    crop_scale_max: float = 1.0
    frozen_patch_embed: bool = True
    seed: int = 0
    dtype: str = "float32"
    image_size: int = 32
    patch_size: int = 8
    layers: int = 2
    heads: int = 2
    width: int = 64
    embed_dim: int = 32
    text_layers: int = 2
    text_heads: int = 2
    text_width: int = 64
    context_length: int = 16
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        pos = ("batch_size", "total_steps", "views", "image_size", "patch_size", "layers", "heads",
               "width", "embed_dim", "text_layers", "text_heads", "text_width", "context_length", "granularity")
        for name in pos:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or self.warmup_steps < 0:
            raise ConfigError("lr must be positive; weight_decay and warmup_steps non-negative")
        if self.strategy.split(":")[0] not in ("low", "high", "mixed", "random"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.ssl not in ("none", "simclr", "simsiam"):
            raise ConfigError(f"unknown ssl task {self.ssl!r}")
        if self.ssl != "none" and self.views < 2:
            raise ConfigError("online-to-online SSL needs at least two views")
        if self.ema_resolution not in ("full", "half"):
            raise ConfigError("ema_resolution must be 'full' or 'half'")
        if self.ema_layers not in ("all", "last"):
            raise ConfigError("ema_layers must be 'all' or 'last'")
        if not 0 <= self.ema_momentum <= 1:
            raise ConfigError("ema_momentum must lie in [0, 1]")
        if self.keep_ratio is not None and not 0 < self.keep_ratio <= 1:
            raise ConfigError("keep_ratio must lie in (0, 1]")
        if self.granularity % self.patch_size or self.image_size % self.granularity:
            raise ConfigError("granularity must be a multiple of patch_size and divide image_size")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0 < self.tau_min <= self.tau_init <= self.tau_max:
            raise ConfigError("need 0 < tau_min <= tau_init <= tau_max")
        if self.batch_size == 1:
            log.warning("batch_size=1 gives a constant contrastive loss")

    @property
    def view_keep_ratio(self) -> float:
        return 1.0 / self.views if self.keep_ratio is None else self.keep_ratio

    @property
    def visual(self) -> VisualEncoderConfig:
        return VisualEncoderConfig(self.image_size, self.patch_size, self.layers, self.heads, self.width,
                                   self.embed_dim, self.frozen_patch_embed)

    def text(self, vocab_size: int, eos_id: int) -> TextEncoderConfig:
        return TextEncoderConfig(vocab_size, self.context_length, self.text_layers, self.text_heads,
                                 self.text_width, self.embed_dim, eos_id)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**dict(d))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d)


# Reference values from the large-scale setup, kept for provenance only.
LARGE_SCALE_PROFILE = {
    "batch_size": 4096, "lr": 5e-4, "weight_decay": 0.5, "image_size": 224, "patch_size": 16,
    "layers": 12, "heads": 12, "width": 768, "embed_dim": 512, "text_layers": 12, "text_heads": 8,
    "text_width": 512, "context_length": 77, "views": 2, "granularity": 32, "ema_momentum": 0.996,
}


# -- augmentation --------------------------------------------------------------------

def random_resized_crop(rng: np.random.Generator, scale_min: float = 0.5, scale_max: float = 1.0,
                        ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> CropRect:
    """Crop whose area fraction is uniform in [scale_min, scale_max].

    The aspect ratio is drawn log-uniformly from the part of ``ratio`` that fits
    the unit square at that area, so no draw is rejected.
    """
    for _ in range(10):
        area = rng.uniform(scale_min, scale_max)
        lo = max(ratio[0], area)
        hi = min(ratio[1], 1.0 / area)
        if lo > hi:
            continue
        r = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        w = min(math.sqrt(area * r), 1.0)
        h = min(math.sqrt(area / r), 1.0)
        x0 = rng.uniform(0.0, 1.0 - w)
        y0 = rng.uniform(0.0, 1.0 - h)
        return CropRect(x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0))
    side = min(1.0, math.sqrt(scale_max))
    off = (1.0 - side) / 2
    return CropRect(off, off, off + side, off + side)


@dataclass
class ColorPolicy:
    p_jitter: float = 0.8
    jitter: float = 0.4
    p_gray: float = 0.2
    p_solarize: float = 0.2
    solarize_threshold: float = 0.5
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    @classmethod
    def off(cls) -> "ColorPolicy":
        return cls(0.0, 0.4, 0.0, 0.0, 0.5, 0.0)


LUMA = np.array([0.299, 0.587, 0.114])


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="reflect")
    h, w = img.shape[1:]
    rows = sum(k[i] * pad[:, :, i:i + w] for i in range(k.size))
    return sum(k[i] * rows[:, i:i + h, :] for i in range(k.size))


def color_augment(pixels: np.ndarray, rng: np.random.Generator, policy: ColorPolicy | None = None) -> np.ndarray:
    """Brightness/contrast jitter, grayscale, solarize, Gaussian blur; each gated by its probability."""
    policy = policy or ColorPolicy()
    img = np.array(pixels, dtype=np.float64, copy=True)
    draws = rng.uniform(size=4)
    if draws[0] < policy.p_jitter:
        img = img * rng.uniform(1 - policy.jitter, 1 + policy.jitter)
        mean = float(np.tensordot(LUMA, img, axes=1).mean())
        img = (img - mean) * rng.uniform(1 - policy.jitter, 1 + policy.jitter) + mean
        img = np.clip(img, 0.0, 1.0)
    if draws[1] < policy.p_gray:
        img = np.repeat(np.tensordot(LUMA, img, axes=1)[None], 3, axis=0)
    if draws[2] < policy.p_solarize:
        img = np.where(img >= policy.solarize_threshold, 1.0 - img, img)
    if draws[3] < policy.p_blur:
        img = _gaussian_blur(img, rng.uniform(*policy.blur_sigma))
    return np.clip(img, 0.0, 1.0)


# -- schedules and optimizer -------------------------------------------------------------

def lr_schedule(t: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0 at total_steps."""
    if cfg.warmup_steps and t < cfg.warmup_steps:
        return cfg.lr * t / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = min(max(t - cfg.warmup_steps, 0) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def decays(name: str, value: np.ndarray) -> bool:
    # gains, biases, the CLS vector and log_tau are 1-d or scalar
    return value.ndim >= 2


def adamw_update(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
                 lr: float, weight_decay: float, betas=(0.9, 0.98), eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam step, in place on ``params``."""
    state.t += 1
    b1, b2 = betas
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name].data
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if weight_decay and decays(name, p):
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v) / math.sqrt(bc2) + eps)


# -- model ----------------------------------------------------------------------------------

def ssl_flags(cfg: TrainConfig) -> tuple[bool, bool]:
    """(needs projection head, needs predictor head)."""
    heads = cfg.ssl != "none" or cfg.byol
    predictor = cfg.ssl == "simsiam" or cfg.byol
    return heads, predictor


def init_params(cfg: TrainConfig, vocab_size: int, eos_id: int) -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed, 0])
    raw = init_visual_params(cfg.visual, rng)
    raw.update(init_text_params(cfg.text(vocab_size, eos_id), rng))
    raw["log_tau"] = np.array(math.log(cfg.tau_init))
    heads, predictor = ssl_flags(cfg)
    if heads:
        raw.update(init_ssl_params(cfg.embed_dim, rng, predictor))
    frozen = {"visual.patch_embed.weight", "visual.patch_embed.bias"} if cfg.frozen_patch_embed else set()
    return {k: Tensor(v, requires_grad=k not in frozen, dtype=cfg.dtype, name=k) for k, v in raw.items()}


def ema_names(params: Mapping[str, Tensor], cfg: TrainConfig) -> list[str]:
    names = [k for k in params if k.startswith("visual.")]
    if cfg.byol:
        names += [k for k in params if k.startswith("ssl.proj.")]
    return names


def image_embeddings(params: Mapping[str, Tensor], vcfg: VisualEncoderConfig, pixels: np.ndarray,
                     keep=None, batch: int = 256) -> np.ndarray:
    """Unit-norm joint-space embeddings of full (B, 3, S, S) images, no graph."""
    out = []
    with nd.no_grad():
        for i in range(0, len(pixels), batch):
            tok = patchify(pixels[i:i + batch], vcfg.patch_size)
            feat = vit_forward(params, vcfg, tok, keep_indices=keep).cls_feature
            z = nd.matmul(feat, params["visual.proj"]).data
            out.append(z / np.linalg.norm(z, axis=1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, vcfg.embed_dim))


def text_embeddings(params: Mapping[str, Tensor], tcfg: TextEncoderConfig, ids: np.ndarray,
                    batch: int = 256) -> np.ndarray:
    out = []
    with nd.no_grad():
        for i in range(0, len(ids), batch):
            feat = text_forward(params, tcfg, ids[i:i + batch])
            z = nd.matmul(feat, params["text.proj"]).data
            out.append(z / np.linalg.norm(z, axis=1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, tcfg.embed_dim))


# -- training -------------------------------------------------------------------------------

@dataclass
class Batch:
    indices: np.ndarray        # (B,) corpus rows
    rects: np.ndarray          # (B, k, 4) online crops
    pixels: np.ndarray         # (B, k, 3, S, S) augmented online views
    token_ids: np.ndarray      # (B, T)
    seeds: np.ndarray          # (B, k) selection seeds


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class Trainer:
    """Holds model, EMA, optimizer state and the data for one training run."""

    def __init__(self, cfg: TrainConfig, corpus: Corpus, vocab: Vocab | None = None,
                 params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.corpus = corpus
        self.vocab = vocab or Vocab.build(corpus.all_texts())
        self.vcfg = cfg.visual
        self.tcfg = cfg.text(len(self.vocab), self.vocab.eos_id)
        if len(corpus) < cfg.batch_size:
            raise ConfigError(f"corpus has {len(corpus)} pairs, fewer than batch_size {cfg.batch_size}")
        if corpus.images.shape[-1] != cfg.image_size:
            raise ConfigError(f"corpus images are {corpus.images.shape[-1]}px, config says {cfg.image_size}")
        self.images = corpus.images.astype(cfg.dtype)
        self.caption_ids = [np.stack([tokenize(c, self.vocab, cfg.context_length) for c in r.captions])
                            for r in corpus.records]
        self.params = params or init_params(cfg, len(self.vocab), self.vocab.eos_id)
        self.ema = EmaState.from_params({k: self.params[k] for k in ema_names(self.params, cfg)},
                                        cfg.ema_momentum, cfg.total_steps)
        self.adam = AdamState()
        self.step = 0
        self.color_policy = ColorPolicy() if cfg.ssl != "none" else None

    # -- batches --
    def prepare_batch(self, step: int) -> Batch:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 1, step])
        idx = np.sort(rng.choice(len(self.corpus), size=cfg.batch_size, replace=False))
        k = cfg.views
        rects = np.empty((len(idx), k, 4))
        seeds = np.empty((len(idx), k), dtype=np.uint64)
        ids = np.empty((len(idx), cfg.context_length), dtype=np.int64)
        view_rngs = []
        for i, image_id in enumerate(idx):
            crng = np.random.default_rng([cfg.seed, 2, step, image_id])
            caps = self.caption_ids[image_id]
            ids[i] = caps[crng.integers(len(caps))]
            row = []
            for v in range(k):
                vr = np.random.default_rng([cfg.seed, 3, step, image_id, v])
                rects[i, v] = random_resized_crop(vr, cfg.crop_scale_min, cfg.crop_scale_max).as_array()
                seeds[i, v] = _seed(cfg.seed, 4, step, image_id, v)
                row.append(vr)
            view_rngs.append(row)
        src = self.images[idx]
        pixels = np.stack([crop_resize(src, rects[:, v], cfg.image_size) for v in range(k)], axis=1)
        if self.color_policy is not None:
            for i in range(len(idx)):
                for v in range(k):
                    pixels[i, v] = color_augment(pixels[i, v], view_rngs[i][v], self.color_policy)
        return Batch(idx, rects, pixels.astype(cfg.dtype), ids, seeds)

    # -- one optimization step --
    def plan(self, batch: Batch):
        """EMA forward on the enclosing crops and token selection for every view."""
        cfg = self.cfg
        strategy = f"mixed:{cfg.mixed_random_fraction}" if cfg.strategy == "mixed" else cfg.strategy
        return plan_batch(self.images[batch.indices], batch.rects, self.ema.tensors(), self.vcfg,
                          keep_ratio=cfg.view_keep_ratio, strategy=strategy, granularity=cfg.granularity,
                          ema_resolution=cfg.ema_resolution, layers=cfg.ema_layers, seeds=batch.seeds,
                          need_ema=cfg.byol)

    def loss(self, batch: Batch, plan) -> LossReport:
        """Online forward of every masked view plus the text, and the combined objective."""
        cfg, p = self.cfg, self.params
        heads, predictor = ssl_flags(cfg)
        raw, embeds = [], []
        for v in range(cfg.views):
            tok = patchify(batch.pixels[:, v], cfg.patch_size)
            out = vit_forward(p, self.vcfg, tok, keep_indices=plan.kept[:, v])
            z = nd.matmul(out.cls_feature, p["visual.proj"])
            raw.append(z)
            embeds.append(nd.l2_normalize(z, axis=-1))
        tz = nd.matmul(text_forward(p, self.tcfg, batch.token_ids), p["text.proj"])
        e_txt = nd.l2_normalize(tz, axis=-1)
        tau = nd.exp(p["log_tau"])
        vl_mean, per_view = multi_view_clip_loss(embeds, e_txt, tau)
        ssl_online = ssl_ema = None
        proj = [mlp_head(p, "ssl.proj", z) for z in raw] if heads else []
        preds = [mlp_head(p, "ssl.pred", z) for z in proj] if predictor else []
        if cfg.ssl != "none":
            terms = []
            for a in range(cfg.views):
                for b in range(a + 1, cfg.views):
                    if cfg.ssl == "simclr":
                        terms.append(simclr_loss(nd.l2_normalize(proj[a]), nd.l2_normalize(proj[b]), cfg.tau_ssl))
                    else:
                        terms.append(simsiam_loss(preds[a], preds[b], proj[a], proj[b]))
            ssl_online = terms[0]
            for extra in terms[1:]:
                ssl_online = ssl_online + extra
            ssl_online = ssl_online * (1.0 / len(terms))
        if cfg.byol:
            shadow = self.ema.tensors()
            with nd.no_grad():
                target = mlp_head(shadow, "ssl.proj", nd.matmul(plan.ema_cls, shadow["visual.proj"]))
            ssl_ema = byol_loss(preds, target)
        return total_loss(vl_mean, per_view, float(tau.data), ssl_online, ssl_ema, cfg.lambda_ssl)

    def train_step(self, batch: Batch | None = None) -> LossReport:
        """EMA scoring, masked forward, backward, AdamW, EMA update and temperature clamp."""
        cfg, p = self.cfg, self.params
        t = self.step
        batch = batch or self.prepare_batch(t)
        try:
            report = self.loss(batch, self.plan(batch))
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"step {t}: {exc}") from None
        for tensor in p.values():
            tensor.grad = None
        report.objective.backward()
        grads = {k: v.grad for k, v in p.items() if v.requires_grad and v.grad is not None}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"step {t}: gradient of {k} is not finite")
        adamw_update(p, grads, self.adam, lr_schedule(t, cfg), cfg.weight_decay,
                     (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
        ema_update(p, self.ema)
        lt = p["log_tau"].data
        np.clip(lt, math.log(cfg.tau_min), math.log(cfg.tau_max), out=lt)
        self.step += 1
        return report

    def run(self, steps: int | None = None, log_path=None, ckpt_dir=None, progress=None) -> list[dict]:
        """Train until ``steps`` more steps are done (default: to total_steps); returns log records."""
        end = self.cfg.total_steps if steps is None else min(self.step + steps, self.cfg.total_steps)
        records = []
        fh = open(log_path, "a") if log_path else None
        try:
            while self.step < end:
                t = self.step
                mu = self.ema.momentum
                report = self.train_step()
                rec = {"step": t, "lr": lr_schedule(t, self.cfg), "mu": mu, **report.to_dict()}
                records.append(rec)
                if fh and (t % self.cfg.log_every == 0 or self.step == end):
                    fh.write(json.dumps(rec) + "\n")
                if progress:
                    progress(rec)
                if ckpt_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(Path(ckpt_dir) / f"step{self.step:06d}.ckpt")
        finally:
            if fh:
                fh.close()
        if ckpt_dir:
            self.save(Path(ckpt_dir) / "last.ckpt")
        return records

    # -- checkpoints --
    def save(self, path) -> None:
        arrays = {f"model/{k}": v.data for k, v in self.params.items()}
        arrays.update({f"ema/{k}": v for k, v in self.ema.shadow.items()})
        arrays.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        meta = {"step": self.step, "ema_step": self.ema.step, "adam_t": self.adam.t,
                "config": self.cfg.to_dict(), "vocab": self.vocab.tokens}
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, corpus: Corpus | None = None) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta["config"])
        if corpus is None:
            corpus = Corpus.load(cfg.data)
        vocab = Vocab(meta["vocab"])
        frozen = {"visual.patch_embed.weight", "visual.patch_embed.bias"} if cfg.frozen_patch_embed else set()
        params = {k[6:]: Tensor(v.copy(), requires_grad=k[6:] not in frozen, name=k[6:])
                  for k, v in arrays.items() if k.startswith("model/")}
        tr = cls(cfg, corpus, vocab, params)
        tr.ema.shadow = {k[4:]: v.copy() for k, v in arrays.items() if k.startswith("ema/")}
        tr.ema.step = meta["ema_step"]
        tr.adam = AdamState({k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")},
                            {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")},
                            meta["adam_t"])
        tr.step = meta["step"]
        return tr


def load_model(path):
    """(params, ema_shadow_params, TrainConfig, Vocab) from a checkpoint, without the corpus."""
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    params = {k[6:]: Tensor(v, name=k[6:]) for k, v in arrays.items() if k.startswith("model/")}
    ema = {k[4:]: Tensor(v, name=k[4:]) for k, v in arrays.items() if k.startswith("ema/")}
    return params, ema, cfg, Vocab(meta["vocab"])
