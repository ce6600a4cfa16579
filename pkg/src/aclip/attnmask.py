"""Attentive token selection driven by an EMA copy of the image encoder.

The EMA encoder sees the unmasked enclosing crop of all online views once per
image. Its CLS-query attention, averaged over layers and heads, gives a score
per patch; each online view resamples that shared map onto its own patch grid
and keeps the tokens picked by the selection strategy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ndgrad as nd
from .encoders import AttentionRecord, VisualEncoderConfig, patchify, resize_pos_table, vit_forward
from .ndgrad import DimensionError, Tensor


class StructureError(ValueError):
    pass


class GeometryError(ValueError):
    pass


_EPS = 1e-9


@dataclass(frozen=True)
class CropRect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise GeometryError(f"degenerate rectangle {self}")
        if min(self.x0, self.y0) < -_EPS or max(self.x1, self.y1) > 1 + _EPS:
            raise GeometryError(f"rectangle {self} leaves the unit square")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, other: "CropRect", tol: float = 1e-9) -> bool:
        return (other.x0 >= self.x0 - tol and other.y0 >= self.y0 - tol
                and other.x1 <= self.x1 + tol and other.y1 <= self.y1 + tol)

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)

    @classmethod
    def full(cls) -> "CropRect":
        return cls(0.0, 0.0, 1.0, 1.0)


@dataclass
class ScoreMap:
    grid: np.ndarray
    source_rect: CropRect = field(default_factory=CropRect.full)
    cls_mass: float | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1)


@dataclass
class SelectionStrategy:
    kind: str = "low"
    random_fraction: float = 0.25

    def __post_init__(self):
        if self.kind not in ("low", "high", "mixed"):
            raise ValueError(f"unknown selection strategy {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "SelectionStrategy":
        name, _, frac = text.partition(":")
        return cls(name, float(frac)) if frac else cls(name)


LOW = SelectionStrategy("low")
HIGH = SelectionStrategy("high")


def Mixed(random_fraction: float = 0.25) -> SelectionStrategy:
    return SelectionStrategy("mixed", random_fraction)


@dataclass
class ViewPlan:
    rects: list[CropRect]
    kept: list[np.ndarray]
    granularity: int
    patch_size: int
    grid: tuple[int, int]
    ema_rect: CropRect | None = None
    score_map: ScoreMap | None = None
    view_scores: list[np.ndarray] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.rects)


# -- scores --------------------------------------------------------------------

def score_grids(attn: AttentionRecord, reduce_layers: str = "all", grid: tuple[int, int] | None = None):
    """Vectorized score computation: returns ((B, Gh, Gw) scores, (B,) CLS self-attention mass)."""
    rows = np.asarray(attn.cls_rows)
    if rows.ndim != 4 or rows.shape[1] == 0:
        raise StructureError(f"attention record must be (B, L, H, 1+N) with L >= 1, got {rows.shape}")
    if reduce_layers == "last":
        rows = rows[:, -1:]
    elif reduce_layers != "all":
        raise ValueError(f"reduce_layers must be 'all' or 'last', not {reduce_layers!r}")
    mean = rows.mean(axis=(1, 2))
    n = mean.shape[1] - 1
    if grid is None:
        g = int(round(math.sqrt(n)))
        if g * g != n:
            raise StructureError(f"{n} patch columns do not form a square grid")
        grid = (g, g)
    return mean[:, 1:].reshape((mean.shape[0],) + tuple(grid)), mean[:, 0]


def attn_scores(attn: AttentionRecord, reduce_layers: str = "all", index: int = 0,
                source_rect: CropRect | None = None) -> ScoreMap:
    """Per-patch score: CLS-row attention averaged over the chosen layers and all heads."""
    if attn.keep_indices is not None:
        raise StructureError("scores need attention over the full, unmasked token set")
    grids, cls = score_grids(attn, reduce_layers, attn.grid)
    return ScoreMap(grids[index], source_rect or CropRect.full(), float(cls[index]))


# -- EMA -------------------------------------------------------------------------

def ema_momentum(t: int, total_steps: int, base: float = 0.996) -> float:
    """Cosine ramp of the EMA momentum from ``base`` at t=0 to exactly 1 at t=total_steps."""
    if total_steps <= 0 or not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    if t == total_steps:
        return 1.0
    return 1.0 - (1.0 - base) * (math.cos(math.pi * t / total_steps) + 1.0) / 2.0


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    base_momentum: float = 0.996
    step: int = 0
    total_steps: int = 1

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor | np.ndarray], base_momentum=0.996, total_steps=1):
        shadow = {k: np.array(v.data if isinstance(v, Tensor) else v, copy=True) for k, v in params.items()}
        return cls(shadow, base_momentum, 0, total_steps)

    @property
    def momentum(self) -> float:
        return ema_momentum(min(self.step, self.total_steps), self.total_steps, self.base_momentum)

    def tensors(self) -> dict[str, Tensor]:
        """Gradient-free views of the shadow weights for forward passes."""
        out = {}
        for k, v in self.shadow.items():
            t = Tensor.__new__(Tensor)
            t.data, t.grad, t.requires_grad, t._parents, t._backward, t.name = v, None, False, (), None, k
            out[k] = t
        return out


def ema_update(online_params: Mapping[str, Tensor | np.ndarray], state: EmaState,
               momentum: float | None = None) -> EmaState:
    """shadow <- mu * shadow + (1 - mu) * online, in place; advances the step counter."""
    mu = state.momentum if momentum is None else momentum
    for name, shadow in state.shadow.items():
        if name not in online_params:
            raise StructureError(f"online parameters lack {name!r}")
        src = online_params[name]
        online = src.data if isinstance(src, Tensor) else np.asarray(src)
        if online.shape != shadow.shape:
            raise StructureError(f"{name}: shadow shape {shadow.shape} != online shape {online.shape}")
        if mu == 1.0:
            continue
        if mu == 0.0:
            shadow[...] = online
            continue
        shadow *= mu
        shadow += (1.0 - mu) * online
    state.step += 1
    return state


# -- geometry ----------------------------------------------------------------------

def enclosing_rect(views: Sequence[CropRect]) -> CropRect:
    if not views:
        raise ValueError("enclosing_rect needs at least one view")
    return CropRect(min(v.x0 for v in views), min(v.y0 for v in views),
                    max(v.x1 for v in views), max(v.y1 for v in views))


def bilinear_batch(arr: np.ndarray, src: np.ndarray, dst: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of (M, C, H, W) arrays.

    Row m covers normalized rectangle ``src[m]``; output row m covers ``dst[m]``
    (both (M, 4) arrays of x0, y0, x1, y1). Values are sampled at output cell
    centers with input cell-center alignment and clamped borders.
    """
    m, c, h, w = arr.shape
    src = np.asarray(src, dtype=np.float64).reshape(m, 4)
    dst = np.asarray(dst, dtype=np.float64).reshape(m, 4)

    def axis_coords(n_out, n_in, d0, d1, s0, s1):
        u = d0[:, None] + (np.arange(n_out) + 0.5)[None, :] / n_out * (d1 - d0)[:, None]
        x = (u - s0[:, None]) / (s1 - s0)[:, None] * n_in - 0.5
        x = np.clip(x, 0.0, n_in - 1)
        lo = np.minimum(np.floor(x).astype(np.intp), max(n_in - 2, 0))
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    x0, x1, fx = axis_coords(out_w, w, dst[:, 0], dst[:, 2], src[:, 0], src[:, 2])
    y0, y1, fy = axis_coords(out_h, h, dst[:, 1], dst[:, 3], src[:, 1], src[:, 3])
    bi = np.arange(m)[:, None, None]
    # gather (M, out_h, out_w, C) corners
    a = arr.transpose(0, 2, 3, 1)

    def corner(yy, xx):
        return a[bi, yy[:, :, None], xx[:, None, :]]

    fx_ = fx[:, None, :, None].astype(arr.dtype)
    fy_ = fy[:, :, None, None].astype(arr.dtype)
    c00, c01, c10, c11 = corner(y0, x0), corner(y0, x1), corner(y1, x0), corner(y1, x1)
    top = c00 + (c01 - c00) * fx_
    bot = c10 + (c11 - c10) * fx_
    out = top + (bot - top) * fy_
    # a convex combination never leaves its corners' range; clamp away rounding overshoot
    lo = np.minimum(np.minimum(c00, c01), np.minimum(c10, c11))
    hi = np.maximum(np.maximum(c00, c01), np.maximum(c10, c11))
    out = np.clip(out, lo, hi)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def crop_resize(images: np.ndarray, rects: np.ndarray, size: int) -> np.ndarray:
    """Crop normalized rectangles out of (B, C, H, W) images and resize to size x size."""
    b = images.shape[0]
    full = np.broadcast_to(CropRect.full().as_array(), (b, 4))
    return bilinear_batch(images, full, rects, size, size)


def resample_scores(score_map: ScoreMap, target_rect: CropRect, target_grid: tuple[int, int]) -> ScoreMap:
    """Bilinearly sample ``score_map`` at the cell centers of a grid laid over ``target_rect``."""
    if not score_map.source_rect.contains(target_rect):
        raise GeometryError(f"target {target_rect} is not inside source {score_map.source_rect}")
    gh, gw = target_grid
    out = bilinear_batch(score_map.grid[None, None], score_map.source_rect.as_array(),
                         target_rect.as_array(), gh, gw)
    return ScoreMap(out[0, 0], target_rect, score_map.cls_mass)


def group_scores(score_map: ScoreMap, granularity: int, patch_size: int) -> ScoreMap:
    """Average scores over (g/P) x (g/P) blocks of patches."""
    if granularity % patch_size:
        raise DimensionError(f"granularity {granularity} is not a multiple of patch size {patch_size}")
    f = granularity // patch_size
    gh, gw = score_map.grid.shape
    if gh % f or gw % f:
        raise DimensionError(f"score grid {gh}x{gw} not divisible into {f}x{f} blocks")
    if f == 1:
        return ScoreMap(score_map.grid.copy(), score_map.source_rect, score_map.cls_mass)
    blocks = score_map.grid.reshape(gh // f, f, gw // f, f).mean(axis=(1, 3))
    return ScoreMap(blocks, score_map.source_rect, score_map.cls_mass)


def expand_blocks(block_indices: np.ndarray, block_grid: tuple[int, int], factor: int) -> np.ndarray:
    """Token indices (sorted) covered by the given row-major block indices."""
    bh, bw = block_grid
    gw = bw * factor
    rows, cols = np.divmod(np.asarray(block_indices), bw)
    dy, dx = np.divmod(np.arange(factor * factor), factor)
    tok = (rows[:, None] * factor + dy[None, :]) * gw + cols[:, None] * factor + dx[None, :]
    return np.sort(tok.reshape(-1))


# -- selection ---------------------------------------------------------------------

def _budget(n: int, ratio: float) -> int:
    return int(math.floor(n * ratio + 1e-9))


def _as_rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def select_tokens(scores, keep_ratio: float, strategy: SelectionStrategy = LOW, rng_seed=0) -> np.ndarray:
    """Indices kept by ``strategy``; sorted ascending, ties resolved toward the smaller index."""
    s = np.asarray(scores.grid if isinstance(scores, ScoreMap) else scores, dtype=np.float64).reshape(-1)
    n = s.size
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep_ratio {keep_ratio} outside (0, 1]")
    n_keep = _budget(n, keep_ratio)
    if n_keep < 1:
        raise ValueError(f"keep_ratio {keep_ratio} keeps no token out of {n}")
    if strategy.kind == "low":
        kept = np.argsort(-s, kind="stable")[:n_keep]
    elif strategy.kind == "high":
        kept = np.argsort(s, kind="stable")[:n_keep]
    else:
        rho = strategy.random_fraction
        if not 0 < rho < keep_ratio:
            raise ValueError(f"mixed random fraction {rho} must lie in (0, keep_ratio={keep_ratio})")
        order = np.argsort(-s, kind="stable")
        n_top = _budget(n, keep_ratio - rho)
        n_rand = min(_budget(n, rho), n - n_top)
        rest = order[n_top:]
        picked = _as_rng(rng_seed).choice(rest.size, size=n_rand, replace=False) if n_rand else np.empty(0, int)
        kept = np.concatenate([order[:n_top], rest[picked]])
    return np.sort(kept).astype(np.intp)


def random_mask(n: int, keep_ratio: float, rng_seed=0) -> np.ndarray:
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep_ratio {keep_ratio} outside (0, 1]")
    n_keep = _budget(n, keep_ratio)
    if n_keep < 1:
        raise ValueError(f"keep_ratio {keep_ratio} keeps no token out of {n}")
    return np.sort(_as_rng(rng_seed).choice(n, size=n_keep, replace=False)).astype(np.intp)


# -- view plans --------------------------------------------------------------------

@dataclass
class BatchPlan:
    """Kept indices for every (image, view) plus the EMA pass that produced them."""

    kept: np.ndarray                 # (B, k, n_keep)
    ema_rects: np.ndarray            # (B, 4)
    score_grids: np.ndarray | None   # (B, Ge, Ge) on the EMA crop
    cls_mass: np.ndarray | None      # (B,)
    ema_cls: Tensor | None           # (B, width) EMA CLS feature, no gradient
    view_scores: np.ndarray | None   # (B, k, G, G)


def ema_pos_table(ema_params: Mapping[str, Tensor], cfg: VisualEncoderConfig, resolution: str) -> Tensor | None:
    if resolution == "full":
        return None
    if resolution != "half":
        raise ValueError(f"ema resolution must be 'full' or 'half', not {resolution!r}")
    return Tensor(resize_pos_table(ema_params["visual.pos"].data, cfg.grid // 2))


def ema_forward(images: np.ndarray, ema_rects: np.ndarray, ema_params: Mapping[str, Tensor],
                cfg: VisualEncoderConfig, resolution: str = "full"):
    """Run the EMA encoder on the enclosing crops; returns the ViT output (no graph)."""
    size = cfg.image_size if resolution == "full" else cfg.image_size // 2
    if size % cfg.patch_size:
        raise DimensionError(f"EMA input {size}px not divisible by patch size {cfg.patch_size}")
    pixels = crop_resize(images, ema_rects, size)
    with nd.no_grad():
        return vit_forward(ema_params, cfg, patchify(pixels, cfg.patch_size),
                           pos_embed=ema_pos_table(ema_params, cfg, resolution))


def plan_batch(
    images: np.ndarray,
    view_rects: np.ndarray,
    ema_params: Mapping[str, Tensor] | None,
    cfg: VisualEncoderConfig,
    *,
    keep_ratio: float,
    strategy: str | SelectionStrategy = "low",
    granularity: int | None = None,
    ema_resolution: str = "full",
    layers: str = "all",
    seeds: np.ndarray | None = None,
    need_ema: bool = True,
) -> BatchPlan:
    """Select kept tokens for (B, k) views given their (B, k, 4) crop rectangles.

    ``strategy`` may be ``"random"`` for the unguided baseline. ``seeds`` is a
    (B, k) array of per-view RNG seeds used by random and mixed selection.
    """
    b, k = view_rects.shape[:2]
    g = cfg.grid
    n = g * g
    gran = granularity or cfg.patch_size
    factor = gran // cfg.patch_size
    if gran % cfg.patch_size or g % factor:
        raise DimensionError(f"granularity {gran} incompatible with patch {cfg.patch_size} and grid {g}")
    if seeds is None:
        seeds = np.arange(b * k).reshape(b, k)
    ema_rects = np.stack([view_rects[:, :, 0].min(1), view_rects[:, :, 1].min(1),
                          view_rects[:, :, 2].max(1), view_rects[:, :, 3].max(1)], axis=1)
    full_keep = keep_ratio >= 1.0
    random_sel = strategy == "random"
    run_ema = need_ema or not (full_keep or random_sel)
    grids = cls_mass = ema_cls = view_scores = None
    if run_ema:
        if ema_params is None:
            raise ValueError("attentive selection needs EMA parameters")
        out = ema_forward(images, ema_rects, ema_params, cfg, ema_resolution)
        grids, cls_mass = score_grids(out.attn, layers)
        ema_cls = out.cls_feature
    if full_keep:
        kept = np.broadcast_to(np.arange(n), (b, k, n)).copy()
        return BatchPlan(kept, ema_rects, grids, cls_mass, ema_cls, None)
    nb = (g // factor) ** 2
    n_blocks = _budget(nb, keep_ratio)
    kept = np.empty((b, k, n_blocks * factor * factor), dtype=np.intp)
    if not random_sel:
        strat = strategy if isinstance(strategy, SelectionStrategy) else SelectionStrategy.parse(strategy)
        src = np.repeat(ema_rects, k, axis=0)
        view_scores = bilinear_batch(np.repeat(grids, k, axis=0)[:, None], src,
                                     view_rects.reshape(b * k, 4), g, g)[:, 0].reshape(b, k, g, g)
    for i in range(b):
        for v in range(k):
            if random_sel:
                blocks = random_mask(nb, keep_ratio, seeds[i, v])
            else:
                vs = view_scores[i, v]
                if factor > 1:
                    vs = vs.reshape(g // factor, factor, g // factor, factor).mean(axis=(1, 3))
                blocks = select_tokens(vs, keep_ratio, strat, seeds[i, v])
            kept[i, v] = blocks if factor == 1 else expand_blocks(blocks, (g // factor, g // factor), factor)
    return BatchPlan(kept, ema_rects, grids, cls_mass, ema_cls, view_scores)


def build_view_plan(
    image: np.ndarray,
    views: Sequence[CropRect],
    ema_params: Mapping[str, Tensor],
    cfg: VisualEncoderConfig,
    *,
    keep_ratio: float | None = None,
    strategy: str | SelectionStrategy = "low",
    granularity: int | None = None,
    ema_resolution: str = "full",
    layers: str = "all",
    rng_seed: int = 0,
    image_id: int = 0,
) -> ViewPlan:
    """Plan k masked views of one (C, H, W) image from a single EMA pass.

    Without ``keep_ratio`` each view keeps floor(N / k) tokens.
    """
    k = len(views)
    ratio = (1.0 / k) if keep_ratio is None else keep_ratio
    rects = np.stack([v.as_array() for v in views])[None]
    seeds = np.array([[np.random.SeedSequence([rng_seed, image_id, v]).generate_state(1)[0] for v in range(k)]])
    bp = plan_batch(image[None], rects, ema_params, cfg, keep_ratio=ratio, strategy=strategy,
                    granularity=granularity, ema_resolution=ema_resolution, layers=layers, seeds=seeds,
                    need_ema=not (strategy == "random"))
    ema_rect = CropRect(*bp.ema_rects[0])
    smap = None if bp.score_grids is None else ScoreMap(bp.score_grids[0], ema_rect, float(bp.cls_mass[0]))
    vs = [] if bp.view_scores is None else list(bp.view_scores[0])
    return ViewPlan(list(views), [bp.kept[0, v] for v in range(k)], granularity or cfg.patch_size,
                    cfg.patch_size, (cfg.grid, cfg.grid), ema_rect, smap, vs)


# -- visualization ----------------------------------------------------------------

def render_triptych(image: np.ndarray, scores: np.ndarray, kept: np.ndarray, patch: int,
                    scale: int = 4, gap: int = 2) -> np.ndarray:
    """Original | grayscale score heatmap | masked composite, as one (H, W, 3) uint8 image.

    Dropped patches are painted mid-gray in the composite.
    """
    c, h, w = image.shape
    g = h // patch
    s = np.asarray(scores, dtype=np.float64).reshape(g, g)
    lo, hi = s.min(), s.max()
    norm = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    heat = np.kron(norm, np.ones((patch, patch)))
    heat_rgb = np.repeat(heat[None], 3, axis=0)
    mask = np.zeros(g * g, dtype=bool)
    mask[np.asarray(kept, dtype=int)] = True
    keep_px = np.kron(mask.reshape(g, g).astype(float), np.ones((patch, patch))) > 0.5
    comp = np.where(keep_px[None], image, 0.5)
    panels = [image, heat_rgb, comp]
    sep = np.ones((3, h, gap))
    row = np.concatenate([panels[0], sep, panels[1], sep, panels[2]], axis=2)
    row = np.clip(row, 0, 1)
    if scale > 1:
        row = row.repeat(scale, axis=1).repeat(scale, axis=2)
    return np.round(row.transpose(1, 2, 0) * 255).astype(np.uint8)
