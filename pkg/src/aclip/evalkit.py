"""Zero-shot classification, retrieval recall, mask coverage and an analytic FLOP ledger."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .attnmask import CropRect, ViewPlan, plan_batch
from .dataio import Corpus, Vocab, format_prompt, tokenize
from .encoders import TextEncoderConfig, VisualEncoderConfig


class EvalArgumentError(ValueError):
    pass


# -- zero-shot ------------------------------------------------------------------------

@dataclass
class ZeroShotResult:
    predictions: np.ndarray
    accuracy: float | None
    class_embeds: np.ndarray = field(repr=False)


def class_embeddings(class_names: Sequence[str], templates: Sequence[str],
                     text_encoder: Callable[[list[str]], np.ndarray]) -> np.ndarray:
    """Unit-norm mean over templates of each class's prompt embeddings, shape (C, D)."""
    if not class_names:
        raise EvalArgumentError("class list is empty")
    if not templates:
        raise EvalArgumentError("template list is empty")
    prompts = [format_prompt(t, name) for name in class_names for t in templates]
    emb = np.asarray(text_encoder(prompts), dtype=np.float64)
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    mean = emb.reshape(len(class_names), len(templates), -1).mean(axis=1)
    return mean / np.linalg.norm(mean, axis=1, keepdims=True)


def zero_shot_classify(image_embeds: np.ndarray, class_names: Sequence[str], templates: Sequence[str],
                       text_encoder: Callable[[list[str]], np.ndarray], labels=None) -> ZeroShotResult:
    """Predict the class whose averaged prompt embedding has the highest cosine with each image."""
    cls = class_embeddings(class_names, templates, text_encoder)
    img = np.asarray(image_embeds, dtype=np.float64)
    img = img / np.linalg.norm(img, axis=1, keepdims=True)
    pred = np.argmax(img @ cls.T, axis=1)
    acc = None if labels is None else float(np.mean(pred == np.asarray(labels)))
    return ZeroShotResult(pred, acc, cls)


# -- retrieval ------------------------------------------------------------------------------

def _ranks(sim: np.ndarray, relevant: np.ndarray) -> np.ndarray:
    """0-based rank of the best relevant candidate per query row.

    A candidate with equal similarity but a smaller index ranks ahead, so ties
    are broken by index.
    """
    m = sim.shape[1]
    order = np.lexsort((np.broadcast_to(np.arange(m), sim.shape), -sim), axis=1)
    hit = np.take_along_axis(relevant, order, axis=1)
    if not hit.any(axis=1).all():
        raise EvalArgumentError("every query needs at least one relevant candidate")
    return hit.argmax(axis=1)


def recall_at_k(sim: np.ndarray, ks: Sequence[int] = (1, 5, 10), relevant=None) -> dict[int, float]:
    sim = np.asarray(sim, dtype=np.float64)
    rel = np.eye(*sim.shape, dtype=bool) if relevant is None else np.asarray(relevant, dtype=bool)
    ranks = _ranks(sim, rel)
    return {int(k): float(np.mean(ranks < k)) for k in ks}


def retrieval_metrics(e_img: np.ndarray, e_txt: np.ndarray, ks: Sequence[int] = (1, 5, 10),
                      relevant=None) -> dict[str, dict[int, float]]:
    """R@k in both directions on cosine similarity.

    By default row i of ``e_img`` pairs only with row i of ``e_txt``. ``relevant``
    (M_img x M_txt booleans) widens the set of correct partners, for corpora where
    one caption legitimately describes several images.
    """
    e_img = np.asarray(e_img, dtype=np.float64)
    e_txt = np.asarray(e_txt, dtype=np.float64)
    if len(e_img) == 0 or len(e_txt) == 0:
        raise EvalArgumentError("retrieval needs at least one pair")
    if relevant is None and e_img.shape != e_txt.shape:
        raise EvalArgumentError(f"paired embeddings differ in shape: {e_img.shape} vs {e_txt.shape}")
    a = e_img / np.linalg.norm(e_img, axis=1, keepdims=True)
    b = e_txt / np.linalg.norm(e_txt, axis=1, keepdims=True)
    sim = a @ b.T
    rel = np.eye(len(a), len(b), dtype=bool) if relevant is None else np.asarray(relevant, dtype=bool)
    return {"i2t": recall_at_k(sim, ks, rel), "t2i": recall_at_k(sim.T, ks, rel.T)}


# -- mask coverage ----------------------------------------------------------------------------

@dataclass
class Coverage:
    values: np.ndarray   # (k,) fraction of inside patches kept, 0 where empty
    empty: np.ndarray    # (k,) no patch center fell inside the box


def inside_patches(view: CropRect, bbox: CropRect, grid: tuple[int, int]) -> np.ndarray:
    """Row-major boolean mask of patches whose centers, mapped to image coordinates, lie in ``bbox``."""
    gh, gw = grid
    cy = view.y0 + (np.arange(gh) + 0.5) / gh * view.height
    cx = view.x0 + (np.arange(gw) + 0.5) / gw * view.width
    iy = (cy >= bbox.y0) & (cy <= bbox.y1)
    ix = (cx >= bbox.x0) & (cx <= bbox.x1)
    return (iy[:, None] & ix[None, :]).reshape(-1)


def mask_coverage(plan: ViewPlan, bbox: CropRect) -> Coverage:
    vals, empty = [], []
    for rect, kept in zip(plan.rects, plan.kept):
        inside = inside_patches(rect, bbox, plan.grid)
        total = int(inside.sum())
        empty.append(total == 0)
        vals.append(0.0 if total == 0 else float(inside[np.asarray(kept)].sum()) / total)
    return Coverage(np.array(vals), np.array(empty))


def coverage_stats(images: np.ndarray, bboxes: Sequence[CropRect], ema_params, vcfg: VisualEncoderConfig,
                   strategy: str, keep_ratio: float = 0.5, seed: int = 0, granularity: int | None = None,
                   batch: int = 64) -> dict:
    """Mean coverage over images with a single full-image view per image."""
    vals, flagged = [], 0
    full = CropRect.full()
    for start in range(0, len(images), batch):
        chunk = images[start:start + batch]
        b = len(chunk)
        rects = np.broadcast_to(full.as_array(), (b, 1, 4)).copy()
        seeds = np.array([[np.random.SeedSequence([seed, start + i]).generate_state(1)[0]] for i in range(b)])
        bp = plan_batch(chunk, rects, ema_params, vcfg, keep_ratio=keep_ratio, strategy=strategy,
                        granularity=granularity, seeds=seeds, need_ema=False)
        for i in range(b):
            plan = ViewPlan([full], [bp.kept[i, 0]], granularity or vcfg.patch_size, vcfg.patch_size,
                            (vcfg.grid, vcfg.grid))
            cov = mask_coverage(plan, bboxes[start + i])
            if cov.empty[0]:
                flagged += 1
            else:
                vals.append(cov.values[0])
    return {"strategy": strategy, "keep_ratio": keep_ratio, "mean": float(np.mean(vals)) if vals else 0.0,
            "n": len(vals), "empty": flagged}


# -- FLOP ledger ------------------------------------------------------------------------------

@dataclass
class BranchFlops:
    """Forward FLOPs of one encoder branch, summed over layers and passes.

    ``attn_quadratic`` is the score/value product 2 n^2 w; ``attn_proj`` the
    q/k/v/o projections 4 n w^2 (the attention term is their sum); ``pointwise``
    the MLP 8 n w^2.
    """

    tokens: int
    passes: int
    attn_proj: float
    attn_quadratic: float
    pointwise: float

    @property
    def attention(self) -> float:
        return self.attn_proj + self.attn_quadratic

    @property
    def total(self) -> float:
        return self.attention + self.pointwise

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(attention=self.attention, total=self.total)
        return d


def layer_flops(n: int, width: int) -> tuple[float, float, float]:
    """(4 n w^2, 2 n^2 w, 8 n w^2) for one layer over n tokens."""
    n, w = float(n), float(width)
    return 4 * n * w * w, 2 * n * n * w, 8 * n * w * w


def branch(n: int, width: int, layers: int, passes: int = 1) -> BranchFlops:
    proj, quad, mlp = layer_flops(n, width)
    s = layers * passes
    return BranchFlops(n, passes, s * proj, s * quad, s * mlp)


@dataclass
class FlopLedger:
    branches: dict[str, BranchFlops]
    baseline: dict[str, BranchFlops]

    @staticmethod
    def _sum(branches: Mapping[str, BranchFlops], key: str) -> float:
        return float(sum(getattr(b, key) for b in branches.values()))

    def total(self, key: str = "total", which: str = "all") -> float:
        br = self.branches if which == "all" else {which: self.branches[which]}
        return self._sum(br, key)

    def ratios(self) -> dict[str, float]:
        """Online-branch and whole-run ratios against the plain single full view."""
        out = {}
        for key in ("attn_quadratic", "attention", "pointwise", "total"):
            out[f"online_{key}"] = self.branches["online"].__getattribute__(key) / getattr(self.baseline["online"], key)
        out["all_total"] = self.total() / self._sum(self.baseline, "total")
        return out

    def to_dict(self) -> dict:
        return {"branches": {k: v.to_dict() for k, v in self.branches.items()},
                "baseline": {k: v.to_dict() for k, v in self.baseline.items()},
                "totals": {k: self.total(k) for k in ("attn_proj", "attn_quadratic", "attention", "pointwise", "total")},
                "ratios": self.ratios()}

    def rows(self) -> list[tuple]:
        rows = []
        for label, br in (("run", self.branches), ("baseline", self.baseline)):
            for name, b in br.items():
                rows.append((label, name, b.tokens, b.passes, b.attn_proj, b.attn_quadratic, b.attention,
                             b.pointwise, b.total))
        return rows


def flop_model(vcfg: VisualEncoderConfig, views: int = 1, keep_ratio: float = 1.0, ema: str | None = None,
               tcfg: TextEncoderConfig | None = None, granularity: int | None = None,
               training: bool = False) -> FlopLedger:
    """Transformer-layer FLOPs per image for a masked multi-view configuration.

    Token counts exclude CLS. The EMA branch (``"full"`` or ``"half"`` resolution)
    runs once on the unmasked enclosing crop. With ``training`` the online and
    text branches count forward plus backward as three forward passes; the EMA
    branch has no backward.
    """
    n = vcfg.num_patches
    gran = granularity or vcfg.patch_size
    f = gran // vcfg.patch_size
    nb = (vcfg.grid // f) ** 2
    kept = int(np.floor(nb * keep_ratio + 1e-9)) * f * f
    mult = 3 if training else 1
    br = {"online": branch(kept, vcfg.width, vcfg.layers, views * mult)}
    base = {"online": branch(n, vcfg.width, vcfg.layers, mult)}
    if ema is not None:
        if ema not in ("full", "half"):
            raise EvalArgumentError(f"ema must be 'full' or 'half', not {ema!r}")
        br["ema"] = branch(n if ema == "full" else (vcfg.grid // 2) ** 2, vcfg.width, vcfg.layers, 1)
    if tcfg is not None:
        br["text"] = branch(tcfg.context_length, tcfg.width, tcfg.layers, mult)
        base["text"] = branch(tcfg.context_length, tcfg.width, tcfg.layers, mult)
    return FlopLedger(br, base)


# -- report ------------------------------------------------------------------------------------

def caption_relevance(captions_per_image: Sequence[Sequence[str]], queries: Sequence[str]) -> np.ndarray:
    """relevant[i, j] when query text j is one of image i's captions."""
    return np.array([[q in set(caps) for q in queries] for caps in captions_per_image], dtype=bool)


def evaluate(params, cfg, vocab: Vocab, corpus: Corpus, *, retrieval_pairs: int = 64, ks=(1, 5, 10),
             coverage: bool = True, seed: int = 0) -> dict:
    """Metrics dictionary for a parameter set on a held-out corpus."""
    from .trainer import image_embeddings, text_embeddings

    vcfg = cfg.visual
    tcfg = cfg.text(len(vocab), vocab.eos_id)
    images = corpus.images.astype(cfg.dtype)

    def encode_text(texts):
        ids = np.stack([tokenize(t, vocab, cfg.context_length) for t in texts])
        return text_embeddings(params, tcfg, ids)

    e_img = image_embeddings(params, vcfg, images)
    zs = zero_shot_classify(e_img, corpus.class_names, corpus.templates, encode_text, corpus.class_ids)
    m = min(retrieval_pairs, len(corpus))
    rng = np.random.default_rng([seed, 7])
    caps = [corpus.records[i].captions[rng.integers(len(corpus.records[i].captions))] for i in range(m)]
    e_txt = encode_text(caps)
    ks = [k for k in ks if k <= m] or [1]
    strict = retrieval_metrics(e_img[:m], e_txt, ks)
    rel = caption_relevance([corpus.records[i].captions for i in range(m)], caps)
    caption_set = retrieval_metrics(e_img[:m], e_txt, ks, relevant=rel)
    report = {
        "n_images": len(corpus),
        "zero_shot": {"top1": zs.accuracy, "n_classes": len(corpus.class_names)},
        "retrieval": {"pairs": m, "caption_set": caption_set, "strict": strict},
    }
    if coverage and all(r.bbox is not None for r in corpus.records):
        boxes = [CropRect(*r.bbox) for r in corpus.records]
        report["coverage"] = {s: coverage_stats(images, boxes, params, vcfg, s, 0.5, seed)
                              for s in ("low", "high", "random")}
    return report


def dumps_report(report: dict) -> str:
    def fix(o):
        if isinstance(o, dict):
            return {str(k): fix(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [fix(v) for v in o]
        if isinstance(o, np.generic):
            return o.item()
        return o
    return json.dumps(fix(report), indent=2, sort_keys=True)
