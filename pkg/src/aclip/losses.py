"""Contrastive objectives: symmetric image-text InfoNCE plus the SimCLR, SimSiam and BYOL auxiliaries."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor


class ContractError(ValueError):
    pass


class TrainingDivergenceError(ArithmeticError):
    pass


def _check_unit_rows(e: Tensor, name: str, tol: float = 1e-4) -> None:
    norms = np.linalg.norm(e.data, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ContractError(f"{name} rows must be unit norm (worst deviation {worst:.3g})")


def _pick(logp: Tensor, cols: np.ndarray) -> Tensor:
    """logp[i, cols[i]] for every row i."""
    rows, width = logp.shape
    return nd.gather(logp.reshape(rows * width), np.arange(rows) * width + cols, axis=0)


def _cross_entropy_diag(logits: Tensor) -> Tensor:
    """Mean over rows of -log softmax(row)[i] with the target on the diagonal."""
    b = logits.shape[0]
    return -_pick(nd.log_softmax(logits, axis=1), np.arange(b)).mean()


def clip_loss(e_img: Tensor, e_txt: Tensor, tau) -> Tensor:
    """0.5 * image->text InfoNCE + 0.5 * text->image InfoNCE on cosine logits scaled by 1/tau."""
    _check_unit_rows(e_img, "image embedding")
    _check_unit_rows(e_txt, "text embedding")
    if e_img.shape != e_txt.shape:
        raise ContractError(f"embedding shapes differ: {e_img.shape} vs {e_txt.shape}")
    logits = nd.matmul(e_img, e_txt.T) / tau
    return 0.5 * _cross_entropy_diag(logits) + 0.5 * _cross_entropy_diag(logits.T)


def multi_view_clip_loss(views: Sequence[Tensor], e_txt: Tensor, tau) -> tuple[Tensor, list[Tensor]]:
    if not views:
        raise ValueError("need at least one view")
    per_view = [clip_loss(v, e_txt, tau) for v in views]
    total = per_view[0]
    for extra in per_view[1:]:
        total = total + extra
    return total * (1.0 / len(per_view)), per_view


def simclr_loss(z1: Tensor, z2: Tensor, tau_ssl: float = 0.1) -> Tensor:
    """NT-Xent over the 2B stacked views; each row's positive is its partner view, self-pairs excluded."""
    b = z1.shape[0]
    if b == 0:
        raise ValueError("simclr_loss needs a non-empty batch")
    z = nd.concat([z1, z2], axis=0)
    logits = nd.matmul(z, z.T) * (1.0 / tau_ssl)
    self_mask = np.where(np.eye(2 * b, dtype=bool), -np.inf, 0.0).astype(z.dtype)
    logp = nd.log_softmax(logits + self_mask, axis=1)
    partner = np.concatenate([np.arange(b) + b, np.arange(b)])
    return -_pick(logp, partner).mean()


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity."""
    return (nd.l2_normalize(a, axis=-1) * nd.l2_normalize(b, axis=-1)).sum(axis=-1)


def simsiam_loss(p1: Tensor, p2: Tensor, z1: Tensor, z2: Tensor) -> Tensor:
    """-0.5 * [cos(p1, sg(z2)) + cos(p2, sg(z1))], averaged over the batch."""
    t1 = cosine(p1, nd.stop_gradient(z2)).mean()
    t2 = cosine(p2, nd.stop_gradient(z1)).mean()
    return (t1 + t2) * -0.5


def byol_loss(p_online: Sequence[Tensor], z_ema: Tensor) -> Tensor:
    """Mean over views (and batch) of 2 - 2 cos(p, z_ema); the target never receives gradient."""
    target = nd.stop_gradient(z_ema)
    terms = [(2.0 - 2.0 * cosine(p, target)).mean() for p in p_online]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


@dataclass
class LossReport:
    vl_per_view: list[float]
    vl_mean: float
    ssl_online: float | None
    ssl_ema: float | None
    total: float
    tau: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("objective")
        return d


def total_loss(vl_mean: Tensor, vl_per_view: Sequence[Tensor], tau: float,
               ssl_online: Tensor | None = None, ssl_ema: Tensor | None = None,
               lambda_ssl: float = 1.0) -> LossReport:
    """vl_mean + lambda_ssl * (present auxiliary terms), with a finiteness check per component."""
    parts = {"vl_mean": vl_mean, "ssl_online": ssl_online, "ssl_ema": ssl_ema}
    for i, v in enumerate(vl_per_view):
        parts[f"vl_view{i}"] = v
    for name, t in parts.items():
        if t is not None and not np.all(np.isfinite(t.data)):
            raise TrainingDivergenceError(f"loss component {name} is not finite")
    objective = vl_mean
    for aux in (ssl_online, ssl_ema):
        if aux is not None and lambda_ssl != 0.0:
            objective = objective + aux * lambda_ssl
    if not math.isfinite(float(objective.data)):
        raise TrainingDivergenceError("total loss is not finite")
    return LossReport(
        vl_per_view=[float(v.data) for v in vl_per_view],
        vl_mean=float(vl_mean.data),
        ssl_online=None if ssl_online is None else float(ssl_online.data),
        ssl_ema=None if ssl_ema is None else float(ssl_ema.data),
        total=float(objective.data),
        tau=float(tau),
        objective=objective,
    )


# -- auxiliary heads -----------------------------------------------------------------

def init_ssl_params(embed_dim: int, rng: np.random.Generator, predictor: bool) -> dict[str, np.ndarray]:
    """Projection MLP (D -> 4D -> D) and optional predictor MLP (D -> D/2 -> D)."""
    d, hid, bott = embed_dim, 4 * embed_dim, max(embed_dim // 2, 1)
    p = {
        "ssl.proj.fc1.weight": rng.normal(0, 1 / math.sqrt(d), (d, hid)),
        "ssl.proj.fc1.bias": np.zeros(hid),
        "ssl.proj.fc2.weight": rng.normal(0, 1 / math.sqrt(hid), (hid, d)),
        "ssl.proj.fc2.bias": np.zeros(d),
    }
    if predictor:
        p.update({
            "ssl.pred.fc1.weight": rng.normal(0, 1 / math.sqrt(d), (d, bott)),
            "ssl.pred.fc1.bias": np.zeros(bott),
            "ssl.pred.fc2.weight": rng.normal(0, 1 / math.sqrt(bott), (bott, d)),
            "ssl.pred.fc2.bias": np.zeros(d),
        })
    return p


def mlp_head(params: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = nd.gelu(nd.linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return nd.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])
