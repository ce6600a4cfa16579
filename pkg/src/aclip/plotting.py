"""Figures for training logs, FLOP ledgers, evaluation reports and mask triptychs.

Everything renders off-screen to files; nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(records: Sequence[dict], path, smooth: int = 25) -> Path:
    """Loss components, temperature and learning rate against step."""
    steps = np.array([r["step"] for r in records])
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_s) = plt.subplots(1, 2, figsize=(8, 3))
        series = {"vl_mean": "image-text", "ssl_online": "ssl (views)", "ssl_ema": "byol (ema)"}
        for key, label in series.items():
            vals = np.array([np.nan if r.get(key) is None else r[key] for r in records], dtype=float)
            if np.all(np.isnan(vals)):
                continue
            line, = ax_l.plot(steps, vals, lw=0.6, alpha=0.35)
            if len(vals) >= smooth > 1:
                kern = np.ones(smooth) / smooth
                ax_l.plot(steps[smooth - 1:], np.convolve(vals, kern, mode="valid"), color=line.get_color(), label=label)
            else:
                line.set_label(label)
        ax_l.set_xlabel("step")
        ax_l.set_ylabel("loss")
        ax_l.legend()
        ax_s.plot(steps, [r["tau"] for r in records], label="tau")
        ax_s.set_xlabel("step")
        ax_s.set_ylabel("temperature")
        ax_lr = ax_s.twinx()
        ax_lr.plot(steps, [r["lr"] for r in records], color="tab:gray", ls="--", lw=0.8)
        ax_lr.set_ylabel("learning rate")
        ax_lr.grid(False)
        fig.tight_layout()
        return _save(fig, path)


def plot_flops(ledger, path) -> Path:
    """Stacked per-branch FLOP bars for the configured run next to the plain single-view baseline."""
    parts = (("attn_proj", "qkvo projections"), ("attn_quadratic", "attention n^2"), ("pointwise", "mlp"))
    cols = [("baseline", name, b) for name, b in ledger.baseline.items()]
    cols += [("run", name, b) for name, b in ledger.branches.items()]
    x = np.arange(len(cols))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(cols) + 2, 3))
        bottom = np.zeros(len(cols))
        for key, label in parts:
            h = np.array([getattr(b, key) for _, _, b in cols])
            ax.bar(x, h, bottom=bottom, label=label, width=0.6)
            bottom += h
        ax.set_xticks(x, [f"{lab}\n{name}" for lab, name, _ in cols])
        ax.set_ylabel("FLOPs per image")
        ax.legend(fontsize=8)
        ax.set_title(f"run / baseline total = {ledger.ratios()['all_total']:.3f}")
        return _save(fig, path)


def plot_report(report: dict, path) -> Path:
    """Recall@k curves and coverage bars from an evaluation report."""
    ret = report["retrieval"]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        ax = axes[0]
        for proto, ls in (("caption_set", "-"), ("strict", ":")):
            for direction in ("i2t", "t2i"):
                table = ret[proto][direction]
                ks = sorted(int(k) for k in table)
                ax.plot(ks, [table[k] if k in table else table[str(k)] for k in ks], ls, marker="o",
                        label=f"{direction} ({proto.replace('_', ' ')})")
        ax.set_xlabel("k")
        ax.set_ylabel("recall@k")
        ax.set_ylim(0, 1.05)
        ax.set_title(f"zero-shot top-1 {report['zero_shot']['top1']:.3f}")
        ax.legend(fontsize=7)
        ax = axes[1]
        cov = report.get("coverage")
        if cov:
            names = list(cov)
            ax.bar(names, [cov[n]["mean"] for n in names], width=0.6)
            ax.set_ylim(0, 1)
            ax.set_ylabel("object patches kept")
        else:
            ax.set_axis_off()
        fig.tight_layout()
        return _save(fig, path)


def plot_triptychs(panels: Sequence[np.ndarray], path, titles: Sequence[str] | None = None) -> Path:
    """Stack rendered (H, W, 3) uint8 triptychs into one figure."""
    n = len(panels)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(n, 1, figsize=(6, 2.1 * n), squeeze=False)
        for i, (ax, img) in enumerate(zip(axes[:, 0], panels)):
            ax.imshow(img, interpolation="nearest")
            ax.set_axis_off()
            if titles:
                ax.set_title(titles[i], fontsize=8)
        fig.tight_layout()
        return _save(fig, path)
