"""Static report figures rendered next to the delimited records."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "rd_curve_figure",
    "gop_sweep_figure",
    "ncc_map_figure",
    "training_curve_figure",
]


def _finish(fig, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def rd_curve_figure(curves: dict[str, list], out_path, quality_attr: str = "psnr_db") -> Path:
    """curves: label -> list of RDPoint."""
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for label, points in curves.items():
        pts = sorted(points, key=lambda p: p.bpp)
        ax.plot(
            [p.bpp for p in pts],
            [getattr(p, quality_attr) for p in pts],
            marker="o", label=label,
        )
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("PSNR (dB)" if quality_attr == "psnr_db" else "MS-SSIM (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _finish(fig, out_path)


def gop_sweep_figure(rows: list[dict], out_path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    gops = [r["gop"] for r in rows]
    savings = [r["bitrate_saving_pct"] for r in rows]
    ax.plot(gops, savings, marker="s")
    ax.set_xlabel("GoP size")
    ax.set_ylabel("bitrate saving vs all-intra (%)")
    ax.grid(True, alpha=0.3)
    return _finish(fig, out_path)


def ncc_map_figure(maps: dict[str, np.ndarray], out_path) -> Path:
    """maps: label -> (k, k) correlation map."""
    n = len(maps)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    vmax = max(np.abs(m).max() for m in maps.values())
    for ax, (label, m) in zip(axes[0], maps.items()):
        im = ax.imshow(np.abs(m), vmin=0, vmax=vmax, cmap="viridis")
        ax.set_title(label, fontsize=10)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    return _finish(fig, out_path)


def training_curve_figure(metrics: list[dict], out_path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    rows = [m for m in metrics if "loss" in m]
    steps = [m["step"] for m in rows]
    ax1.plot(steps, [m["loss"] for m in rows], label="train")
    val = [m for m in metrics if "val_loss" in m]
    if val:
        ax1.plot([m["step"] for m in val], [m["val_loss"] for m in val],
                 marker="o", linestyle="--", label="held-out")
        ax1.legend()
    ax1.set_xlabel("step")
    ax1.set_ylabel("RD loss")
    ax1.grid(True, alpha=0.3)
    ax2.plot(steps, [m["bpp_estimate"] for m in rows], color="tab:orange")
    ax2.set_xlabel("step")
    ax2.set_ylabel("bpp estimate / frame")
    ax2.grid(True, alpha=0.3)
    return _finish(fig, out_path)
