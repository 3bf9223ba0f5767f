"""Matplotlib figures written next to the JSON/CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "axes.linewidth": 0.6,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "lines.linewidth": 1.0,
    "savefig.dpi": 150,
    "svg.hashsalt": "ncfl",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the bytes reproducible
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(records, path) -> Path:
    """Loss, CE bits and training PSNR against iteration."""
    it = np.array([r["iter"] for r in records])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.2))
        axes[0].semilogy(it, [r["loss"] for r in records], color="k")
        axes[0].set_title("total loss")
        axes[1].plot(it, [r["ce_bits"] for r in records], color="tab:red")
        axes[1].set_title("CE (bits / latent element)")
        axes[2].plot(it, [r["psnr"] for r in records], color="tab:blue")
        axes[2].set_title("train PSNR (dB)")
        stage2 = [r["iter"] for r in records if r["stage"] == 2]
        for ax in axes:
            ax.set_xlabel("iteration")
            if stage2:
                ax.axvline(stage2[0], color="0.6", ls="--", lw=0.6)
        fig.tight_layout()
        return _save(fig, path)


def ablation_bars(summary, path, baseline: float | None = None) -> Path:
    names = [s["variant"] for s in summary]
    vals = [s["psnr_median"] for s in summary]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(2.5, 0.6 * len(names) + 1), 2.4))
        ax.bar(range(len(names)), vals, color="0.55")
        for s_i, s in enumerate(summary):
            seeds = list(s.get("psnr_by_seed", {}).values())
            ax.plot([s_i] * len(seeds), seeds, "k.", ms=3)
        if baseline is not None:
            ax.axhline(baseline, color="tab:red", lw=0.8, ls="--", label="noisy input")
            ax.legend(loc="lower right")
        lo = min(vals + ([baseline] if baseline is not None else []))
        ax.set_ylim(lo - 1.0, max(vals) + 0.5)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("PSNR (dB)")
        fig.tight_layout()
        return _save(fig, path)


def robustness_bars(report, path) -> Path:
    """Per-frame pairwise distances of warped vs refined features."""
    rows = [r for r in report["per_frame"] if r["pairwise_c_hat"] is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 2.2))
        if rows:
            t = np.array([r["t"] for r in rows])
            ax.bar(t - 0.2, [r["pairwise_c_hat"] for r in rows], 0.4, label="warped", color="0.6")
            ax.bar(t + 0.2, [r["pairwise_c_tilde"] for r in rows], 0.4, label="refined", color="tab:blue")
            ax.legend()
        ax.set_xlabel("frame")
        ax.set_ylabel("pairwise RMS distance")
        ax.set_title(f"sigma={report['sigma']:g}, {report['n_seeds']} noise draws")
        fig.tight_layout()
        return _save(fig, path)


def qmap_overview(frame, q, path, channel: int = 0) -> Path:
    """Input frame next to one channel of its quantization-step map."""
    img = frame.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(4.6, 2.2))
        axes[0].imshow(img)
        axes[0].set_title("input")
        im = axes[1].imshow(q[channel].cpu().numpy(), cmap="gray")
        axes[1].set_title(f"quantization step, channel {channel}")
        fig.colorbar(im, ax=axes[1], fraction=0.046)
        for ax in axes:
            ax.set_axis_off()
        fig.tight_layout()
        return _save(fig, path)
