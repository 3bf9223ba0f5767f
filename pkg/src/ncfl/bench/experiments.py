"""Evaluation reports, ablation runs, robustness distances and quantization-step exports."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from ..core import ModelConfig, VideoClip, write_tensor
from ..data import ClipPair, add_awgn, synthesize_awgn, synthetic_clips
from ..pipeline import NCFLNet, train_two_stage
from .metrics import median_filter, psnr, ssim

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# desk corpora
# ---------------------------------------------------------------------------

DESK_TRAIN = dict(n_clips=32, n_frames=8, size=64, seed=1)
DESK_HELDOUT = dict(n_clips=6, n_frames=8, size=64, seed=999)
EVAL_NOISE_SEED = 10_000


def desk_training_pairs(sigma: float = 25.0) -> list[ClipPair]:
    """Synthetic moving-pattern clips with AWGN (fresh noise is redrawn during training)."""
    clips = synthetic_clips(**DESK_TRAIN)
    return [synthesize_awgn(c, sigma, i) for i, c in enumerate(clips)]


def desk_heldout_clips() -> list[VideoClip]:
    return synthetic_clips(**DESK_HELDOUT)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts: variant, seed, clip, psnr, ssim, ...
    config_fingerprint: str = ""
    seeds: list = field(default_factory=list)

    def variants(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["variant"] not in seen:
                seen.append(r["variant"])
        return seen

    def summary(self) -> list[dict]:
        """Per variant: mean over clips for each seed, then median over seeds."""
        out = []
        for v in self.variants():
            rows = [r for r in self.rows if r["variant"] == v]
            by_seed = {}
            for r in rows:
                by_seed.setdefault(r["seed"], []).append(r)
            seed_psnr = {s: statistics.fmean(r["psnr"] for r in rs) for s, rs in by_seed.items()}
            seed_ssim = {s: statistics.fmean(r["ssim"] for r in rs) for s, rs in by_seed.items()}
            out.append({
                "variant": v,
                "psnr_median": statistics.median(seed_psnr.values()),
                "ssim_median": statistics.median(seed_ssim.values()),
                "psnr_mean": statistics.fmean(r["psnr"] for r in rows),
                "ssim_mean": statistics.fmean(r["ssim"] for r in rows),
                "psnr_by_seed": {str(k): v for k, v in sorted(seed_psnr.items())},
            })
        return out

    def to_dict(self) -> dict:
        return {
            "config_fingerprint": self.config_fingerprint,
            "seeds": list(self.seeds),
            "rows": self.rows,
            "summary": self.summary(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = ["variant", "seed", "clip", "psnr", "ssim"]
        extra = sorted({k for r in self.rows for k in r} - set(keys))
        w = csv.DictWriter(buf, fieldnames=keys + extra, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in keys + extra})
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'variant':<16} {'PSNR':>9} {'SSIM':>8}"]
        for s in self.summary():
            lines.append(f"{s['variant']:<16} {s['psnr_median']:9.4f} {s['ssim_median']:8.4f}")
        return "\n".join(lines)

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        j = out_dir / f"{stem}.json"
        c = out_dir / f"{stem}.csv"
        j.write_text(self.to_json())
        c.write_text(self.to_csv())
        return j, c


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def restore_clip(model: NCFLNet, frames: torch.Tensor, direction: Optional[str] = None) -> torch.Tensor:
    with torch.no_grad():
        out, _, _ = model(frames[None], direction)
    return out[0].clamp(0, 1)


def noisy_version(clip: VideoClip, sigma: float, index: int, seed: int = EVAL_NOISE_SEED) -> torch.Tensor:
    return add_awgn(clip.frames, sigma, seed + index)


def evaluate(model: NCFLNet, clips: Sequence[VideoClip], sigma: float, variant: str = "model", seed: int = 0,
             direction: Optional[str] = None, degraded: Optional[Sequence[torch.Tensor]] = None) -> EvalReport:
    """PSNR/SSIM of restored clips against clean ones.

    AWGN is synthesized with fixed per-clip seeds unless ``degraded`` frames
    are supplied (paired data).
    """
    model.eval()
    rows = []
    for i, clip in enumerate(clips):
        noisy = degraded[i] if degraded is not None else noisy_version(clip, sigma, i)
        out = restore_clip(model, noisy, direction)
        rows.append({
            "variant": variant, "seed": seed, "clip": clip.id,
            "psnr": psnr(out, clip.frames), "ssim": ssim(out, clip.frames),
            "input_psnr": psnr(noisy, clip.frames),
        })
    return EvalReport(rows, model.cfg.fingerprint(), [seed])


def evaluate_median(clips: Sequence[VideoClip], sigma: float, k: int = 3) -> EvalReport:
    rows = []
    for i, clip in enumerate(clips):
        noisy = noisy_version(clip, sigma, i)
        out = median_filter(noisy, k)
        rows.append({"variant": f"median{k}x{k}", "seed": 0, "clip": clip.id,
                     "psnr": psnr(out, clip.frames), "ssim": ssim(out, clip.frames),
                     "input_psnr": psnr(noisy, clip.frames)})
    return EvalReport(rows, "", [0])


# ---------------------------------------------------------------------------
# ablation variants
# ---------------------------------------------------------------------------

FIXED_STEP = 1.0

VARIANTS = {
    "full": {},
    "m_d": {},
    "m_a": dict(mvr=False, ncfl=False, fa=False),
    "baseline": dict(mvr=False, ncfl=False, fa=False),
    "m_b": dict(ncfl=False, fa=False),
    "m_c": dict(fa=False),
    "no_mvr": dict(mvr=False),
    "no_ncfl": dict(ncfl=False),
    "no_fa": dict(fa=False),
    "ncfl_noq": dict(quant_mode="none"),
    "ncfl_fixedq": dict(quant_mode="fixed", fixed_step=FIXED_STEP),
    "m_conv": dict(conv_replacements=["mvr"]),
    "n_conv": dict(conv_replacements=["ncfl"]),
    "uni": dict(direction="uni"),
    "bi": dict(direction="bi"),
}


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    """Config for a named variant; ``lambda:1/512`` style names set ``lambda_ce``."""
    if name.startswith("lambda:") or name.startswith("lambda="):
        value = float(Fraction(name.split(":", 1)[-1].split("=", 1)[-1]))
        return base.replace(lambda_ce=value)
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; known: {sorted(VARIANTS)} or lambda:<value>")
    return base.replace(**VARIANTS[name])


def ablate(config: ModelConfig, variants: Sequence[str], seeds: Sequence[int] = (0,),
           train_pairs: Optional[Sequence[ClipPair]] = None, eval_clips: Optional[Sequence[VideoClip]] = None,
           out_dir=None, cache: Optional[dict] = None) -> EvalReport:
    """Train every variant for every seed under the same budget and evaluate on held-out clips.

    ``cache`` (mapping ``(variant, seed) -> TrainResult``) lets callers reuse runs.
    """
    if not variants:
        raise ValueError("ablate: empty variant list")
    cfgs = {v: variant_config(config, v) for v in variants}  # fail fast on unknown names
    train_pairs = train_pairs if train_pairs is not None else desk_training_pairs(config.sigma)
    eval_clips = eval_clips if eval_clips is not None else desk_heldout_clips()
    report = EvalReport(config_fingerprint=config.fingerprint(), seeds=list(seeds))
    for v, seed in itertools.product(variants, seeds):
        key = (v, seed)
        result = cache.get(key) if cache is not None else None
        if result is None:
            cfg = cfgs[v].replace(seed=seed)
            run_dir = Path(out_dir) / f"{_slug(v)}_s{seed}" if out_dir is not None else None
            t0 = time.time()
            result = train_two_stage(cfg, train_pairs, out_dir=run_dir)
            log.info("trained %s seed %d in %.0fs", v, seed, time.time() - t0)
            if cache is not None:
                cache[key] = result
        rep = evaluate(result.model, eval_clips, config.sigma, variant=v, seed=seed)
        report.rows.extend(rep.rows)
    if out_dir is not None:
        report.write(out_dir, "ablation")
    return report


def _slug(name: str) -> str:
    return name.replace(":", "_").replace("/", "-").replace("=", "_")


# ---------------------------------------------------------------------------
# robustness of propagated features
# ---------------------------------------------------------------------------

def _rms(a, b):
    return float(((a - b) ** 2).mean().sqrt())


def collect_features(model: NCFLNet, frames: torch.Tensor):
    """Per-frame warped (``c_hat``) and refined (``c_tilde``) features of one clip."""
    with torch.no_grad():
        _, _, infos = model(frames[None], "uni", collect=True)
    return [i["c_hat"][0] for i in infos], [i["c_tilde"][0] for i in infos]


def robustness_report(model: NCFLNet, clean: VideoClip, sigma: float, n_seeds: int, seed: int = 0) -> dict:
    """Feature distances across noise realizations of one clean clip.

    For each of ``n_seeds`` AWGN draws the clip is run through the model and
    warped / refined features are collected at every frame ``t >= 1`` (frame 0
    has no propagated features). Distances are root-mean-square differences,
    averaged over frames and over all unordered seed pairs; ``*_to_clean``
    compares each noisy run with the run on the clean clip.
    """
    runs = []
    for s in range(n_seeds):
        noisy = add_awgn(clean.frames, sigma, seed * 1000 + s)
        runs.append(collect_features(model, noisy))
    ref_hat, ref_tilde = collect_features(model, clean.frames)
    T = len(clean)
    frames = list(range(1, T)) if T > 1 else [0]
    per_frame = []
    for t in frames:
        pairs_hat = [_rms(runs[i][0][t], runs[j][0][t]) for i, j in itertools.combinations(range(n_seeds), 2)]
        pairs_tilde = [_rms(runs[i][1][t], runs[j][1][t]) for i, j in itertools.combinations(range(n_seeds), 2)]
        per_frame.append({
            "t": t,
            "pairwise_c_hat": statistics.fmean(pairs_hat) if pairs_hat else None,
            "pairwise_c_tilde": statistics.fmean(pairs_tilde) if pairs_tilde else None,
            "clean_c_hat": statistics.fmean(_rms(r[0][t], ref_hat[t]) for r in runs),
            "clean_c_tilde": statistics.fmean(_rms(r[1][t], ref_tilde[t]) for r in runs),
            "scale_c_hat": float(ref_hat[t].pow(2).mean().sqrt()),
            "scale_c_tilde": float(ref_tilde[t].pow(2).mean().sqrt()),
        })

    def avg(key):
        vals = [r[key] for r in per_frame if r[key] is not None]
        return statistics.fmean(vals) if vals else None

    return {
        "clip": clean.id, "sigma": sigma, "n_seeds": n_seeds, "seed": seed,
        "pairwise_c_hat": avg("pairwise_c_hat"), "pairwise_c_tilde": avg("pairwise_c_tilde"),
        "clean_c_hat": avg("clean_c_hat"), "clean_c_tilde": avg("clean_c_tilde"),
        "scale_c_hat": avg("scale_c_hat"), "scale_c_tilde": avg("scale_c_tilde"),
        "per_frame": per_frame,
    }


def write_robustness(report: dict, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    j = out_dir / "robustness.json"
    c = out_dir / "robustness.csv"
    j.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    keys = ["t", "pairwise_c_hat", "pairwise_c_tilde", "clean_c_hat", "clean_c_tilde", "scale_c_hat", "scale_c_tilde"]
    with open(c, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in report["per_frame"]:
            w.writerow({k: ("" if r[k] is None else _fmt(r[k])) for k in keys})
    return j, c


# ---------------------------------------------------------------------------
# quantization-step maps
# ---------------------------------------------------------------------------

def quantization_steps(model: NCFLNet, frames: torch.Tensor, frame: int = -1) -> torch.Tensor:
    """Predicted step map ``[C_e, h, w]`` for one frame of a degraded clip."""
    comp = model.refiner.compressor
    if comp is None or not hasattr(comp, "prior") or comp.quant_mode == "none":
        raise ValueError("model has no quantization bottleneck")
    with torch.no_grad():
        _, _, infos = model(frames[None], "uni", collect=True)
    return infos[frame]["q"][0]


def export_qmaps(q: torch.Tensor, out_dir) -> list[Path]:
    """Write the raw map as ``qmap.ncfl`` and one min-max normalized 8-bit PNG per channel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(q, out_dir / "qmap.ncfl")
    paths = [out_dir / "qmap.ncfl"]
    for c in range(q.shape[0]):
        ch = q[c].double()
        lo, hi = float(ch.min()), float(ch.max())
        norm = (ch - lo) / (hi - lo) if hi > lo else torch.zeros_like(ch)
        img = (norm * 255).round().clamp(0, 255).to(torch.uint8).numpy()
        p = out_dir / f"qmap_c{c:02d}.png"
        Image.fromarray(img, mode="L").save(p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# cost of bi-directional inference
# ---------------------------------------------------------------------------

def direction_cost(model: NCFLNet, frames: torch.Tensor, repeats: int = 3) -> dict:
    """Wall-clock seconds per frame for uni and bi runs of a bi-capable model."""
    timings = {}
    for direction in ("uni", "bi"):
        restore_clip(model, frames, direction)
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            restore_clip(model, frames, direction)
            best = min(best, time.perf_counter() - t0)
        timings[direction] = best / frames.shape[0]
    timings["ratio"] = timings["bi"] / timings["uni"]
    return timings
