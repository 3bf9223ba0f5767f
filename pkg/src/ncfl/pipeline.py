"""Recurrent orchestration, the training objective and the two-stage trainer."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (FeatureMap, FeatureStage, ModelConfig, VideoClip, load_checkpoint, save_checkpoint,
                   write_tensor)
from .data import ClipPair, add_awgn, augment as augment_batch, sample_patch_batch
from .flow import FlowEstimator, MConv, MVRefiner, pretrain_flow, warp_tensor
from .refine import FeatureRefiner
from .restore import Restorer

log = logging.getLogger(__name__)


@dataclass
class RecurrentState:
    prev_frame: Optional[torch.Tensor] = None
    prev_features: Optional[torch.Tensor] = None
    t: int = 0


def _make_mvr(cfg: ModelConfig):
    if not cfg.mvr:
        return None
    if "mvr" in cfg.conv_replacements:
        return MConv(cfg.mvr_hidden)
    return MVRefiner(cfg.mvr_hidden)


class NCFLNet(nn.Module):
    """Alignment, refinement and fusion wired into a recurrent restoration network.

    With ``cfg.direction == "bi"`` a backward branch (own refinement and
    restoration, shared flow estimator) supplies features from future frames.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.feature_width
        self.flow = FlowEstimator(cfg.flow_width, cfg.flow_levels, cfg.flow_layers)
        self.mvr = _make_mvr(cfg)
        self.refiner = FeatureRefiner(cfg)
        self.bidirectional = cfg.direction == "bi"
        width = 2 * C if self.bidirectional else C
        self.restorer = Restorer(width, C, cfg.unet_channels, cfg.cab_per_scale, cfg.cab_reduction, cfg.restoration)
        if self.bidirectional:
            self.mvr_b = _make_mvr(cfg)
            self.refiner_b = FeatureRefiner(cfg)
            self.restorer_b = Restorer(C, C, cfg.unet_channels, cfg.cab_per_scale, cfg.cab_reduction,
                                       cfg.restoration)

    def flow_parameters(self):
        return list(self.flow.parameters())

    def main_parameters(self):
        flow_ids = {id(p) for p in self.flow.parameters()}
        return [p for p in self.parameters() if id(p) not in flow_ids]

    # -- one recurrent cell ------------------------------------------------
    def align(self, x, state: RecurrentState, mvr, motion=None):
        """Warped previous features; zeros (and zero flow) at the first step.

        ``motion`` optionally supplies a precomputed ``(mv, refined mv)`` pair.
        """
        B, _, H, W = x.shape
        if state.prev_features is None:
            zeros = x.new_zeros(B, self.cfg.feature_width, H, W)
            return zeros, x.new_zeros(B, 2, H, W), x.new_zeros(B, 2, H, W)
        if motion is None:
            mv = self.flow(state.prev_frame, x)
            mv_ref = mvr(mv) if mvr is not None else mv
        else:
            mv, mv_ref = motion
        return warp_tensor(state.prev_features, mv_ref), mv, mv_ref

    def motion(self, prev, cur, mvr):
        """Flow and refined flow for stacked frame pairs ``[B, N, 3, H, W]`` in one batch."""
        B, N = cur.shape[:2]
        if N == 0:
            return []
        flat = lambda t: t.reshape(B * N, *t.shape[2:])
        mv = self.flow(flat(prev), flat(cur))
        mv_ref = mvr(mv) if mvr is not None else mv
        mv = mv.reshape(B, N, *mv.shape[1:])
        mv_ref = mv_ref.reshape(B, N, *mv_ref.shape[1:])
        return [(mv[:, i], mv_ref[:, i]) for i in range(N)]

    def step(self, state: RecurrentState, x, backward_feats=None, collect: bool = False, motion=None):
        """Advance the forward recursion by one frame.

        Returns ``(restored, ce_bits, new_state, info)``.
        """
        c_hat, mv, mv_ref = self.align(x, state, self.mvr, motion)
        c_tilde, ce, info = self.refiner(x, c_hat)
        feats = c_tilde
        if self.bidirectional:
            if backward_feats is None:
                backward_feats = torch.zeros_like(c_tilde)
            feats = torch.cat([c_tilde, backward_feats], 1)
        y, c = self.restorer(x, feats)
        info = _collect(info, mv, mv_ref, c_tilde) if collect else {}
        return y, ce, RecurrentState(x, c, state.t + 1), info

    def _backward_scan(self, frames):
        T = frames.shape[1]
        B, _, _, H, W = frames.shape
        state = RecurrentState()
        refined = [None] * T
        ces = [frames.new_zeros(()) for _ in range(T)]
        # pair t maps frame t onto frame t+1
        motion = self.motion(frames[:, 1:], frames[:, :-1], self.mvr_b)
        for t in reversed(range(T)):
            x = frames[:, t]
            if state.prev_features is None:
                c_tilde = x.new_zeros(B, self.cfg.feature_width, H, W)
            else:
                c_hat, _, _ = self.align(x, state, self.mvr_b, motion[t])
                c_tilde, ces[t], _ = self.refiner_b(x, c_hat)
            _, c = self.restorer_b(x, c_tilde)
            refined[t] = c_tilde
            state = RecurrentState(x, c, state.t + 1)
        return refined, ces

    def forward(self, frames, direction: Optional[str] = None, collect: bool = False):
        """Run a batch of clips ``[B, T, 3, H, W]``.

        Returns ``(outputs [B, T, 3, H, W], ce_per_frame list, infos list)``.
        Frames are reflect-padded to a multiple of 16 and outputs cropped back.
        """
        direction = direction or self.cfg.direction
        if direction not in ("uni", "bi"):
            raise ValueError(f"unknown direction {direction!r}")
        if direction == "bi" and not self.bidirectional:
            raise ValueError("bi-directional run needs a model built with direction='bi'")
        B, T, C, H, W = frames.shape
        if T < 1:
            raise ValueError("clip has no frames")
        ph, pw = (-H) % 16, (-W) % 16
        if ph or pw:
            mode = "reflect" if ph < H and pw < W else "replicate"
            frames = F.pad(frames.reshape(B * T, C, H, W), (0, pw, 0, ph), mode=mode).reshape(B, T, C, H + ph, W + pw)
        back, back_ce = (None, None)
        if direction == "bi":
            back, back_ce = self._backward_scan(frames)
        state = RecurrentState()
        outputs, ces, infos = [], [], []
        motion = [None] + self.motion(frames[:, :-1], frames[:, 1:], self.mvr)
        for t in range(T):
            y, ce, state, info = self.step(state, frames[:, t], back[t] if back else None, collect, motion[t])
            if back_ce is not None:
                ce = ce + back_ce[t]
            outputs.append(y[..., :H, :W])
            ces.append(ce)
            if collect:
                infos.append(_crop_info(info, H, W))
        return torch.stack(outputs, 1), ces, infos


def _collect(info, mv, mv_ref, c_tilde):
    out = {"mv": mv, "mv_refined": mv_ref, "c_tilde": c_tilde}
    for key in ("c_hat", "c_check", "e", "e_hat"):
        if key in info:
            out[key] = info[key]
    if "prior" in info:
        p = info["prior"]
        out.update(mu=p.mu, sigma=p.sigma, q=p.q)
    return {k: v.detach() for k, v in out.items()}


def _crop_info(info, H, W):
    out = {}
    for k, v in info.items():
        h, w = v.shape[-2:]
        # latent maps live at 1/4 resolution
        scale = max(1, round(info["c_tilde"].shape[-1] / w))
        out[k] = v[..., : math.ceil(H / scale), : math.ceil(W / scale)]
    return out


# ---------------------------------------------------------------------------
# functional entry points
# ---------------------------------------------------------------------------

def step(state: RecurrentState, x_t: torch.Tensor, model: NCFLNet):
    y, ce, new_state, _ = model.step(state, x_t)
    return y, ce, new_state


def run_clip(clip, model: NCFLNet, direction: Optional[str] = None, evaluate: bool = True):
    """Restore a :class:`VideoClip` (or ``[T, 3, H, W]`` tensor).

    Returns ``(VideoClip of outputs, list of per-frame CE bits)``.
    """
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    with torch.no_grad():
        out, ces, _ = model(frames[None], direction)
    out = out[0]
    if evaluate:
        out = out.clamp(0, 1)
    cid = clip.id if isinstance(clip, VideoClip) else "clip"
    return VideoClip(out.contiguous(), id=f"{cid}-restored"), [float(c) for c in ces]


def total_loss(outputs: torch.Tensor, targets: torch.Tensor, ce_per_frame: Sequence, lam: float) -> torch.Tensor:
    """``sum_t [MSE_t + lam * ce_t] / T`` over the time axis (dim 1 for batched, dim 0 otherwise)."""
    if outputs.shape != targets.shape:
        raise ValueError(f"outputs {tuple(outputs.shape)} and targets {tuple(targets.shape)} differ")
    tdim = 1 if outputs.ndim == 5 else 0
    T = outputs.shape[tdim]
    if len(ce_per_frame) != T:
        raise ValueError(f"{len(ce_per_frame)} CE values for {T} frames")
    loss = outputs.new_zeros(())
    for t in range(T):
        mse = F.mse_loss(outputs.select(tdim, t), targets.select(tdim, t))
        loss = loss + mse + lam * ce_per_frame[t]
    return loss / T


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class NonFiniteLoss(FloatingPointError):
    pass


def cosine_lr(base: float, it: int, total: int) -> float:
    """Cosine annealing from ``base`` at iteration 1 to 0 at iteration ``total + 1``."""
    return base * 0.5 * (1.0 + math.cos(math.pi * (it - 1) / max(total, 1)))


def iteration_seed(seed: int, it: int) -> int:
    return int(np.random.SeedSequence([seed, it]).generate_state(1)[0])


@dataclass
class TrainResult:
    model: NCFLNet
    config: ModelConfig
    records: list = field(default_factory=list)
    checkpoint: Optional[Path] = None
    flow_pretrain: list = field(default_factory=list)


def build_model(cfg: ModelConfig) -> NCFLNet:
    torch.manual_seed(cfg.seed)
    return NCFLNet(cfg)


def _psnr(a, b):
    mse = float(F.mse_loss(a.clamp(0, 1), b))
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(1.0 / mse))


_FLOW_CACHE: dict = {}


def _pretrained_flow(net, cfg: ModelConfig) -> list:
    """Pretrain ``net`` in place, reusing results for identical initial weights and settings."""
    h = hashlib.sha256()
    for v in net.state_dict().values():
        h.update(v.numpy().tobytes())
    key = (h.hexdigest(), cfg.flow_pretrain_iters, cfg.seed, cfg.patch)
    if key not in _FLOW_CACHE:
        hist = pretrain_flow(net, cfg.flow_pretrain_iters, seed=cfg.seed + 7919, size=cfg.patch)
        _FLOW_CACHE[key] = ({k: v.clone() for k, v in net.state_dict().items()}, hist)
    state, hist = _FLOW_CACHE[key]
    net.load_state_dict(state)
    return list(hist)


def train_two_stage(cfg: ModelConfig, dataset: Sequence[ClipPair], out_dir=None, max_iters: Optional[int] = None,
                    callback: Optional[Callable[[dict], None]] = None, model: Optional[NCFLNet] = None) -> TrainResult:
    """Stage 1 minimizes L2 + lambda*CE, stage 2 L2 only; both learning rates anneal to 0.

    Flow parameters stay frozen for the first ``flow_freeze_iters`` iterations.
    AWGN pairs get fresh noise every iteration when ``cfg.fresh_noise``.
    ``max_iters`` stops early without changing the schedule (used for replay checks).
    """
    if not dataset:
        raise ValueError("train_two_stage: empty dataset")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = build_model(cfg)
    pre_hist = []
    if cfg.flow_pretrain_iters:
        pre_hist = _pretrained_flow(model.flow, cfg)
    opt = torch.optim.AdamW(
        [{"params": model.main_parameters(), "name": "main"}, {"params": model.flow_parameters(), "name": "flow"}],
        lr=cfg.lr_main, betas=(0.9, 0.999), weight_decay=cfg.weight_decay,
    )
    awgn = all(p.degradation == "awgn" for p in dataset)
    records = []
    log_fh = open(out_dir / "metrics.jsonl", "w") if out_dir is not None else None
    last = cfg.total_iters if max_iters is None else min(max_iters, cfg.total_iters)
    model.train()
    try:
        for it in range(1, last + 1):
            stage = 1 if it <= cfg.stage1_iters else 2
            lam = cfg.lambda_ce if stage == 1 else 0.0
            frozen = it <= cfg.flow_freeze_iters
            lr_main = cosine_lr(cfg.lr_main, it, cfg.total_iters)
            lr_flow = 0.0 if frozen else cosine_lr(cfg.lr_flow, it, cfg.total_iters)
            for g in opt.param_groups:
                g["lr"] = lr_main if g["name"] == "main" else lr_flow
            for p in model.flow_parameters():
                p.requires_grad_(not frozen)

            seed = iteration_seed(cfg.seed, it)
            batch = sample_patch_batch(dataset, cfg.patch, cfg.clip_len, cfg.batch, seed)
            if awgn and cfg.fresh_noise:
                batch.degraded = add_awgn(batch.clean, cfg.sigma, seed + 1)
            if cfg.augment:
                batch = augment_batch(batch, seed + 2)

            outputs, ces, _ = model(batch.degraded)
            loss = total_loss(outputs, batch.clean, ces, lam)
            if not torch.isfinite(loss):
                _dump_batch(out_dir, it, batch)
                raise NonFiniteLoss(f"non-finite loss at iteration {it}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            if it % cfg.log_interval == 0 or it == last:
                with torch.no_grad():
                    l2 = float(F.mse_loss(outputs, batch.clean))
                    ce_bits = float(torch.stack([c.detach() for c in ces]).mean())
                rec = {
                    "iter": it, "loss": loss.item(), "l2": l2, "ce_bits": ce_bits,
                    "lr_main": lr_main, "lr_flow": lr_flow, "stage": stage,
                    "psnr": _psnr(outputs.detach(), batch.clean),
                }
                records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                if callback is not None:
                    callback(rec)
            if out_dir is not None and cfg.ckpt_interval and it % cfg.ckpt_interval == 0:
                save_checkpoint(model.state_dict(), out_dir / f"ckpt_{it:06d}", cfg, {"iter": it})
    finally:
        if log_fh is not None:
            log_fh.close()
        for p in model.flow_parameters():
            p.requires_grad_(True)
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(model.state_dict(), out_dir / "checkpoint", cfg, {"iter": last})
    return TrainResult(model, cfg, records, ckpt, pre_hist)


def _dump_batch(out_dir, it, batch):
    if out_dir is None:
        return
    d = out_dir / f"nonfinite_{it:06d}"
    d.mkdir(parents=True, exist_ok=True)
    for name in ("clean", "degraded"):
        t = getattr(batch, name)
        write_tensor(torch.nan_to_num(t), d / f"{name}.ncfl")
    log.error("non-finite loss at iteration %d; batch written to %s", it, d)


def load_model(path) -> NCFLNet:
    state, cfg, _ = load_checkpoint(path)
    if cfg is None:
        raise ValueError(f"{path}: checkpoint has no embedded config")
    model = NCFLNet(cfg)
    model.load_state_dict(state)
    model.eval()
    return model


def save_model(model: NCFLNet, path) -> Path:
    return save_checkpoint(model.state_dict(), path, model.cfg)
