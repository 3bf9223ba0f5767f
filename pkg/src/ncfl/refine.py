"""Feature refinement: spatial-channel attention and the learned compression bottleneck.

The bottleneck encodes attended features into a 4x-downsampled latent, snaps
every latent element onto its own grid ``mu + k*q`` (step and offset predicted
per position and channel by a small prior network), and decodes. A Laplace
likelihood of each quantization bin gives the cross-entropy (bits) that
pressures the latent toward coarse, predictable values.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FeatureMap, FeatureStage, LatentCode, PriorParams
from .flow import GDN

PARAM_FLOOR = 1e-6
MASS_FLOOR = 1e-9


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer, ties away from zero."""
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def _quantize(e, mu, q):
    u = (e - mu) / q
    k = round_half_away(u.detach())
    # forward value is exactly k*q + mu; backward treats the rounding as identity
    return (k + (u - u.detach())) * q + mu


def quantize(e, p: PriorParams) -> LatentCode:
    """``round((e - mu) / q) * q + mu`` with straight-through rounding."""
    if isinstance(e, LatentCode):
        if e.quantized:
            raise ValueError("quantize: latent is already quantized")
        e = e.data
    if not bool((p.q > 0).all()):
        raise ValueError("quantize: quantization step must be positive everywhere")
    return LatentCode(_quantize(e, p.mu, p.q), quantized=True)


def laplace_bin_mass(x, mu, sigma, q):
    """Mass of ``Laplace(mu, sigma)`` on ``[x - q/2, x + q/2]`` (before flooring).

    Evaluated through the reflected lower tail so that far-tail bins keep full
    relative precision.
    """
    d = (x - mu).abs()
    half = 0.5 * q
    lo = torch.clamp((half - d) / sigma, max=0.0)  # valid when d >= q/2
    far = 0.5 * torch.exp(lo) * -torch.expm1(-q / sigma)
    # d < q/2: the bin straddles the mode
    a = torch.clamp((d - half) / sigma, max=0.0)
    b = -(d + half) / sigma
    near = 1.0 - 0.5 * torch.exp(a) - 0.5 * torch.exp(b)
    return torch.where(d >= half, far, near)


def bin_probability(e_hat, p: PriorParams) -> torch.Tensor:
    if isinstance(e_hat, LatentCode):
        if not e_hat.quantized:
            raise ValueError("bin_probability: latent must be quantized")
        e_hat = e_hat.data
    return laplace_bin_mass(e_hat, p.mu, p.sigma, p.q).clamp_min(MASS_FLOOR)


def cross_entropy_loss(e_hat, p: PriorParams) -> torch.Tensor:
    """Mean bits per latent element, ``mean(-log2 mass)``."""
    return -torch.log2(bin_probability(e_hat, p)).mean()


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class FeatureAttention(nn.Module):
    """Three-scale residual auto-encoder emitting attention logits for the warped features."""

    def __init__(self, feature_width: int, channels=(8, 16, 32), deep_blocks: int = 4):
        super().__init__()
        c1, c2, c3 = channels
        self.head = nn.Conv2d(3 + feature_width, c1, 3, padding=1)
        self.enc1 = ResBlock(c1)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.deep = nn.Sequential(*[ResBlock(c3) for _ in range(deep_blocks)])
        self.up2 = nn.ConvTranspose2d(c3, c2, 2, stride=2)
        self.dec2 = ResBlock(c2)
        self.up1 = nn.ConvTranspose2d(c2, c1, 2, stride=2)
        self.dec1 = ResBlock(c1)
        self.tail = nn.Conv2d(c1, feature_width, 3, padding=1)
        # gate starts at sigmoid(0) = 0.5 everywhere
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, x, c_hat):
        s1 = self.enc1(self.head(torch.cat([x, c_hat], 1)))
        s2 = self.enc2(self.down1(s1))
        y = self.deep(self.down2(s2))
        y = self.dec2(self.up2(y) + s2)
        y = self.dec1(self.up1(y) + s1)
        return self.tail(y)


class Compressor(nn.Module):
    """Encoder / prior / decoder of the compression bottleneck."""

    def __init__(self, feature_width: int, latent_width: int, hidden: int, quant_mode: str = "adaptive",
                 fixed_step: Optional[float] = None):
        super().__init__()
        self.latent_width = latent_width
        self.quant_mode = quant_mode
        self.fixed_step = fixed_step
        self.encoder = nn.Sequential(
            nn.Conv2d(feature_width, hidden, 3, stride=2, padding=1),
            GDN(hidden),
            nn.Conv2d(hidden, latent_width, 3, stride=2, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(latent_width, hidden, 3, stride=2, padding=1, output_padding=1),
            GDN(hidden, inverse=True),
            nn.ConvTranspose2d(hidden, feature_width, 3, stride=2, padding=1, output_padding=1),
        )
        self.prior_net = nn.Sequential(
            nn.Conv2d(feature_width, hidden, 3, stride=2, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(hidden, 3 * latent_width, 3, padding=1),
        )

    def prior(self, c_check):
        raw = self.prior_net(c_check)
        mu, raw_sigma, raw_q = raw.chunk(3, dim=1)
        sigma = F.softplus(raw_sigma) + PARAM_FLOOR
        if self.quant_mode == "fixed":
            q = torch.full_like(mu, float(self.fixed_step))
            mu = torch.zeros_like(mu)
        else:
            q = F.softplus(raw_q) + PARAM_FLOOR
        return PriorParams(mu, sigma, q)

    def forward(self, c_check):
        """Returns ``(refined, ce_bits, info)``; ``info`` carries latents and prior maps."""
        H, W = c_check.shape[-2:]
        if H % 4 or W % 4:
            raise ValueError(f"feature size {H}x{W} must be divisible by 4")
        e = self.encoder(c_check)
        if self.quant_mode == "none":
            return self.decoder(e), e.new_zeros(()), {"e": e}
        p = self.prior(c_check)
        e_hat = _quantize(e, p.mu, p.q)
        ce = cross_entropy_loss(e_hat, p)
        return self.decoder(e_hat), ce, {"e": e, "e_hat": e_hat, "prior": p}


class NConv(nn.Module):
    """Full-resolution conv stack used in place of the bottleneck (ablation)."""

    def __init__(self, feature_width: int, hidden: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(feature_width, hidden, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(hidden, feature_width, 3, padding=1),
        )

    def forward(self, c_check):
        return self.body(c_check), c_check.new_zeros(()), {}


class FeatureRefiner(nn.Module):
    """Attention followed by the bottleneck; either stage may be disabled."""

    def __init__(self, cfg):
        super().__init__()
        self.attention = (
            FeatureAttention(cfg.feature_width, cfg.fa_channels, cfg.fa_blocks) if cfg.fa else None
        )
        if not cfg.ncfl:
            self.compressor = None
        elif "ncfl" in cfg.conv_replacements:
            self.compressor = NConv(cfg.feature_width, cfg.ncfl_hidden)
        else:
            self.compressor = Compressor(cfg.feature_width, cfg.latent_width, cfg.ncfl_hidden,
                                         cfg.quant_mode, cfg.fixed_step)

    def forward(self, x, c_hat):
        info = {"c_hat": c_hat}
        c = c_hat
        if self.attention is not None:
            c = c_hat * torch.sigmoid(self.attention(x, c_hat))
        info["c_check"] = c
        if self.compressor is None:
            return c, c.new_zeros(()), info
        c_tilde, ce, extra = self.compressor(c)
        info.update(extra)
        return c_tilde, ce, info


# ---------------------------------------------------------------------------
# typed entry points
# ---------------------------------------------------------------------------

def _data(fm, stage=None, op=""):
    if isinstance(fm, FeatureMap):
        if stage is not None and fm.stage != stage:
            raise ValueError(f"{op}: expected {stage.value} features, got {fm.stage.value}")
        return fm.data
    return fm


def attend(x_t, c_hat, net: Optional[FeatureAttention]) -> FeatureMap:
    """Scale warped features by ``sigmoid`` of the attention logits (identity if ``net`` is None)."""
    c = _data(c_hat, FeatureStage.WARPED, "attend")
    if x_t.shape[-2:] != c.shape[-2:]:
        raise ValueError(f"attend: frame size {tuple(x_t.shape[-2:])} != feature size {tuple(c.shape[-2:])}")
    if net is None:
        return FeatureMap(c, FeatureStage.ATTENDED)
    return FeatureMap(c * torch.sigmoid(net(x_t, c)), FeatureStage.ATTENDED)


def encode_features(c_check, comp: Compressor) -> LatentCode:
    c = _data(c_check)
    H, W = c.shape[-2:]
    if H % 4 or W % 4:
        raise ValueError(f"encode_features: size {H}x{W} not divisible by 4")
    return LatentCode(comp.encoder(c), quantized=False)


def prior(c_check, comp: Compressor) -> PriorParams:
    return comp.prior(_data(c_check))


def decode_features(e_hat, comp: Compressor) -> FeatureMap:
    if isinstance(e_hat, LatentCode):
        if not e_hat.quantized and comp.quant_mode != "none":
            raise ValueError("decode_features: latent must be quantized")
        e_hat = e_hat.data
    if e_hat.shape[1] != comp.latent_width:
        raise ValueError(f"decode_features: expected {comp.latent_width} latent channels, got {e_hat.shape[1]}")
    return FeatureMap(comp.decoder(e_hat), FeatureStage.REFINED)


def refine_features(x_t, c_hat, refiner: FeatureRefiner):
    """Attention then bottleneck; returns ``(refined FeatureMap, ce_bits)``.

    With both stages disabled the warped features come back unchanged and the
    cross-entropy is 0.
    """
    c = _data(c_hat, FeatureStage.WARPED, "refine_features")
    out, ce, _ = refiner(x_t, c)
    stage = FeatureStage.REFINED if refiner.compressor is not None else (
        FeatureStage.ATTENDED if refiner.attention is not None else FeatureStage.WARPED)
    return FeatureMap(out, stage), ce

