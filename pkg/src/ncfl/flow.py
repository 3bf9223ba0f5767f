"""Motion estimation, motion-vector refinement, bilinear warping and GDN."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FeatureMap, FeatureStage


# ---------------------------------------------------------------------------
# GDN / IGDN
# ---------------------------------------------------------------------------

def _gdn(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor, inverse: bool) -> torch.Tensor:
    C = x.shape[1]
    norm = F.conv2d(x * x, gamma.reshape(C, C, 1, 1), beta)
    norm = torch.sqrt(norm)
    return x * norm if inverse else x / norm


def gdn(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor, inverse: bool = False) -> torch.Tensor:
    """Generalized divisive normalization over channels, per spatial position.

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)``; the inverse multiplies
    instead. Accepts ``[C, H, W]`` or ``[B, C, H, W]``.
    """
    if not bool((beta > 0).all()):
        raise ValueError("gdn: beta must be strictly positive")
    if not bool((gamma >= 0).all()):
        raise ValueError("gdn: gamma must be non-negative")
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    y = _gdn(x, beta.to(x.dtype), gamma.to(x.dtype), inverse)
    return y[0] if squeeze else y


class GDN(nn.Module):
    """GDN layer with squared reparametrization keeping beta > 0 and gamma >= 0."""

    beta_min = 1e-6

    def __init__(self, channels: int, inverse: bool = False, gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_p = nn.Parameter(torch.full((channels,), math.sqrt(1.0 - self.beta_min)))
        self.gamma_p = nn.Parameter(math.sqrt(gamma_init) * torch.eye(channels))

    @property
    def beta(self):
        return self.beta_p ** 2 + self.beta_min

    @property
    def gamma(self):
        return self.gamma_p ** 2

    def forward(self, x):
        return _gdn(x, self.beta, self.gamma, self.inverse)


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def bilinear_sample(x: torch.Tensor, gx: torch.Tensor, gy: torch.Tensor) -> torch.Tensor:
    """Sample ``x [B, C, H, W]`` at pixel coordinates ``(gx, gy)`` of shape ``[B, H', W']``.

    Coordinates outside the image clamp to the border. Integer coordinates
    reproduce the input values exactly.
    """
    B, C, H, W = x.shape
    xs = gx.clamp(0, W - 1)
    ys = gy.clamp(0, H - 1)
    x0 = xs.floor()
    y0 = ys.floor()
    wx = (xs - x0).unsqueeze(1)
    wy = (ys - y0).unsqueeze(1)
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=W - 1)
    y1i = (y0i + 1).clamp(max=H - 1)
    flat = x.reshape(B, C, H * W)
    out_hw = gx.shape[1:]

    def gather(yi, xi):
        idx = (yi * W + xi).reshape(B, 1, -1).expand(B, C, -1)
        return flat.gather(2, idx).reshape(B, C, *out_hw)

    v00 = gather(y0i, x0i)
    v01 = gather(y0i, x1i)
    v10 = gather(y1i, x0i)
    v11 = gather(y1i, x1i)
    return (v00 * (1 - wx) + v01 * wx) * (1 - wy) + (v10 * (1 - wx) + v11 * wx) * wy


_GRID_CACHE: dict = {}


def _base_grid(H, W, dtype, device):
    key = (H, W, dtype, device)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        ys, xs = torch.meshgrid(
            torch.arange(H, dtype=dtype, device=device),
            torch.arange(W, dtype=dtype, device=device),
            indexing="ij",
        )
        grid = (xs, ys)
        _GRID_CACHE[key] = grid
    return grid


def warp_tensor(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``x [B, C, H, W]``: ``out(p) = x(p + flow(p))``."""
    if x.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"warp: feature size {tuple(x.shape[-2:])} != flow size {tuple(flow.shape[-2:])}")
    if flow.shape[1] != 2:
        raise ValueError("warp: flow must have 2 channels (dx, dy)")
    H, W = x.shape[-2:]
    xs, ys = _base_grid(H, W, flow.dtype, flow.device)
    return bilinear_sample(x, xs + flow[:, 0], ys + flow[:, 1])


def warp(features, flow):
    """Warp a :class:`FeatureMap` or a raw frame tensor by a flow field.

    Unbatched ``[C, H, W]`` tensors with ``[2, H, W]`` flows are accepted too.
    """
    if isinstance(features, FeatureMap):
        return FeatureMap(warp(features.data, flow), FeatureStage.WARPED)
    if features.ndim == 3:
        return warp_tensor(features[None], flow[None] if flow.ndim == 3 else flow)[0]
    return warp_tensor(features, flow)


# ---------------------------------------------------------------------------
# pyramid flow estimator
# ---------------------------------------------------------------------------

def _conv_stack(cin, width, cout, layers, zero_last=True):
    mods = []
    c = cin
    for _ in range(layers - 1):
        mods += [nn.Conv2d(c, width, 3, padding=1), nn.LeakyReLU(0.1)]
        c = width
    last = nn.Conv2d(c, cout, 3, padding=1)
    if zero_last:
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    mods.append(last)
    return nn.Sequential(*mods)


class FlowEstimator(nn.Module):
    """Three-level coarse-to-fine residual flow network.

    Each level upsamples (and doubles) the coarser flow, warps ``prev`` with it
    and predicts a residual from ``(warped prev, cur, upsampled flow)`` plus
    the explicit difference ``warped prev - cur``. Flow maps current-frame
    pixels onto the previous frame.
    """

    def __init__(self, width: int = 16, levels: int = 3, layers: int = 5):
        super().__init__()
        self.levels = levels
        self.input_gain = 4.0
        self.nets = nn.ModuleList([_conv_stack(11, width, 2, layers) for _ in range(levels)])

    def forward(self, prev, cur):
        H, W = cur.shape[-2:]
        factor = 2 ** (self.levels - 1)
        if H % factor or W % factor:
            raise ValueError(f"estimate_flow: frame size {H}x{W} not divisible by {factor}")
        pyramid = [(prev, cur)]
        for _ in range(self.levels - 1):
            p, c = pyramid[-1]
            pyramid.append((F.avg_pool2d(p, 2), F.avg_pool2d(c, 2)))
        flow = None
        for level, (p, c) in enumerate(reversed(pyramid)):
            if flow is None:
                flow = p.new_zeros(p.shape[0], 2, *p.shape[-2:])
                warped = p
            else:
                flow = 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)
                warped = warp_tensor(p, flow)
            g = self.input_gain
            x = torch.cat([(warped - 0.5) * g, (c - 0.5) * g, (warped - c) * (4 * g), flow], 1)
            flow = flow + self.nets[level](x)
        return flow


def estimate_flow(prev: torch.Tensor, cur: torch.Tensor, net: FlowEstimator) -> torch.Tensor:
    if prev.shape != cur.shape:
        raise ValueError(f"estimate_flow: frame shapes differ {tuple(prev.shape)} vs {tuple(cur.shape)}")
    if cur.ndim == 3:
        return net(prev[None], cur[None])[0]
    return net(prev, cur)


# ---------------------------------------------------------------------------
# MV refinement
# ---------------------------------------------------------------------------

def _down(cin, cout):
    return nn.Conv2d(cin, cout, 3, stride=2, padding=1)


def _up(cin, cout):
    return nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1)


class MVRefiner(nn.Module):
    """Auto-encoder over a flow field: 2 strided convs with GDN, 2 deconvs with IGDN."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.encoder = nn.Sequential(_down(2, hidden), GDN(hidden), _down(hidden, hidden))
        self.decoder = nn.Sequential(_up(hidden, hidden), GDN(hidden, inverse=True), _up(hidden, 2))

    def forward(self, mv):
        H, W = mv.shape[-2:]
        ph, pw = -H % 4, -W % 4
        if ph or pw:
            mv = F.pad(mv, (0, pw, 0, ph), mode="replicate")
        return self.decoder(self.encoder(mv))[..., :H, :W]


class MConv(nn.Module):
    """Plain full-resolution conv stack standing in for the MV refiner (ablation)."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.body = _conv_stack(2, hidden, 2, 4, zero_last=False)

    def forward(self, mv):
        return self.body(mv)


def refine_mv(mv: torch.Tensor, net: nn.Module | None) -> torch.Tensor:
    """Refine a flow field; ``net=None`` (refinement disabled) returns the input."""
    if net is None:
        return mv
    if not torch.isfinite(mv).all():
        raise ValueError("refine_mv: non-finite flow")
    if mv.ndim == 3:
        return net(mv[None])[0]
    return net(mv)


# ---------------------------------------------------------------------------
# supervised pretraining on synthetic translations
# ---------------------------------------------------------------------------

def shift_pairs(textures: torch.Tensor, size: int, max_shift: float, rng: np.random.Generator, batch: int):
    """Random ``(prev, cur, flow)`` with a constant sub-pixel flow per sample.

    Both frames sample the same texture, ``prev`` displaced by ``-flow``, so
    ``prev(p + flow)`` matches ``cur(p)`` away from the borders (exactly for
    textures that are affine in x and y, up to interpolation blur otherwise).
    """
    n, _, S, _ = textures.shape
    margin = (S - size) / 2
    idx = rng.integers(n, size=batch)
    flows = rng.uniform(-max_shift, max_shift, size=(batch, 2))
    ys, xs = torch.meshgrid(torch.arange(size, dtype=torch.float32), torch.arange(size, dtype=torch.float32), indexing="ij")
    prevs, curs = [], []
    for b in range(batch):
        tex = textures[idx[b]][None]
        ox, oy = rng.uniform(-margin / 2, margin / 2, 2) + margin
        curs.append(bilinear_sample(tex, (xs + ox)[None], (ys + oy)[None])[0])
        fx, fy = flows[b]
        prevs.append(bilinear_sample(tex, (xs + ox - fx)[None], (ys + oy - fy)[None])[0])
    flow = torch.from_numpy(flows).float()[:, :, None, None].expand(batch, 2, size, size)
    return torch.stack(prevs), torch.stack(curs), flow.contiguous()


def endpoint_error(pred: torch.Tensor, target: torch.Tensor, border: int = 0) -> torch.Tensor:
    err = (pred - target).pow(2).sum(1).sqrt()
    if border:
        err = err[..., border:-border, border:-border]
    return err.mean()


def pretrain_flow(net: FlowEstimator, iters: int, seed: int, size: int = 32, max_shift: float = 2.0,
                  batch: int = 16, lr: float = 2e-3, max_sigma: float = 30.0, n_textures: int = 48):
    """Fit the flow net to synthetic global shifts with an endpoint-error loss.

    Half of each batch receives AWGN of random strength up to ``max_sigma``
    (0-255 scale). Returns the list of per-iteration EPE values.
    """
    from .data import random_texture

    rng = np.random.default_rng(seed)
    canvas = size + 4 * int(math.ceil(max_shift)) + 8
    textures = torch.from_numpy(np.stack([random_texture(canvas, rng) for _ in range(n_textures)])).float()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    history = []
    for it in range(iters):
        prev, cur, flow = shift_pairs(textures, size, max_shift, rng, batch)
        sig = torch.from_numpy(rng.uniform(0, max_sigma, size=(batch, 1, 1, 1))).float() / 255.0
        sig[: batch // 2] = 0
        gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
        prev = prev + sig * torch.randn(prev.shape, generator=gen)
        cur = cur + sig * torch.randn(cur.shape, generator=gen)
        for g in opt.param_groups:
            g["lr"] = lr * 0.5 * (1 + math.cos(math.pi * it / max(iters, 1)))
        loss = endpoint_error(net(prev, cur), flow, border=2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history
