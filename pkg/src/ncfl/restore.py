"""Feature fusion and reconstruction: a five-scale U-Net built from channel-attention blocks."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FeatureMap, FeatureStage


class CAB(nn.Module):
    """Channel-attention block.

    ``r = conv(relu(conv(x)))``, ``w = sigmoid(conv(relu(conv(GAP(r)))))``,
    output ``x + r * w``.
    """

    def __init__(self, ch: int, reduction: int = 4):
        super().__init__()
        mid = max(ch // reduction, 1)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.squeeze = nn.Conv2d(ch, mid, 1)
        self.excite = nn.Conv2d(mid, ch, 1)

    def attention(self, r):
        return torch.sigmoid(self.excite(F.relu(self.squeeze(r.mean((-2, -1), keepdim=True)))))

    def forward(self, x):
        r = self.conv2(F.relu(self.conv1(x)))
        return x + r * self.attention(r)


def cab(x: torch.Tensor, block: CAB) -> torch.Tensor:
    if x.ndim == 3:
        return block(x[None])[0]
    return block(x)


class UNet(nn.Module):
    """Five scales, stride-2 conv down / transposed conv up, one conv on each skip."""

    def __init__(self, in_ch: int, channels, cabs_per_scale: int = 1, reduction: int = 4):
        super().__init__()
        chs = list(channels)
        self.head = nn.Conv2d(in_ch, chs[0], 3, padding=1)
        blocks = lambda c: nn.Sequential(*[CAB(c, reduction) for _ in range(cabs_per_scale)])
        self.enc = nn.ModuleList([blocks(c) for c in chs])
        self.down = nn.ModuleList([nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1) for i in range(4)])
        self.up = nn.ModuleList([nn.ConvTranspose2d(chs[i + 1], chs[i], 2, stride=2) for i in range(4)])
        self.skip = nn.ModuleList([nn.Conv2d(chs[i], chs[i], 3, padding=1) for i in range(4)])
        self.dec = nn.ModuleList([blocks(chs[i]) for i in range(4)])
        self.out_channels = chs[0]

    def forward(self, x):
        y = self.head(x)
        skips = []
        for i in range(4):
            y = self.enc[i](y)
            skips.append(y)
            y = self.down[i](y)
        y = self.enc[4](y)
        for i in reversed(range(4)):
            y = self.dec[i](self.up[i](y) + self.skip[i](skips[i]))
        return y


class Restorer(nn.Module):
    """Fuses a frame with refined temporal features; emits the frame residual and next features.

    ``variant="wnet"`` cascades a second U-Net on the first one's trunk features,
    keeping per-scale widths.
    """

    def __init__(self, in_features: int, feature_width: int, channels, cabs_per_scale=1, reduction=4,
                 variant: str = "unet"):
        super().__init__()
        self.variant = variant
        self.in_features = in_features
        self.unet1 = UNet(3 + in_features, channels, cabs_per_scale, reduction)
        self.unet2 = UNet(channels[0], channels, cabs_per_scale, reduction) if variant == "wnet" else None
        self.image_head = nn.Conv2d(channels[0], 3, 3, padding=1)
        self.feature_head = nn.Conv2d(channels[0], feature_width, 3, padding=1)
        nn.init.zeros_(self.image_head.weight)
        nn.init.zeros_(self.image_head.bias)

    def forward(self, x, feats):
        if feats.shape[1] != self.in_features:
            raise ValueError(f"restore: expected {self.in_features} feature channels, got {feats.shape[1]}")
        if x.shape[-2:] != feats.shape[-2:]:
            raise ValueError("restore: frame and feature sizes differ")
        H, W = x.shape[-2:]
        ph, pw = (-H) % 16, (-W) % 16
        inp = torch.cat([x, feats], 1)
        if ph or pw:
            mode = "reflect" if ph < H and pw < W else "replicate"
            inp = F.pad(inp, (0, pw, 0, ph), mode=mode)
        trunk = self.unet1(inp)
        if self.unet2 is not None:
            trunk = self.unet2(trunk)
        y = inp[:, :3] + self.image_head(trunk)
        c = self.feature_head(trunk)
        if ph or pw:
            y = y[..., :H, :W]
            c = c[..., :H, :W]
        return y, c


def restore(x_t: torch.Tensor, c_tilde, net: Restorer, evaluate: bool = False):
    """Returns ``(restored frame, FeatureMap of propagated features)``; clamps only when evaluating."""
    feats = c_tilde.data if isinstance(c_tilde, FeatureMap) else c_tilde
    y, c = net(x_t, feats)
    if evaluate:
        y = y.clamp(0.0, 1.0)
    return y, FeatureMap(c, FeatureStage.PROPAGATED)
