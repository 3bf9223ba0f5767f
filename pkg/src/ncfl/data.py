"""Degradation synthesis, clip ingestion, patch sampling and flip augmentation."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .core import VideoClip

FRAME_RE = re.compile(r"^frame_(\d{5})\.png$")


@dataclass(frozen=True)
class ClipPair:
    clean: VideoClip
    degraded: VideoClip
    degradation: str = "paired"  # "awgn" or "paired"
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.clean.frames.shape != self.degraded.frames.shape:
            raise ValueError(
                f"clean {tuple(self.clean.frames.shape)} and degraded "
                f"{tuple(self.degraded.frames.shape)} differ in shape"
            )


@dataclass
class Batch:
    """Stacked training samples, ``[B, T, 3, P, P]`` each."""

    clean: torch.Tensor
    degraded: torch.Tensor


def _torch_gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def gaussian_noise(shape, sigma_255: float, seed: int, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(shape, generator=_torch_gen(seed), dtype=dtype) * (sigma_255 / 255.0)


def add_awgn(frames: torch.Tensor, sigma_255: float, seed: int) -> torch.Tensor:
    """Tensor-level AWGN with post-addition clamp to [0, 1]."""
    if sigma_255 < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma_255}")
    if sigma_255 == 0:
        return frames.clone()
    noise = gaussian_noise(frames.shape, sigma_255, seed, frames.dtype)
    return (frames + noise).clamp(0.0, 1.0)


def synthesize_awgn(clip: VideoClip, sigma_255: float, seed: int) -> ClipPair:
    degraded = add_awgn(clip.frames, sigma_255, seed)
    return ClipPair(
        clean=clip,
        degraded=VideoClip(degraded, id=f"{clip.id}@awgn{sigma_255:g}", frame_rate=clip.frame_rate),
        degradation="awgn",
        sigma=float(sigma_255),
    )


def sample_patch_batch(pairs: Sequence[ClipPair], patch: int, clip_len: int, batch: int, seed: int) -> Batch:
    """Crop ``batch`` co-located spatio-temporal windows from randomly chosen pairs."""
    if not pairs:
        raise ValueError("no clip pairs to sample from")
    for p in pairs:
        T, _, H, W = p.clean.frames.shape
        if T < clip_len:
            raise ValueError(f"clip {p.clean.id} has {T} frames, need {clip_len}")
        if H < patch or W < patch:
            raise ValueError(f"clip {p.clean.id} is {H}x{W}, smaller than patch {patch}")
    rng = np.random.default_rng(seed)
    clean, degraded = [], []
    for _ in range(batch):
        p = pairs[int(rng.integers(len(pairs)))]
        T, _, H, W = p.clean.frames.shape
        t0 = int(rng.integers(T - clip_len + 1))
        y0 = int(rng.integers(H - patch + 1))
        x0 = int(rng.integers(W - patch + 1))
        sl = (slice(t0, t0 + clip_len), slice(None), slice(y0, y0 + patch), slice(x0, x0 + patch))
        clean.append(p.clean.frames[sl])
        degraded.append(p.degraded.frames[sl])
    return Batch(torch.stack(clean), torch.stack(degraded))


def _apply_flips(x: torch.Tensor, hflip: bool, vflip: bool, transpose: bool) -> torch.Tensor:
    if hflip:
        x = x.flip(-1)
    if vflip:
        x = x.flip(-2)
    if transpose:
        x = x.transpose(-1, -2)
    return x


def sample_flips(batch_size: int, seed: int) -> np.ndarray:
    """Boolean ``[B, 3]`` array of (hflip, vflip, transpose) decisions."""
    return np.random.default_rng(seed).random((batch_size, 3)) < 0.5


def augment(batch: Batch, seed: int, ops: Optional[np.ndarray] = None) -> Batch:
    """Random horizontal/vertical/transpose flips, shared by clean and degraded."""
    B = batch.clean.shape[0]
    if ops is None:
        ops = sample_flips(B, seed)
    if ops[:, 2].any() and batch.clean.shape[-1] != batch.clean.shape[-2]:
        raise ValueError("transpose augmentation needs square patches")
    clean = torch.stack([_apply_flips(batch.clean[i], *ops[i]) for i in range(B)])
    degraded = torch.stack([_apply_flips(batch.degraded[i], *ops[i]) for i in range(B)])
    return Batch(clean, degraded)


def invert_augment(batch: Batch, ops: np.ndarray) -> Batch:
    """Undo :func:`augment` for the given ops (transpose first, then the flips)."""

    def undo(x, h, v, t):
        if t:
            x = x.transpose(-1, -2)
        if v:
            x = x.flip(-2)
        if h:
            x = x.flip(-1)
        return x

    B = batch.clean.shape[0]
    clean = torch.stack([undo(batch.clean[i], *ops[i]) for i in range(B)])
    degraded = torch.stack([undo(batch.degraded[i], *ops[i]) for i in range(B)])
    return Batch(clean, degraded)


# ---------------------------------------------------------------------------
# PNG ingestion
# ---------------------------------------------------------------------------

def _decode_png(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64)
        arr = arr / 65535.0
        arr = np.repeat(arr[..., None], 3, axis=-1)
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr.astype(np.float32)


def load_clip_dir(path) -> VideoClip:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{path} is not a directory")
    indexed = []
    for f in path.iterdir():
        m = FRAME_RE.match(f.name)
        if m:
            indexed.append((int(m.group(1)), f))
    if not indexed:
        raise ValueError(f"{path}: no frame_%05d.png files")
    indexed.sort()
    first = indexed[0][0]
    for expect, (idx, _) in enumerate(indexed, start=first):
        if idx != expect:
            raise ValueError(f"{path}: frame index {expect} missing (found {idx})")
    frames = []
    for _, f in indexed:
        arr = _decode_png(f)
        if frames and arr.shape != frames[0].shape:
            raise ValueError(f"{f}: size {arr.shape[:2]} differs from {frames[0].shape[:2]}")
        frames.append(arr)
    data = torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).contiguous()
    return VideoClip(data, id=path.name)


def save_clip_dir(clip_or_frames, path) -> Path:
    """Write frames as 8-bit ``frame_%05d.png`` files."""
    frames = clip_or_frames.frames if isinstance(clip_or_frames, VideoClip) else clip_or_frames
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arr = (frames.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy() * 255.0).round().astype(np.uint8)
    for i, a in enumerate(arr):
        Image.fromarray(a).save(path / f"frame_{i:05d}.png")
    return path


def load_manifest(path) -> list[ClipPair]:
    """Read a dataset manifest.

    The manifest is a JSON object ``{"clips": [...]}``; each entry has ``clean``
    (clip directory) and either ``degraded`` (paired ingestion) or
    ``"degradation": "awgn"`` with ``sigma`` and ``seed``. Relative directories
    resolve against the manifest's location.
    """
    path = Path(path)
    spec = json.loads(path.read_text())
    root = path.parent
    pairs = []
    for i, entry in enumerate(spec.get("clips", [])):
        clean = load_clip_dir(root / entry["clean"])
        kind = entry.get("degradation", "paired" if "degraded" in entry else "awgn")
        if kind == "paired":
            degraded = load_clip_dir(root / entry["degraded"])
            pairs.append(ClipPair(clean, degraded, "paired"))
        elif kind == "awgn":
            pairs.append(synthesize_awgn(clean, float(entry["sigma"]), int(entry.get("seed", i))))
        else:
            raise ValueError(f"clips[{i}].degradation: unknown kind {kind!r}")
    if not pairs:
        raise ValueError(f"{path}: manifest lists no clips")
    return pairs


# ---------------------------------------------------------------------------
# synthetic moving-pattern corpus
# ---------------------------------------------------------------------------

def random_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Colour texture ``[3, size, size]`` mixing gratings, blobs and rectangles."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((3, size, size))
    for _ in range(int(rng.integers(2, 5))):
        freq = rng.uniform(0.04, 0.35)
        theta = rng.uniform(0, math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
        img += rng.uniform(0.05, 0.25, size=(3, 1, 1)) * wave
    for _ in range(int(rng.integers(4, 10))):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(2, size / 5)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += rng.uniform(-0.5, 0.5, size=(3, 1, 1)) * blob
    for _ in range(int(rng.integers(3, 8))):
        y0, x0 = rng.integers(0, size, 2)
        h, w = rng.integers(3, size // 3, 2)
        img[:, y0:y0 + h, x0:x0 + w] += rng.uniform(-0.4, 0.4, size=(3, 1))[..., None]
    img -= img.min()
    img /= max(img.max(), 1e-8)
    return 0.1 + 0.8 * img


def moving_clip(texture: torch.Tensor, n_frames: int, size: int, velocity, origin) -> torch.Tensor:
    """Frames of a window sliding over ``texture`` at constant ``velocity`` px/frame."""
    from .flow import bilinear_sample

    frames = []
    _, H, W = texture.shape
    ys, xs = torch.meshgrid(torch.arange(size, dtype=texture.dtype), torch.arange(size, dtype=texture.dtype), indexing="ij")
    for t in range(n_frames):
        ox = origin[0] + velocity[0] * t
        oy = origin[1] + velocity[1] * t
        gx = (xs + ox)[None]
        gy = (ys + oy)[None]
        frames.append(bilinear_sample(texture[None], gx, gy)[0])
    return torch.stack(frames)


def synthetic_clips(n_clips: int, n_frames: int, size: int, seed: int, max_speed: float = 2.0) -> list[VideoClip]:
    """Textured clips under global sub-pixel translation."""
    rng = np.random.default_rng(seed)
    margin = int(math.ceil(max_speed * n_frames)) + 2
    canvas = size + 2 * margin
    clips = []
    for i in range(n_clips):
        tex = torch.from_numpy(random_texture(canvas, rng)).float()
        v = rng.uniform(-max_speed, max_speed, 2)
        start = (margin - v[0] * (n_frames - 1) / 2, margin - v[1] * (n_frames - 1) / 2)
        frames = moving_clip(tex, n_frames, size, v, start).clamp(0, 1)
        clips.append(VideoClip(frames.contiguous(), id=f"synth{seed}_{i:03d}"))
    return clips
