"""Shared types, configuration presets and the NCFL tensor container."""

from __future__ import annotations

import dataclasses
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Optional

import numpy as np
import torch

MAGIC = b"NCFL"


class ConfigError(ValueError):
    """Raised when a configuration violates an invariant; message starts with the field path."""


class ContainerError(ValueError):
    pass


class FeatureStage(str, enum.Enum):
    PROPAGATED = "propagated"  # c_t, produced by restoration
    WARPED = "warped"  # aligned previous features
    ATTENDED = "attended"
    REFINED = "refined"  # output of the compression bottleneck


@dataclass(frozen=True)
class VideoClip:
    """Ordered frames ``[T, 3, H, W]`` with values in [0, 1]."""

    frames: torch.Tensor
    id: str = "clip"
    frame_rate: Optional[float] = None

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[1] != 3:
            raise ValueError(f"frames must be [T, 3, H, W], got {tuple(f.shape)}")
        if f.shape[0] < 1:
            raise ValueError("clip needs at least one frame")
        if f.shape[2] < 8 or f.shape[3] < 8:
            raise ValueError(f"frames must be at least 8x8, got {tuple(f.shape[2:])}")
        if not torch.isfinite(f).all():
            raise ValueError("frames contain non-finite values")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return int(self.frames.shape[2]), int(self.frames.shape[3])


@dataclass(frozen=True)
class FeatureMap:
    data: torch.Tensor  # [B, C_f, H, W]
    stage: FeatureStage


@dataclass(frozen=True)
class LatentCode:
    data: torch.Tensor  # [B, C_e, H/4, W/4]
    quantized: bool = False


class PriorParams(NamedTuple):
    mu: torch.Tensor
    sigma: torch.Tensor
    q: torch.Tensor


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

QUANT_MODES = ("adaptive", "fixed", "none")
RESTORATION_VARIANTS = ("unet", "wnet")
DIRECTIONS = ("uni", "bi")
CONV_REPLACEMENTS = ("mvr", "ncfl")


@dataclass
class ModelConfig:
    preset: str = "desk"
    # widths
    feature_width: int = 16
    latent_width: int = 16
    mvr_hidden: int = 16
    fa_channels: list = field(default_factory=lambda: [8, 16, 32])
    fa_blocks: int = 4
    ncfl_hidden: int = 16
    unet_channels: list = field(default_factory=lambda: [16, 32, 64, 128, 128])
    cab_per_scale: int = 1
    cab_reduction: int = 4
    flow_width: int = 16
    flow_levels: int = 3
    flow_layers: int = 5
    # architecture switches
    restoration: str = "unet"
    direction: str = "uni"
    mvr: bool = True
    ncfl: bool = True
    fa: bool = True
    quant_mode: str = "adaptive"
    fixed_step: Optional[float] = None
    conv_replacements: list = field(default_factory=list)
    # objective and schedule
    lambda_ce: float = 1 / 2048
    stage1_iters: int = 500
    total_iters: int = 2000
    lr_main: float = 2e-4
    lr_flow: float = 2.5e-5
    flow_freeze_iters: int = 100
    flow_pretrain_iters: int = 800
    weight_decay: float = 1e-4
    # data
    batch: int = 4
    clip_len: int = 5
    patch: int = 32
    sigma: float = 25.0
    fresh_noise: bool = True
    augment: bool = True
    # bookkeeping
    seed: int = 0
    log_interval: int = 1
    ckpt_interval: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        cfg = dataclasses.replace(self, **changes)
        validate_config(cfg)
        return cfg

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS: dict[str, dict[str, Any]] = {
    "paper": dict(
        preset="paper",
        feature_width=64,
        latent_width=64,
        mvr_hidden=64,
        fa_channels=[16, 32, 64],
        fa_blocks=4,
        ncfl_hidden=64,
        unet_channels=[32, 64, 128, 256, 512],
        cab_per_scale=2,
        flow_width=32,
        lambda_ce=1 / 2048,
        stage1_iters=50_000,
        total_iters=100_000,
        lr_main=2e-4,
        lr_flow=2.5e-5,
        flow_freeze_iters=2500,
        flow_pretrain_iters=5000,
        batch=16,
        clip_len=5,
        patch=128,
        sigma=50.0,
        log_interval=100,
        ckpt_interval=5000,
    ),
    "desk": dict(
        preset="desk",
        feature_width=16,
        latent_width=16,
        mvr_hidden=16,
        fa_channels=[8, 16, 32],
        fa_blocks=4,
        ncfl_hidden=16,
        unet_channels=[16, 32, 64, 128, 128],
        cab_per_scale=1,
        flow_width=16,
        lambda_ce=1 / 2048,
        stage1_iters=500,
        total_iters=2000,
        flow_freeze_iters=100,
        flow_pretrain_iters=800,
        batch=4,
        clip_len=5,
        patch=32,
        sigma=25.0,
        log_interval=1,
        ckpt_interval=0,
    ),
}

_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ModelConfig)}


def validate_config(cfg: ModelConfig) -> None:
    def fail(path, msg):
        raise ConfigError(f"{path}: {msg}")

    if cfg.preset not in PRESETS:
        fail("preset", f"unknown preset {cfg.preset!r}")
    for name in ("feature_width", "latent_width", "mvr_hidden", "ncfl_hidden", "flow_width",
                 "batch", "clip_len", "patch", "flow_levels", "flow_layers", "cab_reduction"):
        v = getattr(cfg, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            fail(name, f"must be a positive integer, got {v!r}")
    for name in ("fa_blocks", "cab_per_scale", "stage1_iters", "total_iters",
                 "flow_freeze_iters", "flow_pretrain_iters", "seed", "ckpt_interval"):
        v = getattr(cfg, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            fail(name, f"must be a non-negative integer, got {v!r}")
    if not isinstance(cfg.log_interval, int) or cfg.log_interval < 1:
        fail("log_interval", "must be a positive integer")
    if len(cfg.unet_channels) != 5:
        fail("unet_channels", f"needs 5 scales, got {len(cfg.unet_channels)}")
    if len(cfg.fa_channels) != 3:
        fail("fa_channels", f"needs 3 scales, got {len(cfg.fa_channels)}")
    for lname in ("unet_channels", "fa_channels"):
        for i, c in enumerate(getattr(cfg, lname)):
            if not isinstance(c, int) or c < 1:
                fail(f"{lname}[{i}]", f"must be a positive integer, got {c!r}")
    if cfg.flow_levels != 3:
        fail("flow_levels", "the pyramid flow estimator uses exactly 3 levels")
    if cfg.restoration not in RESTORATION_VARIANTS:
        fail("restoration", f"must be one of {RESTORATION_VARIANTS}")
    if cfg.direction not in DIRECTIONS:
        fail("direction", f"must be one of {DIRECTIONS}")
    if cfg.quant_mode not in QUANT_MODES:
        fail("quant_mode", f"must be one of {QUANT_MODES}")
    if cfg.quant_mode == "fixed":
        if cfg.fixed_step is None or not cfg.fixed_step > 0:
            fail("fixed_step", "quant_mode 'fixed' requires a positive fixed_step")
    for i, r in enumerate(cfg.conv_replacements):
        if r not in CONV_REPLACEMENTS:
            fail(f"conv_replacements[{i}]", f"must be one of {CONV_REPLACEMENTS}")
    if cfg.stage1_iters > cfg.total_iters:
        fail("stage1_iters", "must not exceed total_iters")
    for name in ("lambda_ce", "weight_decay", "sigma"):
        if getattr(cfg, name) < 0:
            fail(name, "must be non-negative")
    for name in ("lr_main", "lr_flow"):
        if not getattr(cfg, name) > 0:
            fail(name, "must be positive")
    if cfg.patch % 16:
        fail("patch", "must be divisible by 16")


def make_config(preset: str = "desk", **overrides) -> ModelConfig:
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}")
    values = dict(PRESETS[preset])
    for key in overrides:
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown configuration field")
    values.update(overrides)
    values["preset"] = preset
    cfg = ModelConfig(**values)
    validate_config(cfg)
    return cfg


def config_from_dict(data: dict) -> ModelConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: configuration must be a JSON object")
    data = dict(data)
    preset = data.pop("preset", "desk")
    return make_config(preset, **data)


def load_config(path) -> ModelConfig:
    """Read a JSON config, filling unset fields from its ``preset`` (default ``desk``)."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# tensor container
# ---------------------------------------------------------------------------

def write_tensor(t, path) -> None:
    """Write a float32 tensor as ``NCFL`` + u32 ndim + u32 dims + little-endian payload."""
    if isinstance(t, torch.Tensor):
        arr = t.detach().cpu().numpy()
    else:
        arr = np.asarray(t)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if any(d == 0 for d in arr.shape):
        raise ContainerError(f"zero-length dimension in shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContainerError("refusing to write non-finite values")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path) -> torch.Tensor:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise ContainerError(f"{path}: truncated header")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    end = 8 + 4 * ndim
    if len(blob) < end:
        raise ContainerError(f"{path}: truncated header ({ndim} dims declared)")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    if any(d == 0 for d in dims):
        raise ContainerError(f"{path}: zero-length dimension in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    payload = blob[end:]
    if len(payload) != 4 * count:
        raise ContainerError(
            f"{path}: payload has {len(payload)} bytes, header {dims} needs {4 * count} (truncated or oversized)"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return torch.from_numpy(arr)


def save_checkpoint(state: dict, directory, config: Optional[ModelConfig] = None, extra: Optional[dict] = None) -> Path:
    """Write a state dict as one container per entry plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, (name, value) in enumerate(state.items()):
        fname = f"p{i:04d}.ncfl"
        write_tensor(value.float(), directory / fname)
        files[name] = fname
    manifest = {"params": files, "extra": extra or {}}
    if config is not None:
        manifest["config"] = config.to_dict()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[dict, Optional[ModelConfig], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    state = {name: read_tensor(directory / fname) for name, fname in manifest["params"].items()}
    cfg = config_from_dict(manifest["config"]) if "config" in manifest else None
    return state, cfg, manifest.get("extra", {})
