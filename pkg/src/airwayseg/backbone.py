"""3D encoder-decoder network, receptive-field calculators and checkpoints.

Every resolution level uses the same feature extractor: a dilated
convolution, a squeeze-and-excitation channel gate and two ordinary
convolutions. Levels are joined by max-pooling on the way down and
transposed convolutions on the way up, with channel-concatenated skips.
The head emits two independent sigmoid maps (airway, background).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, ContractError
from .volume import ConfidenceMaps

CHECKPOINT_VERSION = 1


# --- receptive field --------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kernel_size: int
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        for name in ("kernel_size", "stride", "dilation"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigurationError(f"{name} must be an integer >= 1, got {v}")


def receptive_field_standard(layers: Sequence[LayerSpec]) -> int:
    """``sum_p (k_p - 1) prod_{q<p} s_q + 1`` for a stack without dilation."""
    if any(l.dilation != 1 for l in layers):
        raise ContractError("dilated layer present; use receptive_field_dilated")
    return receptive_field_dilated(layers)


def receptive_field_dilated(layers: Sequence[LayerSpec]) -> int:
    """Same sum with the effective kernel extent ``d_p (k_p - 1)`` per layer."""
    total, jump = 1, 1
    for l in layers:
        total += l.dilation * (l.kernel_size - 1) * jump
        jump *= l.stride
    return total


def _probe_axis(layers: Sequence[LayerSpec], axis: int) -> int:
    """Nonzero-gradient extent along ``axis`` of one output voxel of a linear all-ones conv stack."""
    length = 8
    while True:
        shape = [1, 1, 1, 1, 1]
        shape[2 + axis] = length
        x = torch.zeros(shape, dtype=torch.float64, requires_grad=True)
        y = x
        for l in layers:
            k = [1, 1, 1]
            s = [1, 1, 1]
            d = [1, 1, 1]
            k[axis], s[axis], d[axis] = l.kernel_size, l.stride, l.dilation
            w = torch.ones((1, 1, *k), dtype=torch.float64)
            if y.shape[2 + axis] < (k[axis] - 1) * d[axis] + 1:
                y = None
                break
            y = torch.nn.functional.conv3d(y, w, stride=s, dilation=d)
        # need at least two outputs so the first output's field lies wholly inside the input
        if y is not None and y.shape[2 + axis] >= 2:
            break
        length *= 2
    y.flatten()[0].backward()
    g = x.grad.flatten().numpy()
    nz = np.flatnonzero(g)
    return int(nz[-1] - nz[0] + 1)


def probe_receptive_field(layers: Sequence[LayerSpec]) -> tuple[int, int, int]:
    """Empirical receptive field per axis, found by back-propagating from one output voxel."""
    return tuple(_probe_axis(layers, a) for a in range(3))


def probe_receptive_field_3d(layers: Sequence[LayerSpec], size: int) -> tuple[int, int, int]:
    """Full 3D version of the probe on a cubic input of side ``size`` (small stacks only)."""
    x = torch.zeros((1, 1, size, size, size), dtype=torch.float64, requires_grad=True)
    y = x
    for l in layers:
        w = torch.ones((1, 1, l.kernel_size, l.kernel_size, l.kernel_size), dtype=torch.float64)
        y = torch.nn.functional.conv3d(y, w, stride=l.stride, dilation=l.dilation)
    if min(y.shape[2:]) < 1:
        raise ContractError(f"input side {size} too small for this stack")
    y[0, 0, 0, 0, 0].backward()
    idx = np.argwhere(x.grad[0, 0].numpy() != 0)
    return tuple(int(v) for v in idx.max(axis=0) - idx.min(axis=0) + 1)


# --- network ----------------------------------------------------------------


@dataclass
class ModelConfig:
    in_channels: int = 1
    channels: tuple = (16, 32, 64)
    kernel_size: int = 3
    dilation: int = 2
    reduction: int = 4
    pool_stride: int = 2
    use_dilation: bool = True
    use_attention: bool = True
    patch_shape: tuple = (32, 64, 64)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.patch_shape = tuple(int(n) for n in self.patch_shape)
        if len(self.channels) < 1 or min(self.channels) < 1:
            raise ConfigurationError("channels must be a non-empty tuple of positive ints")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd and >= 1")
        if self.dilation < 1 or self.reduction < 1 or self.pool_stride < 1:
            raise ConfigurationError("dilation, reduction and pool_stride must be >= 1")
        if len(self.patch_shape) != 3:
            raise ConfigurationError("patch_shape must have 3 components")
        factor = self.pool_stride ** (len(self.channels) - 1)
        if any(n % factor for n in self.patch_shape):
            raise ConfigurationError(f"patch_shape {self.patch_shape} must be divisible by {factor}")

    def block_layers(self) -> list[LayerSpec]:
        """Convolution specs of one feature extractor, in order."""
        first = LayerSpec(self.kernel_size, 1, self.dilation if self.use_dilation else 1)
        return [first, LayerSpec(self.kernel_size), LayerSpec(self.kernel_size)]

    def encoder_layers(self) -> list[LayerSpec]:
        """Conv/pool specs along the encoder path down to the bottleneck."""
        out = []
        for level in range(len(self.channels)):
            if level:
                out.append(LayerSpec(self.pool_stride, self.pool_stride))
            out.extend(self.block_layers())
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate: global average pool, bottleneck MLP, sigmoid, channel scaling."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)[:, :, None, None, None]


def channel_attention(features: torch.Tensor, module: ChannelAttention) -> torch.Tensor:
    return module(features)


def _conv(cin, cout, k, d=1):
    return nn.Sequential(
        nn.Conv3d(cin, cout, k, padding=d * (k - 1) // 2, dilation=d),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


class FeatureBlock(nn.Module):
    """Dilated conv, channel attention, then two standard convs."""

    def __init__(self, cin: int, cout: int, cfg: ModelConfig):
        super().__init__()
        d = cfg.dilation if cfg.use_dilation else 1
        self.dilated = _conv(cin, cout, cfg.kernel_size, d)
        self.attention = ChannelAttention(cout, cfg.reduction) if cfg.use_attention else nn.Identity()
        self.conv1 = _conv(cout, cout, cfg.kernel_size)
        self.conv2 = _conv(cout, cout, cfg.kernel_size)

    def forward(self, x):
        return self.conv2(self.conv1(self.attention(self.dilated(x))))


class AirwayNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        ch = cfg.channels
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for c in ch:
            self.down.append(FeatureBlock(cin, c, cfg))
            cin = c
        self.pool = nn.MaxPool3d(cfg.pool_stride)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for level in range(len(ch) - 1, 0, -1):
            self.up.append(nn.ConvTranspose3d(ch[level], ch[level - 1], cfg.pool_stride, stride=cfg.pool_stride))
            self.dec.append(FeatureBlock(2 * ch[level - 1], ch[level - 1], cfg))
        self.head = nn.Conv3d(ch[0], 2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 1, Z, Y, X)`` -> ``(B, 2, Z, Y, X)`` sigmoid maps: channel 0 airway, channel 1 background."""
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([skips.pop(), up(x)], dim=1))
        return torch.sigmoid(self.head(x))


def build_model(cfg: ModelConfig | None = None, seed: int | None = None) -> AirwayNet:
    if seed is not None:
        torch.manual_seed(seed)
    return AirwayNet(cfg)


def forward(model: AirwayNet, patch) -> ConfidenceMaps:
    """Run one windowed patch through the model in evaluation mode."""
    data = np.asarray(getattr(patch, "data", patch), dtype=np.float32)
    if tuple(data.shape) != tuple(model.cfg.patch_shape):
        raise ContractError(f"patch shape {data.shape} != configured {model.cfg.patch_shape}")
    if data.min() < 0 or data.max() > 1:
        raise ContractError("patch intensities must be windowed into [0, 1]")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(data)[None, None])[0].numpy()
    model.train(was_training)
    return ConfidenceMaps(out[0], out[1], getattr(patch, "spacing", (1.0, 1.0, 1.0)))


def predict_patches(model: AirwayNet, patches: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """``(N, Z, Y, X)`` windowed patches -> ``(N, 2, Z, Y, X)`` confidences (any spatial size the net accepts)."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(patches), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(patches[i : i + batch_size], dtype=np.float32))[:, None]
            out.append(model(x).numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 2, *patches.shape[1:]), dtype=np.float32)


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(model: AirwayNet, path, extra: dict | None = None) -> None:
    cfg = asdict(model.cfg)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": cfg,
            "config_hash": model.cfg.config_hash(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        Path(path),
    )


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[AirwayNet, dict]:
    """Rebuild the model stored at ``path``.

    Rejects unknown format versions, a config whose hash does not match the
    stored hash, and (if given) a config different from ``expected``.
    """
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format {blob.get('format_version')!r}")
    cfg = ModelConfig(**blob["config"])
    if cfg.config_hash() != blob["config_hash"]:
        raise ConfigurationError("checkpoint config hash mismatch")
    if expected is not None and expected.config_hash() != blob["config_hash"]:
        raise ConfigurationError("checkpoint was trained with a different model config")
    model = AirwayNet(cfg)
    model.load_state_dict(blob["state_dict"])
    return model, blob.get("extra", {})
