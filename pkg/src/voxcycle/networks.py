"""Builders and shape contracts for the three 3D architectures.

Segmentor: U-Net, 4 strided-conv downsamples (max rate 16), nearest-
interpolation upsampling, 3x3x3 kernels, logits out. Generator: same
family at depth 5 (rate 32) with tanh output. Discriminator: 5 conv
layers of 4x4x4 kernels, strides 2,2,2,1,1, padding 1; the first four
carry norm + LeakyReLU(0.2), the last emits raw patch scores for the
least-squares objective.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError

SEGMENTOR = "segmentor"
GENERATOR = "generator"
DISCRIMINATOR = "discriminator"

_DEPTHS = {SEGMENTOR: 4, GENERATOR: 5, DISCRIMINATOR: 5}
_KERNELS = {SEGMENTOR: 3, GENERATOR: 3, DISCRIMINATOR: 4}
_DISC_STRIDES = (2, 2, 2, 1, 1)

CHECKPOINT_VERSION = 1


@dataclass
class NetworkSpec:
    """Architecture description from which the layer list is derived."""

    kind: str
    in_channels: int
    out_channels: int
    base_filters: int = 16
    norm: str = "instance"
    depth: int = 0  # 0 = derive from kind

    def __post_init__(self):
        if self.kind not in _DEPTHS:
            raise ValidationError(f"unknown network kind {self.kind!r}")
        if self.depth == 0:
            self.depth = _DEPTHS[self.kind]
        if self.depth != _DEPTHS[self.kind]:
            raise ValidationError(
                f"{self.kind} depth is fixed at {_DEPTHS[self.kind]}, got {self.depth}"
            )
        if self.in_channels < 1 or self.out_channels < 1 or self.base_filters < 1:
            raise ValidationError("channel and filter counts must be >= 1")
        if self.norm not in ("instance", "batch", "none"):
            raise ValidationError(f"unknown norm {self.norm!r}")

    @property
    def kernel(self) -> int:
        return _KERNELS[self.kind]

    @property
    def divisor(self) -> int:
        """Required divisibility of input spatial dims (U-Nets only)."""
        return 2 ** self.depth

    def output_shape(self, spatial) -> tuple[int, ...]:
        """Spatial output shape for a given input, or ShapeError."""
        spatial = tuple(int(d) for d in spatial)
        if len(spatial) != 3:
            raise ShapeError(f"expected 3 spatial dims, got {spatial}")
        if self.kind in (SEGMENTOR, GENERATOR):
            bad = [(axis, d) for axis, d in enumerate(spatial) if d % self.divisor]
            if bad:
                detail = ", ".join(f"axis {a} has size {d}" for a, d in bad)
                raise ShapeError(
                    f"{self.kind} needs spatial dims divisible by {self.divisor}: {detail}"
                )
            return spatial
        out = list(spatial)
        for layer, s in enumerate(_DISC_STRIDES, start=1):
            for axis in range(3):
                nxt = (out[axis] + 2 - 4) // s + 1
                if nxt < 1:
                    raise ShapeError(
                        f"discriminator input axis {axis} (size {spatial[axis]}) "
                        f"shrinks below 1 voxel at layer {layer}"
                    )
                out[axis] = nxt
        return tuple(out)


def _norm_layer(norm: str, channels: int) -> nn.Module:
    if norm == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    if norm == "batch":
        return nn.BatchNorm3d(channels)
    return nn.Identity()


def _conv_block(in_ch: int, out_ch: int, stride: int, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
        _norm_layer(norm, out_ch),
        nn.ReLU(inplace=True),
    )


class UNet3D(nn.Module):
    """Strided-conv encoder, nearest-upsample decoder, skip concatenation.

    The deepest encoder block carries no normalization: at minimum input
    size its output is a single voxel per channel, where per-instance
    statistics are undefined.
    """

    def __init__(self, in_channels: int, out_channels: int, base_filters: int,
                 depth: int, norm: str, final_tanh: bool):
        super().__init__()
        widths = [base_filters * 2 ** i for i in range(depth + 1)]
        self.depth = depth
        self.final_tanh = final_tanh
        self.stem = _conv_block(in_channels, widths[0], 1, norm)
        self.down = nn.ModuleList(
            _conv_block(widths[i - 1], widths[i], 2, norm if i < depth else "none")
            for i in range(1, depth + 1)
        )
        self.up = nn.ModuleList(
            _conv_block(widths[i] + widths[i - 1], widths[i - 1], 1, norm)
            for i in range(depth, 0, -1)
        )
        self.head = nn.Conv3d(widths[0], out_channels, kernel_size=3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = [self.stem(x)]
        for down in self.down:
            skips.append(down(skips[-1]))
        y = skips[-1]
        for i, up in enumerate(self.up):
            y = F.interpolate(y, scale_factor=2, mode="nearest")
            y = up(torch.cat([y, skips[self.depth - 1 - i]], dim=1))
        y = self.head(y)
        return torch.tanh(y) if self.final_tanh else y


class PatchDiscriminator3D(nn.Module):
    """Five 4x4x4 convs; norm + LeakyReLU(0.2) on the first four only."""

    def __init__(self, in_channels: int, base_filters: int, norm: str):
        super().__init__()
        widths = [base_filters * m for m in (1, 2, 4, 8)]
        chans = [in_channels] + widths
        blocks = []
        for i, stride in enumerate(_DISC_STRIDES[:-1]):
            blocks.append(nn.Sequential(
                nn.Conv3d(chans[i], chans[i + 1], kernel_size=4, stride=stride, padding=1),
                _norm_layer(norm, chans[i + 1]),
                nn.LeakyReLU(0.2, inplace=True),
            ))
        self.blocks = nn.ModuleList(blocks)
        self.score = nn.Conv3d(widths[-1], 1, kernel_size=4, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.score(x)


@dataclass
class ModelHandle:
    """A built network plus the NetworkSpec it was built from."""

    spec: NetworkSpec
    module: nn.Module

    def __post_init__(self):
        if self.parameter_count <= 0:
            raise ValidationError("model has no trainable parameters")

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())


def build_segmentor(in_channels: int = 1, n_labels: int = 4,
                    base_filters: int = 16, norm: str = "instance") -> ModelHandle:
    """U-Net emitting n_labels+1 logit channels (background included)."""
    spec = NetworkSpec(SEGMENTOR, in_channels, n_labels + 1, base_filters, norm)
    module = UNet3D(in_channels, spec.out_channels, base_filters, spec.depth, norm, final_tanh=False)
    return ModelHandle(spec, module)


def build_generator(in_channels: int = 1, base_filters: int = 16,
                    norm: str = "instance") -> ModelHandle:
    """Channel-preserving translation U-Net with tanh output range (-1, 1)."""
    spec = NetworkSpec(GENERATOR, in_channels, in_channels, base_filters, norm)
    module = UNet3D(in_channels, in_channels, base_filters, spec.depth, norm, final_tanh=True)
    return ModelHandle(spec, module)


def build_discriminator(in_channels: int = 1, base_filters: int = 16,
                        norm: str = "instance") -> ModelHandle:
    """PatchGAN scorer mapping a volume to a raw patch-score map."""
    spec = NetworkSpec(DISCRIMINATOR, in_channels, 1, base_filters, norm)
    module = PatchDiscriminator3D(in_channels, base_filters, norm)
    return ModelHandle(spec, module)


def forward(m: ModelHandle, x: torch.Tensor) -> torch.Tensor:
    """Shape-checked forward pass; accepts (C,X,Y,Z) or (N,C,X,Y,Z)."""
    if x.dim() not in (4, 5):
        raise ShapeError(f"expected 4 or 5 dims, got {tuple(x.shape)}")
    if x.shape[-4] != m.spec.in_channels:
        raise ShapeError(
            f"{m.spec.kind} expects {m.spec.in_channels} channels, got {x.shape[-4]}"
        )
    m.spec.output_shape(x.shape[-3:])
    if x.dim() == 4:
        return m.module(x.unsqueeze(0)).squeeze(0)
    return m.module(x)


def save_checkpoint(path, handle: ModelHandle, optimizer: torch.optim.Optimizer | None = None,
                    epoch: int = 0, extra: dict | None = None) -> None:
    """Self-describing checkpoint: spec + parameters + optimizer + epoch."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(handle.spec),
        "model_state": handle.module.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def _build_from_spec(spec: NetworkSpec) -> ModelHandle:
    if spec.kind == SEGMENTOR:
        return build_segmentor(spec.in_channels, spec.out_channels - 1,
                               spec.base_filters, spec.norm)
    if spec.kind == GENERATOR:
        return build_generator(spec.in_channels, spec.base_filters, spec.norm)
    return build_discriminator(spec.in_channels, spec.base_filters, spec.norm)


def load_checkpoint(path) -> tuple[ModelHandle, dict]:
    """Rebuild the model from its spec and restore parameters.

    Returns (handle, meta) where meta holds optimizer_state, epoch, extra.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "version" not in payload:
        raise ValidationError(f"not a checkpoint (missing version field): {path}")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint version {payload['version']} in {path}"
        )
    spec = NetworkSpec(**payload["spec"])
    handle = _build_from_spec(spec)
    handle.module.load_state_dict(payload["model_state"])
    meta = {
        "optimizer_state": payload.get("optimizer_state"),
        "epoch": payload.get("epoch", 0),
        "extra": payload.get("extra", {}),
    }
    return handle, meta
