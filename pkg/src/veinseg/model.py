"""Segmentation network contract, a small encoder-decoder backbone, the EMA
teacher, input normalization, and checkpoint I/O.

The contract every backbone honors: (N, 3, H, W) float input, (N, 4, H, W)
logits output, spatial dims preserved. Backbones register under a name so
heavier architectures can slot in behind the same training loop.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

from .core import NUM_CLASSES, load_image

CHECKPOINT_FORMAT_VERSION = 1

_BACKBONES: dict[str, Callable[..., nn.Module]] = {}


def register_backbone(name: str):
    def deco(factory: Callable[..., nn.Module]):
        if name in _BACKBONES:
            raise ValueError(f"backbone {name!r} already registered")
        _BACKBONES[name] = factory
        return factory

    return deco


def available_backbones() -> list[str]:
    return sorted(_BACKBONES)


def create_model(name: str, **kwargs) -> nn.Module:
    if name not in _BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; available: {available_backbones()}")
    model = _BACKBONES[name](**kwargs)
    model.backbone_name = name
    model.backbone_kwargs = dict(kwargs)
    return model


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    # GroupNorm keeps eval-mode forward independent of batch composition.
    def gn(c: int) -> nn.GroupNorm:
        return nn.GroupNorm(min(8, c), c)

    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        gn(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        gn(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """4-level encoder-decoder with skip connections; no dropout, no BatchNorm,
    so eval-mode forward is exactly deterministic."""

    def __init__(self, widths: tuple[int, int, int, int] = (32, 64, 128, 256), in_channels: int = 3):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.widths = tuple(widths)
        self.stride_factor = 8
        self.enc0 = _conv_block(in_channels, w0)
        self.enc1 = _conv_block(w0, w1)
        self.enc2 = _conv_block(w1, w2)
        self.enc3 = _conv_block(w2, w3)
        self.pool = nn.MaxPool2d(2)
        self.up3 = nn.ConvTranspose2d(w3, w2, 2, stride=2)
        self.dec2 = _conv_block(2 * w2, w2)
        self.up2 = nn.ConvTranspose2d(w2, w1, 2, stride=2)
        self.dec1 = _conv_block(2 * w1, w1)
        self.up1 = nn.ConvTranspose2d(w1, w0, 2, stride=2)
        self.dec0 = _conv_block(2 * w0, w0)
        self.head = nn.Conv2d(w0, NUM_CLASSES, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        s = self.stride_factor
        if h % s or w % s:
            raise ValueError(f"input dims {(h, w)} must be divisible by stride factor {s}")
        e0 = self.enc0(x)
        e1 = self.enc1(self.pool(e0))
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up3(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up2(d2), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up1(d1), e0], dim=1))
        return self.head(d0)


@register_backbone("unet")
def _unet(widths: Iterable[int] = (32, 64, 128, 256)) -> UNet:
    return UNet(widths=tuple(widths))


@register_backbone("unet-tiny")
def _unet_tiny() -> UNet:
    return UNet(widths=(8, 16, 32, 64))


@dataclass
class TeacherState:
    """EMA shadow of a student network. decay=0 tracks the student exactly;
    decay must stay below 1 or the teacher would never move."""

    module: nn.Module
    decay: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"decay must be in [0, 1), got {self.decay}")
        self.module.requires_grad_(False)

    @classmethod
    def from_student(cls, student: nn.Module, decay: float) -> "TeacherState":
        shadow = copy.deepcopy(student)
        shadow.eval()
        return cls(module=shadow, decay=decay)


def ema_update(teacher: TeacherState, student: nn.Module) -> TeacherState:
    """shadow <- decay * shadow + (1 - decay) * student, elementwise."""
    s_params = dict(student.named_parameters())
    t_params = dict(teacher.module.named_parameters())
    if s_params.keys() != t_params.keys():
        raise ValueError("teacher/student parameter sets differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise ValueError(f"shape mismatch at {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
            tp.mul_(teacher.decay).add_(sp, alpha=1.0 - teacher.decay)
        for (name, tb), (_, sb) in zip(teacher.module.named_buffers(), student.named_buffers()):
            tb.copy_(sb)
    return teacher


@dataclass(frozen=True)
class Normalization:
    """Per-channel statistics of training images scaled to [0, 1]."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def apply(self, image: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.mean, dtype=image.dtype, device=image.device).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=image.dtype, device=image.device).view(1, 3, 1, 1)
        return (image - mean) / std


def compute_normalization(image_paths: Iterable[Path | str]) -> Normalization:
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    n = 0
    for path in image_paths:
        img = load_image(path).astype(np.float64) / 255.0
        total += img.sum(axis=(0, 1))
        total_sq += (img**2).sum(axis=(0, 1))
        n += img.shape[0] * img.shape[1]
    if n == 0:
        raise ValueError("no images to compute normalization from")
    mean = total / n
    var = np.maximum(total_sq / n - mean**2, 1e-8)
    return Normalization(mean=tuple(float(m) for m in mean), std=tuple(float(s) for s in np.sqrt(var)))


def save_checkpoint(
    path: Path | str,
    model: nn.Module,
    optimizer: torch.optim.Optimizer | None,
    epoch: int,
    normalization: Normalization,
    config: dict,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone": getattr(model, "backbone_name", "unet"),
        "backbone_kwargs": getattr(model, "backbone_kwargs", {}),
        "model_state": model.state_dict(),
        "optimizer_state": None if optimizer is None else optimizer.state_dict(),
        "epoch": epoch,
        "normalization": {"mean": list(normalization.mean), "std": list(normalization.std)},
        "config": config,
        "rng": {
            "torch": torch.get_rng_state(),
            "numpy_entropy": None,  # stream seeds live in config; nothing hidden here
        },
    }
    torch.save(payload, path)


def load_checkpoint(path: Path | str) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r}")
    return payload


def model_from_checkpoint(payload: dict) -> tuple[nn.Module, Normalization]:
    model = create_model(payload["backbone"], **payload["backbone_kwargs"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    norm = Normalization(
        mean=tuple(payload["normalization"]["mean"]), std=tuple(payload["normalization"]["std"])
    )
    return model, norm
