"""Weak/strong augmentation pairs with a shared geometric realization.

The weak view applies geometry only (flips); the strong view applies the same
geometry plus photometric perturbations and cutout. Because the two views are
pixel-aligned by construction, a pseudo-label computed on the weak view is
valid target-for-target on the strong view, and a mask pushed through
transform_mask aligns with both.

Images here are float32 HxWx3 in [0, 1]; masks are uint8 label maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.2
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    cutout_count: int = 1
    cutout_size: int = 64

    def __post_init__(self) -> None:
        for name in ("p_hflip", "p_vflip", "p_blur"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} range must be >= 0")
        if self.blur_sigma[0] <= 0 or self.blur_sigma[0] > self.blur_sigma[1]:
            raise ValueError(f"blur_sigma must be 0 < low <= high, got {self.blur_sigma}")
        if self.cutout_count < 0 or self.cutout_size < 0:
            raise ValueError("cutout_count and cutout_size must be >= 0")


@dataclass(frozen=True)
class GeometryRecord:
    """The geometric realization both views share. Enough to replay on a mask."""

    hflip: bool
    vflip: bool
    height: int
    width: int


def apply_pair(
    image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()
) -> tuple[np.ndarray, np.ndarray, GeometryRecord]:
    """Draw one augmentation realization; returns (weak, strong, geometry)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    record = GeometryRecord(
        hflip=bool(rng.random() < cfg.p_hflip),
        vflip=bool(rng.random() < cfg.p_vflip),
        height=h,
        width=w,
    )
    weak = image.astype(np.float32, copy=True)
    if record.hflip:
        weak = weak[:, ::-1]
    if record.vflip:
        weak = weak[::-1, :]
    weak = np.ascontiguousarray(weak)

    strong = weak.copy()
    strong *= 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
    mean = float(strong.mean())
    strong = mean + (strong - mean) * (1.0 + rng.uniform(-cfg.contrast, cfg.contrast))
    gray = strong.mean(axis=2, keepdims=True)
    strong = gray + (strong - gray) * (1.0 + rng.uniform(-cfg.saturation, cfg.saturation))
    if rng.random() < cfg.p_blur:
        sigma = float(rng.uniform(*cfg.blur_sigma))
        strong = cv2.GaussianBlur(strong, ksize=(0, 0), sigmaX=sigma)
    np.clip(strong, 0.0, 1.0, out=strong)
    for _ in range(cfg.cutout_count):
        if cfg.cutout_size == 0:
            continue
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        half = cfg.cutout_size // 2
        y0, y1 = max(cy - half, 0), min(cy + half, h)
        x0, x1 = max(cx - half, 0), min(cx + half, w)
        strong[y0:y1, x0:x1] = 0.5
    return weak, np.ascontiguousarray(strong, dtype=np.float32), record


def transform_mask(labels: np.ndarray, record: GeometryRecord) -> np.ndarray:
    """Replay the recorded geometry on a label map. Values pass through exactly."""
    if labels.shape[:2] != (record.height, record.width):
        raise ValueError(
            f"mask shape {labels.shape[:2]} does not match recorded geometry "
            f"{(record.height, record.width)}"
        )
    out = labels
    if record.hflip:
        out = out[:, ::-1]
    if record.vflip:
        out = out[::-1, :]
    return np.ascontiguousarray(out)
