"""Per-class IoU, confusion matrices, stitched full-blade evaluation, and
color renderings of predictions.

Confusion accumulation is associative and commutative, so per-image matrices
can be computed in any order (or in parallel) and merged. A class absent from
both prediction and ground truth is excluded from the mean rather than scored
0 or 1; the mean over the remaining classes is reported two ways, with
background included and over the three vein classes alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .core import (
    NUM_CLASSES,
    Regime,
    Sample,
    SegMask,
    load_image,
    load_mask,
    save_image,
)
from .model import Normalization
from .tiling import extract_patches, modal_color, plan_grid, stitch

# Rendering palette: background, primary, secondary, tertiary.
RENDER_COLORS = np.array(
    [[0, 0, 0], [255, 0, 0], [255, 255, 0], [255, 255, 255]], dtype=np.uint8
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[gt, pred] over evaluated pixels."""

    counts: np.ndarray

    @classmethod
    def empty(cls) -> "ConfusionMatrix":
        return cls(np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    def __post_init__(self) -> None:
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ValueError(f"expected {NUM_CLASSES}x{NUM_CLASSES} counts, got {arr.shape}")
        if (arr < 0).any():
            raise ValueError("confusion counts must be >= 0")
        object.__setattr__(self, "counts", arr)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: SegMask | np.ndarray) -> ConfusionMatrix:
    """Add one (prediction, ground truth) pair; returns a new matrix."""
    gt_labels = gt.labels if isinstance(gt, SegMask) else np.asarray(gt)
    pred = np.asarray(pred)
    if pred.shape != gt_labels.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt_labels.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= NUM_CLASSES):
        raise ValueError("prediction contains out-of-vocabulary class ids")
    if gt_labels.size and (gt_labels.min() < 0 or gt_labels.max() >= NUM_CLASSES):
        raise ValueError("ground truth contains out-of-vocabulary class ids")
    idx = gt_labels.astype(np.int64).ravel() * NUM_CLASSES + pred.astype(np.int64).ravel()
    delta = np.bincount(idx, minlength=NUM_CLASSES * NUM_CLASSES).reshape(NUM_CLASSES, NUM_CLASSES)
    return ConfusionMatrix(cm.counts + delta)


@dataclass(frozen=True)
class IoUReport:
    """per_class[c] is None when class c appears in neither gt nor prediction;
    miou averages the present classes (background included), miou_veins the
    present vein classes only."""

    per_class: tuple[float | None, float | None, float | None, float | None]
    miou: float
    miou_veins: float | None
    confusion: ConfusionMatrix | None = None

    def to_dict(self) -> dict:
        return {
            "per_class": list(self.per_class),
            "miou": self.miou,
            "miou_veins": self.miou_veins,
            "confusion": None if self.confusion is None else self.confusion.counts.tolist(),
        }


def report(cm: ConfusionMatrix) -> IoUReport:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    counts = cm.counts
    per_class: list[float | None] = []
    for c in range(NUM_CLASSES):
        tp = counts[c, c]
        denom = counts[c, :].sum() + counts[:, c].sum() - tp
        per_class.append(None if denom == 0 else float(tp / denom))
    present = [v for v in per_class if v is not None]
    if not present:
        raise ValueError("all classes absent")
    veins = [v for v in per_class[1:] if v is not None]
    return IoUReport(
        per_class=tuple(per_class),
        miou=float(np.mean(present)),
        miou_veins=None if not veins else float(np.mean(veins)),
        confusion=cm,
    )


def predict_stitched(
    model: torch.nn.Module,
    image: np.ndarray,
    normalization: Normalization,
    patch: int = 256,
    batch_size: int = 8,
) -> np.ndarray:
    """Tile, predict per patch, argmax, stitch; returns an HxW uint8 class map."""
    grid = plan_grid(image.shape[0], image.shape[1], patch, modal_color(image))
    patches = [p for p, _ in extract_patches(image, None, grid)]
    preds: dict[tuple[int, int], np.ndarray] = {}
    model.eval()
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            chunk = patches[start : start + batch_size]
            x = torch.from_numpy(np.stack(chunk).astype(np.float32) / 255.0).permute(0, 3, 1, 2)
            logits = model(normalization.apply(x))
            hard = logits.argmax(dim=1).to(torch.uint8).numpy()
            for offset, labels in zip(grid.tiles[start : start + batch_size], hard):
                preds[offset] = labels
    return stitch(preds, grid)


def evaluate_stitched(
    model: torch.nn.Module,
    samples: Sequence[Sample],
    root: Path,
    *,
    normalization: Normalization,
    patch: int = 256,
    batch_size: int = 8,
    render_dir: Path | str | None = None,
) -> IoUReport:
    """Whole-blade evaluation over fully labeled samples: tile, predict,
    stitch, accumulate one confusion matrix across all images."""
    if not samples:
        raise ValueError("no samples to evaluate")
    cm = ConfusionMatrix.empty()
    for sample in samples:
        if sample.regime is not Regime.FULL or sample.mask_path is None:
            raise ValueError(f"sample {sample.id}: stitched evaluation needs a full mask")
        image = load_image(Path(root) / sample.image_path)
        gt = SegMask(load_mask(Path(root) / sample.mask_path))
        pred = predict_stitched(model, image, normalization, patch, batch_size)
        cm = accumulate(cm, pred, gt)
        if render_dir is not None:
            save_image(Path(render_dir) / f"{sample.id}_pred.png", render_mask(pred))
            save_image(Path(render_dir) / f"{sample.id}_gt.png", render_mask(gt.labels))
    return report(cm)


def render_mask(labels: np.ndarray) -> np.ndarray:
    """Color-coded class map: black background, red V1, yellow V2, white V3."""
    labels = np.asarray(labels)
    if labels.size and labels.max() >= NUM_CLASSES:
        raise ValueError("labels contain out-of-vocabulary class ids")
    return RENDER_COLORS[labels]


def format_report(rep: IoUReport, class_names: Iterable[str] = ("background", "v1", "v2", "v3")) -> str:
    lines = [f"{'class':<12} {'IoU':>8}"]
    for name, v in zip(class_names, rep.per_class):
        lines.append(f"{name:<12} {'absent' if v is None else f'{v:8.4f}':>8}")
    lines.append(f"{'mIoU':<12} {rep.miou:8.4f}")
    if rep.miou_veins is not None:
        lines.append(f"{'mIoU(veins)':<12} {rep.miou_veins:8.4f}")
    return "\n".join(lines)
