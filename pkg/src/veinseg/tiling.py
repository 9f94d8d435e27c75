"""Deterministic tiling of full-resolution images into fixed-size patches,
empty-patch filtering, stitched reassembly, and the patch-level dataset
manifest that records grid provenance.

Whole blades are far larger than the network input, so training and inference
run on non-overlapping patches; the grid pads up to the next patch multiple
and stitching crops the padding back off, making extract/stitch a bit-exact
round trip.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    BACKGROUND,
    UNKNOWN,
    DatasetManifest,
    ManifestError,
    PartialMask,
    Regime,
    Sample,
    SegMask,
    Split,
    load_image,
    load_mask,
    save_image,
    save_mask,
)

DEFAULT_PATCH = 256
# A pixel is background-like when every channel sits within this distance of
# the pad value. Sized so lamina noise stays below it with a wide margin.
DEFAULT_TOLERANCE = 24

PATCH_MANIFEST_VERSION = 1


@dataclass(frozen=True)
class TileGrid:
    """Non-overlapping row-major tiling of a padded canvas.

    ``tiles`` holds the top-left (row, col) pixel offset of every patch in
    the padded canvas; ``pad_value`` is the per-channel image fill.
    """

    original: tuple[int, int]
    patch: int
    padded: tuple[int, int]
    tiles: tuple[tuple[int, int], ...]
    pad_value: tuple[int, int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.padded[0] // self.patch, self.padded[1] // self.patch


def plan_grid(
    height: int, width: int, patch: int = DEFAULT_PATCH, pad_value: tuple[int, int, int] = (0, 0, 0)
) -> TileGrid:
    """Smallest patch-multiple canvas covering (height, width), row-major tiles."""
    if height < 1 or width < 1 or patch < 1:
        raise ValueError(f"height, width, patch must be >= 1, got {(height, width, patch)}")
    ph = -(-height // patch) * patch
    pw = -(-width // patch) * patch
    tiles = tuple((r, c) for r in range(0, ph, patch) for c in range(0, pw, patch))
    return TileGrid(
        original=(height, width),
        patch=patch,
        padded=(ph, pw),
        tiles=tiles,
        pad_value=tuple(int(v) for v in pad_value),
    )


def modal_color(image: np.ndarray) -> tuple[int, int, int]:
    """Per-channel modal value; the lamina dominates, so this is its color."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("expected HxWx3 uint8 image")
    return tuple(int(np.bincount(image[:, :, c].ravel(), minlength=256).argmax()) for c in range(3))


def _pad_canvas(array: np.ndarray, grid: TileGrid, fill) -> np.ndarray:
    h, w = grid.original
    out_shape = (grid.padded[0], grid.padded[1]) + array.shape[2:]
    out = np.empty(out_shape, dtype=array.dtype)
    out[...] = fill
    out[:h, :w] = array
    return out


def extract_patches(
    image: np.ndarray,
    mask: SegMask | PartialMask | None,
    grid: TileGrid,
) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Cut the padded canvas into patches, in grid order.

    Image padding uses grid.pad_value; mask padding is background for a full
    mask and UNKNOWN for a partial one, so padding never fabricates labels.
    """
    if image.shape[:2] != grid.original:
        raise ValueError(f"image shape {image.shape[:2]} != grid original {grid.original}")
    canvas = _pad_canvas(image, grid, np.array(grid.pad_value, dtype=image.dtype))
    mask_canvas = None
    if mask is not None:
        if (mask.height, mask.width) != grid.original:
            raise ValueError(f"mask shape {(mask.height, mask.width)} != grid original {grid.original}")
        fill = UNKNOWN if isinstance(mask, PartialMask) else BACKGROUND
        mask_canvas = _pad_canvas(mask.labels, grid, np.uint8(fill))
    p = grid.patch
    out = []
    for r, c in grid.tiles:
        mp = None if mask_canvas is None else mask_canvas[r : r + p, c : c + p].copy()
        out.append((canvas[r : r + p, c : c + p].copy(), mp))
    return out


def informative_fraction(
    patch_image: np.ndarray, pad_value: tuple[int, int, int], tolerance: int = DEFAULT_TOLERANCE
) -> float:
    """Fraction of pixels deviating from pad_value beyond tolerance in any channel."""
    dev = np.abs(patch_image.astype(np.int16) - np.array(pad_value, dtype=np.int16))
    fg = (dev > tolerance).any(axis=-1)
    return float(fg.mean())


def filter_informative(
    patches,
    min_foreground_fraction: float,
    pad_value: tuple[int, int, int],
    tolerance: int = DEFAULT_TOLERANCE,
) -> list[int]:
    """Indices of patches worth keeping (foreground fraction >= threshold).

    Accepts patch images or (image, mask) pairs; returns indices so parallel
    offset/mask lists stay aligned.
    """
    if not 0.0 <= min_foreground_fraction <= 1.0:
        raise ValueError(f"threshold must be in [0,1], got {min_foreground_fraction}")
    keep = []
    for i, item in enumerate(patches):
        img = item[0] if isinstance(item, tuple) else item
        if informative_fraction(img, pad_value, tolerance) >= min_foreground_fraction:
            keep.append(i)
    return keep


def stitch(patch_predictions: dict[tuple[int, int], np.ndarray], grid: TileGrid) -> np.ndarray:
    """Reassemble per-tile maps keyed by (row, col) offset; crops to original."""
    p = grid.patch
    first = next(iter(patch_predictions.values()), None)
    extra = () if first is None or first.ndim == 2 else first.shape[2:]
    canvas = np.zeros((grid.padded[0], grid.padded[1]) + extra, dtype=first.dtype if first is not None else np.uint8)
    for r, c in grid.tiles:
        if (r, c) not in patch_predictions:
            raise ValueError(f"missing tile at offset {(r, c)}")
        tile = patch_predictions[(r, c)]
        if tile.shape[:2] != (p, p):
            raise ValueError(f"tile at {(r, c)} has shape {tile.shape[:2]}, expected {(p, p)}")
        canvas[r : r + p, c : c + p] = tile
    h, w = grid.original
    return canvas[:h, :w].copy()


# ---------------------------------------------------------------------------
# Patch-level dataset: the offline product of tiling a training manifest,
# with enough provenance to rebuild every source grid.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceInfo:
    id: str
    height: int
    width: int
    pad_value: tuple[int, int, int]
    regime: Regime
    species: str

    def grid(self, patch: int) -> TileGrid:
        return plan_grid(self.height, self.width, patch, self.pad_value)


@dataclass(frozen=True)
class PatchRecord:
    id: str
    source_id: str
    regime: Regime
    row: int
    col: int
    image_path: str
    mask_path: str | None


@dataclass(frozen=True)
class PatchManifest:
    patch: int
    source_manifest: str
    sources: tuple[SourceInfo, ...]
    records: tuple[PatchRecord, ...]
    root: Path

    def by(self, regime: Regime | None = None) -> list[PatchRecord]:
        return [r for r in self.records if regime is None or r.regime is regime]

    def source(self, source_id: str) -> SourceInfo:
        for s in self.sources:
            if s.id == source_id:
                return s
        raise ManifestError(f"unknown source id {source_id!r}")

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath

    def resolve_source(self) -> Path:
        p = Path(self.source_manifest)
        return p if p.is_absolute() else (self.root / p).resolve()

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        doc = {
            "version": PATCH_MANIFEST_VERSION,
            "patch": self.patch,
            "source_manifest": self.source_manifest,
            "sources": [
                {
                    "id": s.id,
                    "height": s.height,
                    "width": s.width,
                    "pad_value": list(s.pad_value),
                    "regime": s.regime.value,
                    "species": s.species,
                }
                for s in self.sources
            ],
            "patches": [
                {
                    "id": r.id,
                    "source": r.source_id,
                    "regime": r.regime.value,
                    "row": r.row,
                    "col": r.col,
                    "image": r.image_path,
                    "mask": r.mask_path,
                }
                for r in self.records
            ],
        }
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path


def load_patch_manifest(path: Path | str) -> PatchManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"patch manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"patch manifest {path} is not valid JSON: {e}") from e
    if doc.get("version") != PATCH_MANIFEST_VERSION:
        raise ManifestError(f"unsupported patch manifest version {doc.get('version')!r}")
    sources = tuple(
        SourceInfo(
            id=s["id"],
            height=int(s["height"]),
            width=int(s["width"]),
            pad_value=tuple(int(v) for v in s["pad_value"]),
            regime=Regime(s["regime"]),
            species=s["species"],
        )
        for s in doc["sources"]
    )
    records = tuple(
        PatchRecord(
            id=r["id"],
            source_id=r["source"],
            regime=Regime(r["regime"]),
            row=int(r["row"]),
            col=int(r["col"]),
            image_path=r["image"],
            mask_path=r.get("mask"),
        )
        for r in doc["patches"]
    )
    return PatchManifest(
        patch=int(doc["patch"]),
        source_manifest=doc["source_manifest"],
        sources=sources,
        records=records,
        root=path.parent,
    )


def prepare_patches(
    manifest: DatasetManifest,
    manifest_path: Path | str,
    out_dir: Path | str,
    *,
    patch: int = DEFAULT_PATCH,
    min_foreground_fraction: float = 0.01,
    tolerance: int = DEFAULT_TOLERANCE,
) -> PatchManifest:
    """Tile every train-split sample, drop uninformative patches, write the
    patch dataset plus its manifest (patches.json) under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Stored relative to the patch root so the pair of directories relocates.
    source_rel = os.path.relpath(Path(manifest_path).resolve(), out_dir.resolve())
    sources: list[SourceInfo] = []
    records: list[PatchRecord] = []
    for sample in manifest.by(split=Split.TRAIN):
        image = load_image(manifest.resolve(sample.image_path))
        mask: SegMask | PartialMask | None = None
        if sample.mask_path is not None:
            labels = load_mask(manifest.resolve(sample.mask_path))
            mask = SegMask(labels) if sample.regime is Regime.FULL else PartialMask(labels)
        pad = modal_color(image)
        grid = plan_grid(image.shape[0], image.shape[1], patch, pad)
        sources.append(
            SourceInfo(
                id=sample.id,
                height=image.shape[0],
                width=image.shape[1],
                pad_value=pad,
                regime=sample.regime,
                species=sample.species,
            )
        )
        patches = extract_patches(image, mask, grid)
        for i in filter_informative(patches, min_foreground_fraction, pad, tolerance):
            r, c = grid.tiles[i]
            pid = f"{sample.id}_r{r}_c{c}"
            image_rel = f"images/{pid}.png"
            save_image(out_dir / image_rel, patches[i][0])
            mask_rel: str | None = None
            if patches[i][1] is not None:
                mask_rel = f"masks/{pid}.png"
                save_mask(out_dir / mask_rel, patches[i][1])
            records.append(
                PatchRecord(
                    id=pid,
                    source_id=sample.id,
                    regime=sample.regime,
                    row=r,
                    col=c,
                    image_path=image_rel,
                    mask_path=mask_rel,
                )
            )
    pm = PatchManifest(
        patch=patch,
        source_manifest=source_rel,
        sources=tuple(sources),
        records=tuple(records),
        root=out_dir,
    )
    pm.save(out_dir / "patches.json")
    return pm
