"""Domain types shared by every other module: the class vocabulary, full and
partial mask semantics, dataset samples, and the manifest that ties a dataset
directory together.

All types are immutable after construction; loaders are pure functions, so
everything here is safe to share across threads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import cv2
import numpy as np

log = logging.getLogger(__name__)

# Class vocabulary, in channel order. The three vein classes form a width
# hierarchy: the primary vein is the widest, tertiary veins the finest.
BACKGROUND = 0
V1 = 1
V2 = 2
V3 = 3
NUM_CLASSES = 4
CLASS_NAMES = ("background", "v1", "v2", "v3")

# Ignore-index sentinel for pixels a partial annotation says nothing about.
# 255 in single-channel 8-bit mask files, leaving headroom for future classes.
UNKNOWN = 255

# A partial annotation only ever commits to the two coarse vein orders.
PARTIAL_KNOWN_LABELS = (V1, V2)

MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """A dataset manifest (or a file it references) failed validation."""


class Regime(str, Enum):
    """Annotation regime of a sample."""

    FULL = "full"
    PARTIAL = "partial"
    UNLABELED = "unlabeled"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNUSED = "unused"


class CrossSpeciesMode(str, Enum):
    """How a cross-species manifest distributes regimes over species."""

    TRANSFER = "transfer"  # every train sample from the source species
    SCARCE = "scarce"      # full from source, partial/unlabeled from target


def _freeze(labels: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SegMask:
    """Dense per-pixel class map; every pixel holds one of the four classes."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        arr = _freeze(self.labels)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.size and int(arr.max()) >= NUM_CLASSES:
            raise ValueError(f"invalid class id {int(arr.max())} in full mask")
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class PartialMask:
    """Per-pixel map that only commits to V1/V2; everything else is UNKNOWN.

    Known labels are restricted to the two coarse vein orders; background and
    tertiary veins never appear (their pixels carry the UNKNOWN sentinel).
    An all-UNKNOWN mask is valid but flagged, since it supervises nothing.
    """

    labels: np.ndarray

    def __post_init__(self) -> None:
        arr = _freeze(self.labels)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        bad = np.setdiff1d(np.unique(arr), np.array(PARTIAL_KNOWN_LABELS + (UNKNOWN,), dtype=np.uint8))
        if bad.size:
            raise ValueError(f"invalid partial label {int(bad[0])}")
        object.__setattr__(self, "labels", arr)
        if self.all_unknown:
            log.warning("partial mask carries no known pixels")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def all_unknown(self) -> bool:
        return bool((self.labels == UNKNOWN).all())


@dataclass(frozen=True)
class Sample:
    """One dataset entry. Paths are POSIX-style, relative to the dataset root."""

    id: str
    image_path: str
    mask_path: str | None
    regime: Regime
    species: str
    split: Split = Split.TRAIN

    def __post_init__(self) -> None:
        if self.regime is Regime.UNLABELED and self.mask_path is not None:
            raise ManifestError(f"sample {self.id}: unlabeled sample must not carry a mask")
        if self.regime is not Regime.UNLABELED and self.mask_path is None:
            raise ManifestError(f"sample {self.id}: {self.regime.value} sample requires a mask")


@dataclass(frozen=True)
class DatasetManifest:
    """Typed listing of a dataset directory.

    ``ratios`` times ``ratio_unit`` pins the number of train samples per
    regime; one unit is a count of full-blade images.
    """

    samples: tuple[Sample, ...]
    ratios: tuple[int, int, int]
    ratio_unit: int
    species: tuple[str, ...]
    root: Path

    def by(self, regime: Regime | None = None, split: Split | None = None) -> list[Sample]:
        out = []
        for s in self.samples:
            if regime is not None and s.regime is not regime:
                continue
            if split is not None and s.split is not split:
                continue
            out.append(s)
        return out

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath

    def validate(self, check_files: bool = True) -> None:
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})[0]
            raise ManifestError(f"sample {dup}: duplicate id across splits")
        declared = set(self.species)
        for s in self.samples:
            if s.species not in declared:
                raise ManifestError(f"sample {s.id}: species {s.species!r} not declared")
        want = {
            Regime.FULL: self.ratios[0] * self.ratio_unit,
            Regime.PARTIAL: self.ratios[1] * self.ratio_unit,
            Regime.UNLABELED: self.ratios[2] * self.ratio_unit,
        }
        for regime, n in want.items():
            got = len(self.by(regime=regime, split=Split.TRAIN))
            if got != n:
                raise ManifestError(
                    f"train split holds {got} {regime.value} samples, ratios require {n}"
                )
        if check_files:
            for s in self.samples:
                self._check_sample_files(s)

    def _check_sample_files(self, s: Sample) -> None:
        img_path = self.resolve(s.image_path)
        if not img_path.is_file():
            raise ManifestError(f"sample {s.id}: missing image {img_path}")
        if s.mask_path is None:
            return
        mask_path = self.resolve(s.mask_path)
        if not mask_path.is_file():
            raise ManifestError(f"sample {s.id}: missing mask {mask_path}")
        labels = load_mask(mask_path)
        try:
            if s.regime is Regime.FULL:
                SegMask(labels)
            else:
                PartialMask(labels)
        except ValueError as e:
            raise ManifestError(f"sample {s.id}: {e}") from e
        h, w = image_size(img_path)
        if labels.shape != (h, w):
            raise ManifestError(
                f"sample {s.id}: mask shape {labels.shape} != image shape {(h, w)}"
            )

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        doc = {
            "version": MANIFEST_VERSION,
            "species": list(self.species),
            "ratio_unit": self.ratio_unit,
            "ratios": list(self.ratios),
            "samples": [
                {
                    "id": s.id,
                    "image": s.image_path,
                    "mask": s.mask_path,
                    "regime": s.regime.value,
                    "species": s.species,
                    "split": s.split.value,
                }
                for s in self.samples
            ],
        }
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path


_SAMPLE_KEYS = {"id", "image", "mask", "regime", "species", "split"}
_MANIFEST_KEYS = {"version", "species", "ratio_unit", "ratios", "samples"}


def load_manifest(path: Path | str, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file; the dataset root is its directory.

    Every failure names the offending sample id.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    unknown = set(doc) - _MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    missing = _MANIFEST_KEYS - set(doc)
    if missing:
        raise ManifestError(f"missing manifest keys: {sorted(missing)}")
    samples = []
    for rec in doc["samples"]:
        unknown = set(rec) - _SAMPLE_KEYS
        if unknown:
            raise ManifestError(f"sample {rec.get('id', '?')}: unknown keys {sorted(unknown)}")
        try:
            samples.append(
                Sample(
                    id=str(rec["id"]),
                    image_path=str(rec["image"]),
                    mask_path=None if rec.get("mask") is None else str(rec["mask"]),
                    regime=Regime(rec["regime"]),
                    species=str(rec["species"]),
                    split=Split(rec.get("split", "train")),
                )
            )
        except (KeyError, ValueError) as e:
            raise ManifestError(f"sample {rec.get('id', '?')}: {e}") from e
    manifest = DatasetManifest(
        samples=tuple(samples),
        ratios=tuple(int(r) for r in doc["ratios"]),
        ratio_unit=int(doc["ratio_unit"]),
        species=tuple(doc["species"]),
        root=path.parent,
    )
    manifest.validate(check_files=check_files)
    return manifest


def build_splits(
    samples: list[Sample],
    ratios: tuple[int, int, int],
    ratio_unit: int,
    seed: int,
    *,
    val_fraction: float = 0.15,
    test_fraction: float = 0.15,
    root: Path | str = ".",
) -> DatasetManifest:
    """Assign train/val/test splits; pure function of (samples, config, seed).

    Train counts per regime equal ratios x ratio_unit. Fully labeled samples
    left over feed val and test at the configured fractions of the leftover
    pool; anything else is kept with split=unused.
    """
    rng = np.random.default_rng(seed)
    want = {
        Regime.FULL: ratios[0] * ratio_unit,
        Regime.PARTIAL: ratios[1] * ratio_unit,
        Regime.UNLABELED: ratios[2] * ratio_unit,
    }
    out: list[Sample] = []
    for regime in (Regime.FULL, Regime.PARTIAL, Regime.UNLABELED):
        pool = sorted((s for s in samples if s.regime is regime), key=lambda s: s.id)
        n = want[regime]
        if len(pool) < n:
            raise ManifestError(
                f"need {n} {regime.value} samples for ratios {ratios} x {ratio_unit}, have {len(pool)}"
            )
        order = rng.permutation(len(pool))
        out.extend(replace(pool[i], split=Split.TRAIN) for i in order[:n])
        rest = [pool[i] for i in order[n:]]
        if regime is Regime.FULL:
            n_val = round(val_fraction * len(rest))
            n_test = round(test_fraction * len(rest))
            out.extend(replace(s, split=Split.VAL) for s in rest[:n_val])
            out.extend(replace(s, split=Split.TEST) for s in rest[n_val : n_val + n_test])
            rest = rest[n_val + n_test :]
        out.extend(replace(s, split=Split.UNUSED) for s in rest)
    manifest = DatasetManifest(
        samples=tuple(out),
        ratios=tuple(ratios),
        ratio_unit=ratio_unit,
        species=tuple(sorted({s.species for s in out})),
        root=Path(root),
    )
    manifest.validate(check_files=False)
    return manifest


def build_cross_species_splits(
    samples: list[Sample],
    source_species: str,
    target_species: str,
    mode: CrossSpeciesMode,
    *,
    ratios: tuple[int, int, int] = (1, 1, 10),
    ratio_unit: int = 6,
    seed: int = 0,
    val_fraction: float = 0.15,
    root: Path | str = ".",
) -> DatasetManifest:
    """Cross-species manifest: train on the source species, evaluate on the target.

    TRANSFER draws every train regime from the source species. SCARCE keeps
    full labels on the source but takes partial and unlabeled train data from
    the target. In both modes the test split is the target's fully labeled
    samples; val comes from leftover source full-labeled samples, so model
    selection never sees the target.
    """
    mode = CrossSpeciesMode(mode)
    by_species = {source_species: [], target_species: []}
    for s in samples:
        if s.species in by_species:
            by_species[s.species].append(s)
    for sp in (source_species, target_species):
        if not by_species[sp]:
            raise ManifestError(f"species {sp!r} has no samples")

    rng = np.random.default_rng(seed)
    want = {
        Regime.FULL: ratios[0] * ratio_unit,
        Regime.PARTIAL: ratios[1] * ratio_unit,
        Regime.UNLABELED: ratios[2] * ratio_unit,
    }
    if mode is CrossSpeciesMode.TRANSFER:
        train_source = {Regime.FULL: source_species, Regime.PARTIAL: source_species, Regime.UNLABELED: source_species}
    else:
        train_source = {Regime.FULL: source_species, Regime.PARTIAL: target_species, Regime.UNLABELED: target_species}

    out: list[Sample] = []
    used: set[str] = set()
    for regime in (Regime.FULL, Regime.PARTIAL, Regime.UNLABELED):
        pool = sorted(
            (s for s in by_species[train_source[regime]] if s.regime is regime),
            key=lambda s: s.id,
        )
        n = want[regime]
        if len(pool) < n:
            raise ManifestError(
                f"species {train_source[regime]!r}: need {n} {regime.value} samples, have {len(pool)}"
            )
        order = rng.permutation(len(pool))
        chosen = [pool[i] for i in order[:n]]
        out.extend(replace(s, split=Split.TRAIN) for s in chosen)
        used.update(s.id for s in chosen)

    # Model selection on leftover source full labels; final eval on the target.
    source_rest = sorted(
        (s for s in by_species[source_species] if s.regime is Regime.FULL and s.id not in used),
        key=lambda s: s.id,
    )
    n_val = round(val_fraction * len(source_rest))
    out.extend(replace(s, split=Split.VAL) for s in source_rest[:n_val])
    out.extend(replace(s, split=Split.UNUSED) for s in source_rest[n_val:])

    target_full = [
        s for s in by_species[target_species] if s.regime is Regime.FULL and s.id not in used
    ]
    if not target_full:
        raise ManifestError(f"species {target_species!r} has no fully labeled samples to evaluate on")
    out.extend(replace(s, split=Split.TEST) for s in sorted(target_full, key=lambda s: s.id))
    out.extend(
        replace(s, split=Split.UNUSED)
        for s in samples
        if s.species in by_species
        and s.id not in {x.id for x in out}
    )
    manifest = DatasetManifest(
        samples=tuple(out),
        ratios=tuple(ratios),
        ratio_unit=ratio_unit,
        species=tuple(sorted({s.species for s in out})),
        root=Path(root),
    )
    manifest.validate(check_files=False)
    return manifest


# ---------------------------------------------------------------------------
# Image and mask file I/O. Images are RGB PNG, 8- or 16-bit per channel;
# 16-bit input is reduced to 8-bit as round(v * 255 / 65535). Masks are
# single-channel 8-bit PNG: {0,1,2,3} full, {1,2,255} partial.
# ---------------------------------------------------------------------------


def load_image(path: Path | str) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read image: {path}")
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    rgb = raw[:, :, ::-1]
    if rgb.dtype == np.uint16:
        rgb = ((rgb.astype(np.uint32) * 255 + 32767) // 65535).astype(np.uint8)
    elif rgb.dtype != np.uint8:
        raise ValueError(f"unsupported image dtype {rgb.dtype} in {path}")
    return np.ascontiguousarray(rgb)


def image_size(path: Path | str) -> tuple[int, int]:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read image: {path}")
    return img.shape[0], img.shape[1]


def save_image(path: Path | str, rgb: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected HxWx3 uint8 RGB")
    if not cv2.imwrite(str(path), rgb[:, :, ::-1]):
        raise OSError(f"failed to write {path}")


def load_mask(path: Path | str) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read mask: {path}")
    if raw.ndim != 2 or raw.dtype != np.uint8:
        raise ValueError(f"mask must be single-channel 8-bit PNG: {path}")
    return raw


def save_mask(path: Path | str, labels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if labels.dtype != np.uint8 or labels.ndim != 2:
        raise ValueError("expected HxW uint8 labels")
    if not cv2.imwrite(str(path), labels):
        raise OSError(f"failed to write {path}")
