"""Procedural generator of hierarchical venation imagery with exact ground truth.

A generated leaf is a stroke hierarchy: one primary midvein (V1) spanning base
to apex, secondaries (V2) branching off it, tertiaries (V3) branching off the
secondaries. Strokes rasterize as capsules (all pixels within half a stroke
width of a segment), drawn fine-to-coarse so the widest class wins overlaps.
The rendered image places dark strokes on a brighter lamina with additive
Gaussian noise; tertiaries get the lowest contrast on purpose, so the fine
class stays the hard one.

Everything is a pure function of the spec, bit-reproducible across runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    BACKGROUND,
    UNKNOWN,
    V1,
    V2,
    V3,
    DatasetManifest,
    PartialMask,
    Regime,
    Sample,
    SegMask,
    Split,
    load_manifest,
    save_image,
    save_mask,
)

RGBRange = tuple[tuple[int, int, int], tuple[int, int, int]]

# Default blend factor toward the vein color for the coarse orders. Tertiary
# contrast is drawn per leaf from spec.v3_contrast_range: some leaves carry
# crisp fine veins, others barely visible ones, so a small labeled set cannot
# cover the appearance spread that the unlabeled pool does. Secondary contrast
# is fixed at the V2 value below unless spec.v2_contrast_range widens it.
_CONTRAST = {V1: 1.0, V2: 0.85}
_NOISE_FULL_SCALE = 25.0  # sigma in 8-bit steps at noise_level=1


@dataclass(frozen=True)
class VeinSpec:
    """Everything generate() needs; colors are per-channel (low, high) ranges."""

    seed: int = 0
    canvas: tuple[int, int] = (512, 512)
    width_v1: int = 9
    width_v2: int = 5
    width_v3: int = 2
    n_secondary: int = 8
    n_tertiary_per_secondary: int = 36
    lamina_color: RGBRange = ((150, 180, 130), (210, 225, 190))
    vein_color: RGBRange = ((30, 55, 20), (90, 115, 80))
    noise_level: float = 0.3
    v3_contrast_range: tuple[float, float] = (0.10, 0.32)
    # Per-leaf blend range for secondaries. Widening it past a point makes
    # contrast ordering between the orders flip from leaf to leaf, so stroke
    # darkness stops identifying the order and only width and attachment
    # topology remain as cues.
    v2_contrast_range: tuple[float, float] = (0.85, 0.85)
    # Per-leaf multiplier range on tertiary segment length. A wide range makes
    # tertiary geometry a leaf-level trait: long-tertiary leaves read as
    # secondary-like and a small labeled set cannot cover the styles.
    v3_length_scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self) -> None:
        if not (self.width_v1 > self.width_v2 > self.width_v3 >= 1):
            raise ValueError(
                f"stroke widths must satisfy v1 > v2 > v3 >= 1, got "
                f"{self.width_v1}/{self.width_v2}/{self.width_v3}"
            )
        if self.canvas[0] < 64 or self.canvas[1] < 64:
            raise ValueError(f"canvas must be at least 64x64, got {self.canvas}")
        if self.n_secondary < 0 or self.n_tertiary_per_secondary < 0:
            raise ValueError("branch counts must be >= 0")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError(f"noise_level must be in [0,1], got {self.noise_level}")
        lo, hi = self.v3_contrast_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(
                f"v3_contrast_range must satisfy 0 < low <= high <= 1, got {self.v3_contrast_range}"
            )
        lo, hi = self.v2_contrast_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(
                f"v2_contrast_range must satisfy 0 < low <= high <= 1, got {self.v2_contrast_range}"
            )
        lo, hi = self.v3_length_scale_range
        if not 0.0 < lo <= hi <= 6.0:
            raise ValueError(
                f"v3_length_scale_range must satisfy 0 < low <= high <= 6, "
                f"got {self.v3_length_scale_range}"
            )
        for name, (lo, hi) in (("lamina_color", self.lamina_color), ("vein_color", self.vein_color)):
            for c in range(3):
                if not 0 <= lo[c] <= hi[c] <= 255:
                    raise ValueError(f"{name} channel {c}: need 0 <= low <= high <= 255")


def _stamp_capsule(labels: np.ndarray, p0, p1, width: float, cls: int) -> None:
    """Set cls on every pixel within width/2 of segment p0-p1 (hard edge)."""
    h, w = labels.shape
    r = width / 2.0
    x0, y0 = p0
    x1, y1 = p1
    xa = max(int(math.floor(min(x0, x1) - r)) - 1, 0)
    xb = min(int(math.ceil(max(x0, x1) + r)) + 1, w - 1)
    ya = max(int(math.floor(min(y0, y1) - r)) - 1, 0)
    yb = min(int(math.ceil(max(y0, y1) + r)) + 1, h - 1)
    if xa > xb or ya > yb:
        return
    ys, xs = np.mgrid[ya : yb + 1, xa : xb + 1]
    dx, dy = x1 - x0, y1 - y0
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        d2 = (xs - x0) ** 2 + (ys - y0) ** 2
    else:
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / seg2, 0.0, 1.0)
        d2 = (xs - (x0 + t * dx)) ** 2 + (ys - (y0 + t * dy)) ** 2
    block = labels[ya : yb + 1, xa : xb + 1]
    block[d2 <= r * r] = cls


def _polyline_point(points: list[tuple[float, float]], t: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """Point at arc-length fraction t plus the local unit direction."""
    lengths = [math.dist(points[i], points[i + 1]) for i in range(len(points) - 1)]
    total = sum(lengths)
    target = t * total
    run = 0.0
    for (a, b), seg in zip(zip(points, points[1:]), lengths):
        if run + seg >= target or (a, b) == (points[-2], points[-1]):
            u = 0.0 if seg == 0 else (target - run) / seg
            u = min(max(u, 0.0), 1.0)
            px = a[0] + u * (b[0] - a[0])
            py = a[1] + u * (b[1] - a[1])
            if seg == 0:
                return (px, py), (0.0, -1.0)
            return (px, py), ((b[0] - a[0]) / seg, (b[1] - a[1]) / seg)
        run += seg
    return points[-1], (0.0, -1.0)


def _rotate(vec: tuple[float, float], radians: float) -> tuple[float, float]:
    c, s = math.cos(radians), math.sin(radians)
    return (vec[0] * c - vec[1] * s, vec[0] * s + vec[1] * c)


def generate(spec: VeinSpec) -> tuple[np.ndarray, SegMask]:
    """Render one leaf; returns (HxWx3 uint8 image, SegMask)."""
    h, w = spec.canvas
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    labels = np.zeros((h, w), dtype=np.uint8)

    # Midvein: base (bottom) to apex (top), mild horizontal waviness.
    margin = 0.04 * h
    n_knots = 7
    ys = np.linspace(h - 1 - margin, margin, n_knots)
    xs = w / 2.0 + rng.uniform(-0.03 * w, 0.03 * w, size=n_knots)
    v1_points = [(float(x), float(y)) for x, y in zip(xs, ys)]

    # Secondaries leave the midvein at alternating sides, slanting apexward.
    v2_polylines: list[list[tuple[float, float]]] = []
    attach = np.linspace(0.12, 0.88, spec.n_secondary) if spec.n_secondary else []
    for k, t in enumerate(attach):
        origin, d1 = _polyline_point(v1_points, float(t))
        side = 1.0 if k % 2 == 0 else -1.0
        angle = side * math.radians(rng.uniform(40.0, 62.0))
        direction = _rotate(d1, angle)
        length = rng.uniform(0.26, 0.42) * w
        bend = math.radians(rng.uniform(-10.0, 10.0))
        mid = (origin[0] + 0.5 * length * direction[0], origin[1] + 0.5 * length * direction[1])
        d2 = _rotate(direction, bend)
        end = (mid[0] + 0.5 * length * d2[0], mid[1] + 0.5 * length * d2[1])
        v2_polylines.append([origin, mid, end])

    # Drawn once per leaf; the default (1, 1) range skips the draw so existing
    # datasets regenerate byte-identically.
    s_lo, s_hi = spec.v3_length_scale_range
    v3_scale = 1.0 if (s_lo, s_hi) == (1.0, 1.0) else float(rng.uniform(s_lo, s_hi))
    v3_segments: list[tuple[tuple[float, float], tuple[float, float]]] = []
    for poly in v2_polylines:
        for _ in range(spec.n_tertiary_per_secondary):
            t = float(rng.uniform(0.12, 0.95))
            origin, d2 = _polyline_point(poly, t)
            side = 1.0 if rng.random() < 0.5 else -1.0
            angle = side * math.radians(rng.uniform(40.0, 90.0))
            direction = _rotate(d2, angle)
            length = v3_scale * rng.uniform(0.07, 0.14) * w
            end = (origin[0] + length * direction[0], origin[1] + length * direction[1])
            v3_segments.append((origin, end))

    # Fine to coarse so the widest class owns every overlap.
    for a, b in v3_segments:
        _stamp_capsule(labels, a, b, spec.width_v3, V3)
    for poly in v2_polylines:
        for a, b in zip(poly, poly[1:]):
            _stamp_capsule(labels, a, b, spec.width_v2, V2)
    for a, b in zip(v1_points, v1_points[1:]):
        _stamp_capsule(labels, a, b, spec.width_v1, V1)

    lamina = np.array(
        [rng.uniform(lo, hi) for lo, hi in zip(*spec.lamina_color)], dtype=np.float64
    )
    vein = np.array(
        [rng.uniform(lo, hi) for lo, hi in zip(*spec.vein_color)], dtype=np.float64
    )
    v3_alpha = float(rng.uniform(*spec.v3_contrast_range))
    # The default range pins V2 at its fixed blend and skips the draw so
    # existing datasets regenerate byte-identically.
    c_lo, c_hi = spec.v2_contrast_range
    v2_alpha = _CONTRAST[V2] if (c_lo, c_hi) == (_CONTRAST[V2], _CONTRAST[V2]) else float(
        rng.uniform(c_lo, c_hi)
    )
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = lamina
    for cls, alpha in {V1: _CONTRAST[V1], V2: v2_alpha, V3: v3_alpha}.items():
        sel = labels == cls
        image[sel] = (1.0 - alpha) * lamina + alpha * vein
    sigma = spec.noise_level * _NOISE_FULL_SCALE
    if sigma > 0:
        image += rng.normal(0.0, sigma, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return image, SegMask(labels)


def degrade_to_partial(mask: SegMask) -> PartialMask:
    """Keep V1/V2 labels, replace background and V3 with UNKNOWN."""
    labels = mask.labels
    keep = (labels == V1) | (labels == V2)
    return PartialMask(np.where(keep, labels, np.uint8(UNKNOWN)))


def emit_dataset(
    spec_template: VeinSpec,
    counts: tuple[int, int, int],
    out_dir: Path | str,
    seed: int,
    *,
    n_val: int = 0,
    n_test: int = 0,
    species: str = "synthetic",
) -> DatasetManifest:
    """Write a dataset directory: images/, masks/, manifest.json.

    ``counts`` are the train-split sizes per regime (full, partial, unlabeled);
    val and test samples are extra fully labeled leaves. Each sample derives
    its own seed from (seed, index), so the tree is byte-reproducible.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if any(c < 0 for c in counts) or n_val < 0 or n_test < 0:
        raise ValueError("sample counts must be >= 0")
    unit = math.gcd(math.gcd(counts[0], counts[1]), counts[2])
    if unit == 0:
        unit = 1
    ratios = (counts[0] // unit, counts[1] // unit, counts[2] // unit)

    plan: list[tuple[Regime, Split]] = (
        [(Regime.FULL, Split.TRAIN)] * counts[0]
        + [(Regime.PARTIAL, Split.TRAIN)] * counts[1]
        + [(Regime.UNLABELED, Split.TRAIN)] * counts[2]
        + [(Regime.FULL, Split.VAL)] * n_val
        + [(Regime.FULL, Split.TEST)] * n_test
    )
    samples: list[Sample] = []
    for i, (regime, split) in enumerate(plan):
        child = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        image, mask = generate(replace(spec_template, seed=child))
        sid = f"{species}-{i:04d}"
        image_rel = f"images/{sid}.png"
        save_image(out_dir / image_rel, image)
        mask_rel: str | None = None
        if regime is Regime.FULL:
            mask_rel = f"masks/{sid}.png"
            save_mask(out_dir / mask_rel, mask.labels)
        elif regime is Regime.PARTIAL:
            mask_rel = f"masks/{sid}.png"
            save_mask(out_dir / mask_rel, degrade_to_partial(mask).labels)
        samples.append(
            Sample(id=sid, image_path=image_rel, mask_path=mask_rel, regime=regime, species=species, split=split)
        )
    manifest = DatasetManifest(
        samples=tuple(samples),
        ratios=ratios,
        ratio_unit=unit,
        species=(species,),
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    return load_manifest(out_dir / "manifest.json")
