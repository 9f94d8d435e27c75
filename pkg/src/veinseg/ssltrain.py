"""Semi-supervised training host: three data streams (fully labeled, partially
labeled, unlabeled), FixMatch-style consistency on the unlabeled stream, the
partial-supervision losses on the partial stream, SGD with a poly LR schedule,
and the epoch loop with stitched validation.

Per-step objective: L = L_S + L_U + lambda * L_P, where disabled components
contribute exactly 0 and, crucially, a disabled partial stream is never even
sampled or forwarded. Every RNG purpose gets its own stream derived from
(seed, purpose index), so turning one stream off cannot shift the draws of
another; that is what makes the ablation comparisons bitwise-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import evalmetrics
from .augment import AugmentConfig, apply_pair, transform_mask
from .core import DatasetManifest, Regime, Split, load_image, load_manifest, load_mask
from .model import Normalization, TeacherState, ema_update, save_checkpoint
from .psssloss import (
    PseudoLabel,
    PsssConfig,
    loss_exclusion,
    loss_partial_supervised,
    loss_pseudo,
    partition_pixels,
)
from .tiling import PatchManifest

# Per-purpose RNG stream indices, combined with the seed as (seed, index).
_STREAM_SAMPLE_FULL = 0
_STREAM_SAMPLE_PARTIAL = 1
_STREAM_SAMPLE_UNLABELED = 2
_STREAM_AUG_FULL = 3
_STREAM_AUG_PARTIAL = 4
_STREAM_AUG_UNLABELED = 5


class PseudoSource(str, Enum):
    STUDENT_WEAK = "student-weak"
    EMA_TEACHER = "ema-teacher"


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}; diagnostics: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class LossToggles:
    """Enable flags for the three partial-supervision components."""

    partial_supervised: bool = True
    partial_pseudo: bool = True
    partial_exclusion: bool = True

    @property
    def any_enabled(self) -> bool:
        return self.partial_supervised or self.partial_pseudo or self.partial_exclusion


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 80
    batch_size: int = 4
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    momentum: float = 0.9
    tau_u: float = 0.95
    psss: PsssConfig = field(default_factory=PsssConfig)
    toggles: LossToggles = field(default_factory=LossToggles)
    pseudo_source: PseudoSource = PseudoSource.STUDENT_WEAK
    ema_decay: float = 0.999
    enable_unsupervised: bool = True
    steps_per_epoch: int | None = None
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("base_lr", "weight_decay", "poly_power", "momentum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 < self.tau_u < 1.0:
            raise ValueError(f"tau_u must lie strictly inside (0, 1), got {self.tau_u}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1 when set")


def config_to_dict(cfg: TrainingConfig) -> dict:
    doc = asdict(cfg)
    doc["pseudo_source"] = cfg.pseudo_source.value
    return doc


@dataclass(frozen=True)
class StepBatch:
    """One optimizer step's worth of data, one sub-batch per active regime.

    full: (weak images, masks); partial: (weak, strong, partial labels);
    unlabeled: (weak, strong). Images are normalized (N, 3, H, W) tensors,
    label maps are (N, H, W) long tensors.
    """

    full: tuple[torch.Tensor, torch.Tensor] | None = None
    partial: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None
    unlabeled: tuple[torch.Tensor, torch.Tensor] | None = None


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float) -> float:
    """base_lr * (1 - iter/max_iter)^power; monotone non-increasing in iter."""
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


def loss_supervised(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise cross-entropy over every pixel of the full sub-batch."""
    return F.cross_entropy(logits, masks.long(), reduction="mean")


def loss_unsupervised(
    logits_strong: torch.Tensor, pseudo: PseudoLabel, tau_u: float
) -> torch.Tensor:
    """Mean cross-entropy against pseudo-labels over pixels with conf > tau_u
    (strict, all four classes eligible); exactly 0 when nothing passes."""
    sel = pseudo.conf > tau_u
    logp = F.log_softmax(logits_strong, dim=1)
    ce = -logp.gather(1, pseudo.cls.unsqueeze(1)).squeeze(1)
    n = sel.sum()
    if int(n) == 0:
        return logits_strong.sum() * 0.0
    return (ce * sel.to(ce.dtype)).sum() / n


def _psss_active(batch: StepBatch, cfg: TrainingConfig) -> bool:
    return batch.partial is not None and cfg.psss.lambda_p > 0 and cfg.toggles.any_enabled


def train_step(
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    batch: StepBatch,
    cfg: TrainingConfig,
    lr: float,
    teacher: TeacherState | None = None,
) -> dict:
    """One SGD update against L_S + L_U + lambda * L_P. Mutates model in place
    and returns the metrics record. Non-finite losses abort with diagnostics.

    An inactive component is skipped outright (no forward pass), so disabling
    it reproduces the smaller model's updates bitwise under identical RNG.
    """
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    zero = torch.zeros((), dtype=torch.float32)
    pseudo_net = teacher.module if (
        teacher is not None and cfg.pseudo_source is PseudoSource.EMA_TEACHER
    ) else model

    l_s = zero
    if batch.full is not None:
        images, masks = batch.full
        l_s = loss_supervised(model(images), masks)

    l_u = zero
    if batch.unlabeled is not None and cfg.enable_unsupervised:
        weak, strong = batch.unlabeled
        with torch.no_grad():
            pseudo_u = PseudoLabel.from_logits(pseudo_net(weak))
        l_u = loss_unsupervised(model(strong), pseudo_u, cfg.tau_u)

    l_ps = l_pu = l_pc = zero
    counts = (0, 0, 0)
    if _psss_active(batch, cfg):
        weak, strong, partial = batch.partial
        with torch.no_grad():
            pseudo_p = PseudoLabel.from_logits(pseudo_net(weak))
        part = partition_pixels(partial, pseudo_p, cfg.psss)
        counts = part.counts
        logits_strong = model(strong)
        if cfg.toggles.partial_supervised:
            l_ps = loss_partial_supervised(logits_strong, partial, part)
        if cfg.toggles.partial_pseudo:
            l_pu = loss_pseudo(logits_strong, pseudo_p, part)
        if cfg.toggles.partial_exclusion:
            l_pc = loss_exclusion(logits_strong, part)
    l_p = l_ps + l_pu + l_pc

    total = l_s + l_u + cfg.psss.lambda_p * l_p
    record = {
        "loss": float(total.detach()),
        "loss_s": float(l_s.detach()),
        "loss_u": float(l_u.detach()),
        "loss_p": float(l_p.detach()),
        "loss_ps": float(l_ps.detach()),
        "loss_pu": float(l_pu.detach()),
        "loss_pc": float(l_pc.detach()),
        "lambda_p": cfg.psss.lambda_p,
        "s1": counts[0],
        "s2": counts[1],
        "s3": counts[2],
        "lr": lr,
    }
    if not math.isfinite(record["loss"]):
        raise TrainingDivergedError("non-finite training loss", record)
    total.backward()
    optimizer.step()
    if teacher is not None:
        ema_update(teacher, model)
    return record


class _Sampler:
    """Infinite shuffled index stream; reshuffles when a pass is exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.queue: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self.queue:
                self.queue = list(self.rng.permutation(self.n))
            out.append(self.queue.pop(0))
        return out


class _Stream:
    """Preloaded patches for one regime plus its sampler and augmentation RNG."""

    def __init__(self, patches: PatchManifest, regime: Regime, seed: int, sample_key: int, aug_key: int):
        self.records = patches.by(regime=regime)
        self.images = [load_image(patches.resolve(r.image_path)) for r in self.records]
        self.masks = [
            None if r.mask_path is None else load_mask(patches.resolve(r.mask_path))
            for r in self.records
        ]
        self.sampler = _Sampler(
            len(self.records), np.random.default_rng(np.random.SeedSequence([seed, sample_key]))
        )
        self.aug_rng = np.random.default_rng(np.random.SeedSequence([seed, aug_key]))

    def __len__(self) -> int:
        return len(self.records)

    def draw(
        self, batch_size: int, aug: AugmentConfig, norm: Normalization
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        weak_l, strong_l, mask_l = [], [], []
        for i in self.sampler.take(batch_size):
            img01 = self.images[i].astype(np.float32) / 255.0
            weak, strong, geo = apply_pair(img01, self.aug_rng, aug)
            weak_l.append(weak)
            strong_l.append(strong)
            if self.masks[i] is not None:
                mask_l.append(transform_mask(self.masks[i], geo))
        weak_t = norm.apply(torch.from_numpy(np.stack(weak_l)).permute(0, 3, 1, 2))
        strong_t = norm.apply(torch.from_numpy(np.stack(strong_l)).permute(0, 3, 1, 2))
        mask_t = torch.from_numpy(np.stack(mask_l)).long() if mask_l else None
        return weak_t, strong_t, mask_t


def _normalization_from(streams: list[_Stream]) -> Normalization:
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    n = 0
    for stream in streams:
        for img in stream.images:
            x = img.astype(np.float64) / 255.0
            total += x.sum(axis=(0, 1))
            total_sq += (x**2).sum(axis=(0, 1))
            n += x.shape[0] * x.shape[1]
    if n == 0:
        raise ValueError("no training patches to normalize over")
    mean = total / n
    var = np.maximum(total_sq / n - mean**2, 1e-8)
    return Normalization(tuple(float(v) for v in mean), tuple(float(v) for v in np.sqrt(var)))


def fit(
    model: torch.nn.Module,
    patches: PatchManifest,
    cfg: TrainingConfig,
    run_dir: Path | str,
    dataset: DatasetManifest | None = None,
) -> tuple[Path, list[dict]]:
    """Run the full schedule; returns (best checkpoint path, metrics history).

    Validation is stitched whole-blade mIoU on the source manifest's val split
    after every epoch; the best-mIoU checkpoint wins. Deterministic given the
    seed: sampling and augmentation run on per-purpose numpy streams and the
    model touches no other randomness.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)

    if dataset is None:
        dataset = load_manifest(patches.resolve_source())
    val_samples = dataset.by(split=Split.VAL)
    if not val_samples:
        raise ValueError("manifest has no val split; fit needs one for model selection")
    if any(s.regime is not Regime.FULL for s in val_samples):
        raise ValueError("val split must be fully labeled")

    full = _Stream(patches, Regime.FULL, cfg.seed, _STREAM_SAMPLE_FULL, _STREAM_AUG_FULL)
    if len(full) == 0:
        raise ValueError("training requires fully labeled patches")
    partial = _Stream(patches, Regime.PARTIAL, cfg.seed, _STREAM_SAMPLE_PARTIAL, _STREAM_AUG_PARTIAL)
    unlabeled = _Stream(patches, Regime.UNLABELED, cfg.seed, _STREAM_SAMPLE_UNLABELED, _STREAM_AUG_UNLABELED)

    use_partial = len(partial) > 0 and cfg.psss.lambda_p > 0 and cfg.toggles.any_enabled
    use_unlabeled = len(unlabeled) > 0 and cfg.enable_unsupervised

    active_sizes = [len(full)]
    if use_partial:
        active_sizes.append(len(partial))
    if use_unlabeled:
        active_sizes.append(len(unlabeled))
    steps_per_epoch = cfg.steps_per_epoch or math.ceil(max(active_sizes) / cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch

    norm = _normalization_from([s for s in (full, partial, unlabeled) if len(s)])
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    teacher = (
        TeacherState.from_student(model, cfg.ema_decay)
        if cfg.pseudo_source is PseudoSource.EMA_TEACHER
        else None
    )

    config_snapshot = config_to_dict(cfg)
    history: list[dict] = []
    best_miou = -1.0
    best_path = run_dir / "best.pt"
    metrics_path = run_dir / "metrics.jsonl"
    model.train()
    with metrics_path.open("w") as metrics_file:
        for epoch in range(cfg.epochs):
            for step in range(steps_per_epoch):
                iteration = epoch * steps_per_epoch + step
                lr = poly_lr(cfg.base_lr, iteration, max_iter, cfg.poly_power)
                fw, _, fm = full.draw(cfg.batch_size, cfg.augment, norm)
                batch = StepBatch(
                    full=(fw, fm),
                    partial=partial.draw(cfg.batch_size, cfg.augment, norm) if use_partial else None,
                    unlabeled=unlabeled.draw(cfg.batch_size, cfg.augment, norm)[:2] if use_unlabeled else None,
                )
                try:
                    record = train_step(model, optimizer, batch, cfg, lr, teacher)
                except TrainingDivergedError as e:
                    raise TrainingDivergedError(
                        f"diverged at epoch {epoch} step {step}", e.diagnostics
                    ) from e
                record.update(kind="step", epoch=epoch, iteration=iteration)
                history.append(record)
                metrics_file.write(json.dumps(record, sort_keys=True) + "\n")

            model.eval()
            report = evalmetrics.evaluate_stitched(
                model, val_samples, dataset.root, normalization=norm, patch=patches.patch
            )
            model.train()
            is_best = report.miou > best_miou
            if is_best:
                best_miou = report.miou
                save_checkpoint(best_path, model, optimizer, epoch, norm, config_snapshot)
            epoch_record = {
                "kind": "epoch",
                "epoch": epoch,
                "val_miou": report.miou,
                "val_miou_veins": report.miou_veins,
                "val_per_class": [None if v is None else v for v in report.per_class],
                "best": is_best,
            }
            history.append(epoch_record)
            metrics_file.write(json.dumps(epoch_record, sort_keys=True) + "\n")
            metrics_file.flush()
    save_checkpoint(run_dir / "last.pt", model, optimizer, cfg.epochs - 1, norm, config_snapshot)
    return best_path, history
