"""
Co-training of the TDL, LRS and FFS networks.

Phase 1 (warmup) fits TDL alone to the frame difference I_FD. Phase 2 trains
all networks jointly on L_Total with a per-epoch cosine-annealed learning
rate. Every epoch appends one row to train_log.csv; the best (validation
DICE, or train DICE without a validation split) and the last bundles are
checkpointed.
"""

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from constants import (
    ADAM_BETAS,
    BATCH_SIZE,
    DEFAULT_THRESHOLD,
    EPOCHS,
    INITIAL_LR,
    KEY_FRAME,
    TDL_WARMUP_EPOCHS,
    TRAIN_LOG_COLUMNS,
    VAL_FRACTION,
    WARMUP_LOG_COLUMNS,
)
from core import BinaryMask, ProbabilityMap, Sample, binarize, dice_score
from dataset import DatasetManifest, DsaTrainingDataset, ManifestEntry, load_sample, split_validation
from logging_config import logger
from losses import LossWeights, composite_mask_loss, l1_loss, total_loss, weighted_total
from models import (
    BundleConfig,
    ModelBundle,
    build_bundle,
    forward_batch,
    full_forward,
    load_checkpoint,
    save_checkpoint,
    tdl_forward,
    to_probability_map,
)
from utils import PathLike, configure_determinism, deterministic_requested, dump_json, resolve_device, seed_everything

TRAIN_LOG_NAME = "train_log.csv"
WARMUP_LOG_NAME = "warmup_log.csv"
BEST_CHECKPOINT_NAME = "best.pt"
LAST_CHECKPOINT_NAME = "last.pt"
TRAIN_CONFIG_NAME = "train_config.json"


class TrainingError(RuntimeError):
    """Training aborted on bad data or a non-finite loss."""

    def __init__(self, message: str, sample_id: Optional[str] = None, step: Optional[int] = None) -> None:
        super().__init__(message)
        self.sample_id = sample_id
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """
    Attributes:
        batch_size: Items per optimizer step
        epochs: Co-training epochs (warmup epochs come on top)
        initial_lr: Learning rate at epoch 0
        lr_min: Learning rate reached at the end of the cosine schedule
        weights: Loss weights a, lambda0, lambda1
        tdl_warmup_epochs: TDL-only epochs on L_LTD before co-training
        seed: Seed of initialization, shuffling and validation split
        device: "cpu" or "accelerator"
        deterministic: Force deterministic torch kernels
        val_fraction: Share of train samples held out for validation
        base_width: Backbone width of every network
        depth: Backbone depth of every network
        augment: Train on frames k+1 and k+2 as well as k
        threshold: Binarization threshold of the DICE evaluation
        num_workers: DataLoader worker processes
    """

    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    initial_lr: float = INITIAL_LR
    lr_min: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    tdl_warmup_epochs: int = TDL_WARMUP_EPOCHS
    seed: int = 0
    device: str = "cpu"
    deterministic: bool = False
    val_fraction: float = VAL_FRACTION
    base_width: int = 16
    depth: int = 4
    augment: bool = True
    threshold: float = DEFAULT_THRESHOLD
    num_workers: int = 0

    def __post_init__(self) -> None:
        problems = []
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if not self.initial_lr > 0:
            problems.append("initial_lr must be > 0")
        if not 0 <= self.lr_min <= self.initial_lr:
            problems.append("lr_min must lie in [0, initial_lr]")
        if not 0 <= self.tdl_warmup_epochs < self.epochs:
            problems.append("tdl_warmup_epochs must lie in [0, epochs)")
        if not 0.0 <= self.val_fraction < 1.0:
            problems.append("val_fraction must lie in [0, 1)")
        if self.device not in ("cpu", "accelerator"):
            problems.append("device must be 'cpu' or 'accelerator'")
        if not 0.0 < self.threshold < 1.0:
            problems.append("threshold must lie in (0, 1)")
        if problems:
            logger.error(f"Invalid training config: {problems}")
            raise ValueError("; ".join(problems))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainResult:
    bundle: ModelBundle
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    warmup_log_path: Optional[Path]
    best_epoch: int
    best_score: float
    steps: int
    log: pd.DataFrame


@dataclass(frozen=True)
class SampleScore:
    sample_id: str
    dice: float
    liver_dice: Optional[float] = None
    outside_liver_fraction: float = 0.0


@dataclass
class EvaluationReport:
    """Per-sample scores plus the binarized predictions they came from."""

    scores: Tuple[SampleScore, ...]
    masks: Dict[str, BinaryMask] = field(default_factory=dict, repr=False)
    liver_masks: Dict[str, BinaryMask] = field(default_factory=dict, repr=False)

    @property
    def dices(self) -> List[float]:
        return [s.dice for s in self.scores]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dices))

    @property
    def std_dice(self) -> float:
        return float(np.std(self.dices))

    def to_dict(self) -> Dict:
        return {
            "mean_dice": self.mean_dice,
            "std_dice": self.std_dice,
            "per_sample": [asdict(s) for s in self.scores],
        }


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """
    lr_min + (initial_lr - lr_min) * (1 + cos(pi * step / total_steps)) / 2

    Raises:
        ValueError: If step is outside [0, total_steps]
    """
    if total_steps < 1 or not 0 <= step <= total_steps:
        logger.error(f"Cosine schedule step {step} outside [0, {total_steps}]")
        raise ValueError(f"step must lie in [0, {total_steps}], got {step}")
    return cfg.lr_min + 0.5 * (cfg.initial_lr - cfg.lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def cosine_scheduler(optimizer: torch.optim.Optimizer, cfg: TrainConfig) -> LambdaLR:
    """Per-epoch scheduler whose rate at epoch t is cosine_lr(t, cfg.epochs, cfg)."""
    return LambdaLR(optimizer, lambda epoch: cosine_lr(epoch, cfg.epochs, cfg) / cfg.initial_lr)


def without_batch_norm(config: BundleConfig) -> BundleConfig:
    def strip(backbone):
        return None if backbone is None else replace(backbone, batch_norm=False)

    return replace(config, ffs=strip(config.ffs), tdl=strip(config.tdl), lrs=strip(config.lrs))


def _to_device(batch: Mapping, device: torch.device) -> Dict:
    return {k: v.to(device) if isinstance(v, torch.Tensor) else v for k, v in batch.items()}


def _check_finite(loss: torch.Tensor, step: int, batch: Mapping) -> None:
    if not torch.isfinite(loss):
        logger.error(f"Non-finite loss at step {step} (samples {batch.get('sample_id')})")
        raise TrainingError(f"non-finite loss at step {step}", step=step)


def batch_losses(
    bundle: ModelBundle, batch: Mapping[str, torch.Tensor], weights: LossWeights
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Forward one batch and compute (l_ltd, l_lrs, l_seg, total, seg).

    Absent networks contribute a zero loss.
    """
    outputs = forward_batch(bundle, batch)
    zero = outputs.seg.new_zeros(())
    l_ltd = l1_loss(outputs.ltd, batch["fd_target"]) if outputs.ltd is not None else zero
    l_lrs = composite_mask_loss(outputs.lrs, batch["liver_mask"], weights.a) if outputs.lrs is not None else zero
    l_seg = composite_mask_loss(outputs.seg, batch["tumor_mask"], weights.a)
    return l_ltd, l_lrs, l_seg, weighted_total(l_ltd, l_lrs, l_seg, weights), outputs.seg


def _load_entries(manifest: DatasetManifest, entries: Sequence[ManifestEntry]) -> Dict[str, Sample]:
    samples = {}
    for entry in entries:
        try:
            samples[entry.id] = load_sample(manifest, entry.id)
        except (ValueError, OSError) as e:
            logger.error(f"Training sample {entry.id} failed validation: {e}")
            raise TrainingError(f"sample {entry.id}: {e}", sample_id=entry.id) from e
    return samples


def predict(bundle: ModelBundle, sample: Sample) -> Tuple[ProbabilityMap, Optional[ProbabilityMap]]:
    """Tumor (and liver, if LRS exists) probability maps of a sample's key frame."""
    was_training = bundle.training
    bundle.eval()
    with torch.no_grad():
        outputs = full_forward(bundle, sample)
    bundle.train(was_training)
    liver = to_probability_map(outputs.lrs) if outputs.lrs is not None else None
    return to_probability_map(outputs.seg), liver


def evaluate_predictions(
    predictions: Mapping[str, ProbabilityMap],
    samples: Sequence[Sample],
    threshold: float = DEFAULT_THRESHOLD,
    liver_predictions: Optional[Mapping[str, ProbabilityMap]] = None,
) -> EvaluationReport:
    """
    Score probability maps against ground truth, one DICE per sample.

    Args:
        predictions: Sample id -> tumor probability map
        samples: Samples to score, in report order
        threshold: Inclusive binarization threshold
        liver_predictions: Optional sample id -> liver probability map

    Raises:
        ValueError: If samples is empty
        KeyError: If a sample has no prediction
    """
    if not samples:
        logger.error("Nothing to evaluate")
        raise ValueError("cannot evaluate an empty split")
    scores = []
    masks: Dict[str, BinaryMask] = {}
    liver_masks: Dict[str, BinaryMask] = {}
    for sample in samples:
        mask = binarize(predictions[sample.sample_id], threshold)
        masks[sample.sample_id] = mask
        predicted = int(mask.sum())
        outside = int((mask.astype(bool) & ~sample.liver_mask.astype(bool)).sum())
        liver_dice = None
        if liver_predictions is not None and sample.sample_id in liver_predictions:
            liver_mask = binarize(liver_predictions[sample.sample_id], threshold)
            liver_masks[sample.sample_id] = liver_mask
            liver_dice = dice_score(liver_mask, sample.liver_mask)
        scores.append(
            SampleScore(
                sample_id=sample.sample_id,
                dice=dice_score(mask, sample.tumor_mask),
                liver_dice=liver_dice,
                outside_liver_fraction=outside / predicted if predicted else 0.0,
            )
        )
    return EvaluationReport(scores=tuple(scores), masks=masks, liver_masks=liver_masks)


def evaluate_bundle(
    bundle: ModelBundle,
    manifest: DatasetManifest,
    entries: Sequence[ManifestEntry],
    threshold: float = DEFAULT_THRESHOLD,
) -> EvaluationReport:
    """Run full_forward on each entry's key frame and score it."""
    return evaluate_samples(bundle, [load_sample(manifest, e.id) for e in entries], threshold)


def evaluate_samples(
    bundle: ModelBundle,
    samples: Sequence[Sample],
    threshold: float = DEFAULT_THRESHOLD,
) -> EvaluationReport:
    predictions: Dict[str, ProbabilityMap] = {}
    liver_predictions: Dict[str, ProbabilityMap] = {}
    for sample in samples:
        tumor, liver = predict(bundle, sample)
        predictions[sample.sample_id] = tumor
        if liver is not None:
            liver_predictions[sample.sample_id] = liver
    return evaluate_predictions(predictions, samples, threshold, liver_predictions or None)


def evaluate(
    manifest: DatasetManifest,
    checkpoint: PathLike,
    split: str = "test",
    threshold: float = DEFAULT_THRESHOLD,
    expected: Optional[BundleConfig] = None,
    device: str = "cpu",
) -> EvaluationReport:
    """
    Score a checkpoint on one split of a dataset.

    Raises:
        ValueError: If the split is empty or the checkpoint does not match `expected`
    """
    entries = manifest.entries(split)
    if not entries:
        logger.error(f"Split {split!r} of {manifest.root} is empty")
        raise ValueError(f"split {split!r} is empty")
    bundle, step = load_checkpoint(checkpoint, expected)
    bundle.to(resolve_device(device))
    report = evaluate_bundle(bundle, manifest, entries, threshold)
    logger.info(f"Checkpoint {checkpoint} (step {step}) on {split}: mean DICE {report.mean_dice:.4f}")
    return report


def _append_row(path: Path, row: Dict, columns: Sequence[str]) -> None:
    pd.DataFrame([row], columns=list(columns)).to_csv(path, mode="a", header=not path.exists(), index=False)


def _warmup_tdl(
    bundle: ModelBundle,
    loader: DataLoader,
    cfg: TrainConfig,
    device: torch.device,
    log_path: Path,
) -> int:
    optimizer = torch.optim.Adam(bundle.tdl.parameters(), lr=cfg.initial_lr, betas=ADAM_BETAS)
    step = 0
    for epoch in tqdm(range(cfg.tdl_warmup_epochs), desc="TDL warmup"):
        bundle.train()
        total, count = 0.0, 0
        for batch in loader:
            batch = _to_device(batch, device)
            loss = l1_loss(tdl_forward(bundle, batch["stack"]), batch["fd_target"])
            _check_finite(loss, step, batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            size = batch[KEY_FRAME].shape[0]
            total += float(loss.detach()) * size
            count += size
        _append_row(log_path, {"epoch": epoch, "lr": cfg.initial_lr, "l_ltd": total / count}, WARMUP_LOG_COLUMNS)
        logger.debug(f"Warmup epoch {epoch}: l_ltd {total / count:.6f}")
    return step


def train(
    manifest: DatasetManifest,
    bundle_config: BundleConfig,
    cfg: TrainConfig,
    out_dir: PathLike,
) -> TrainResult:
    """
    Warm up TDL, then co-train the bundle.

    Args:
        manifest: Dataset with a non-empty train split
        bundle_config: Networks and fusion layout to train
        cfg: Optimization protocol
        out_dir: Receives train_log.csv, warmup_log.csv, train_config.json, best.pt, last.pt

    Returns:
        TrainResult with the final in-memory bundle

    Raises:
        TrainingError: On an invalid training sample or a non-finite loss
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configure_determinism(cfg.deterministic or deterministic_requested())
    seed_everything(cfg.seed)
    device = resolve_device(cfg.device)

    if cfg.batch_size == 1:
        bundle_config = without_batch_norm(bundle_config)
    dump_json({"train": cfg.to_dict(), "bundle": bundle_config.to_dict()}, out_dir / TRAIN_CONFIG_NAME)

    train_entries = manifest.entries("train")
    if not train_entries:
        raise TrainingError("the train split is empty")
    loaded = _load_entries(manifest, train_entries)
    fit_entries, val_entries = split_validation(train_entries, cfg.val_fraction)
    fit_samples = [loaded[e.id] for e in fit_entries]
    val_samples = [loaded[e.id] for e in val_entries]
    if not fit_entries:
        raise TrainingError(f"validation holdout left no training samples (val_fraction={cfg.val_fraction})")
    if not val_entries:
        logger.warning("Validation split is empty, selecting checkpoints by train DICE")
    logger.info(f"Training on {len(fit_entries)} samples, validating on {len(val_entries)}")

    try:
        dataset = DsaTrainingDataset(
            manifest, fit_entries, bundle_config.ffs_inputs, bundle_config.fd_offset, cfg.augment
        )
    except ValueError as e:
        raise TrainingError(str(e)) from e
    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        num_workers=cfg.num_workers,
        generator=torch.Generator().manual_seed(cfg.seed),
    )

    bundle = build_bundle(bundle_config, seed=cfg.seed).to(device)
    log_path = out_dir / TRAIN_LOG_NAME
    warmup_log_path = out_dir / WARMUP_LOG_NAME
    for stale in (log_path, warmup_log_path):
        stale.unlink(missing_ok=True)

    step = 0
    warmup = cfg.tdl_warmup_epochs if bundle.tdl is not None else 0
    if warmup:
        step = _warmup_tdl(bundle, loader, replace(cfg, tdl_warmup_epochs=warmup), device, warmup_log_path)

    optimizer = torch.optim.Adam(bundle.parameters(), lr=cfg.initial_lr, betas=ADAM_BETAS)
    scheduler = cosine_scheduler(optimizer, cfg)
    best_score, best_epoch = -1.0, -1
    rows = []
    for epoch in tqdm(range(cfg.epochs), desc="Co-training"):
        lr = optimizer.param_groups[0]["lr"]
        bundle.train()
        sums = np.zeros(3)
        count = 0
        for batch in loader:
            batch = _to_device(batch, device)
            l_ltd, l_lrs, l_seg, total, _ = batch_losses(bundle, batch, cfg.weights)
            _check_finite(total, step, batch)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            step += 1
            size = batch[KEY_FRAME].shape[0]
            sums += size * np.array([float(l_ltd.detach()), float(l_lrs.detach()), float(l_seg.detach())])
            count += size

        scheduler.step()
        report = total_loss(*(sums / count), cfg.weights)
        train_dice = evaluate_samples(bundle, fit_samples, cfg.threshold).mean_dice
        val_dice = evaluate_samples(bundle, val_samples, cfg.threshold).mean_dice if val_samples else float("nan")
        row = {"epoch": epoch, "lr": lr, **asdict(report), "train_dice": train_dice, "val_dice": val_dice}
        rows.append(row)
        _append_row(log_path, row, TRAIN_LOG_COLUMNS)
        logger.info(
            f"Epoch {epoch}: lr {lr:.2e} total {report.total:.4f} train DICE {train_dice:.4f} val DICE {val_dice:.4f}"
        )

        score = val_dice if val_entries else train_dice
        if score > best_score:
            best_score, best_epoch = score, epoch
            save_checkpoint(bundle, out_dir / BEST_CHECKPOINT_NAME, step)

    save_checkpoint(bundle, out_dir / LAST_CHECKPOINT_NAME, step)
    logger.info(f"Best epoch {best_epoch} (DICE {best_score:.4f}); checkpoints in {out_dir}")
    return TrainResult(
        bundle=bundle,
        best_checkpoint=out_dir / BEST_CHECKPOINT_NAME,
        last_checkpoint=out_dir / LAST_CHECKPOINT_NAME,
        log_path=log_path,
        warmup_log_path=warmup_log_path if warmup else None,
        best_epoch=best_epoch,
        best_score=best_score,
        steps=step,
        log=pd.DataFrame(rows, columns=list(TRAIN_LOG_COLUMNS)),
    )
