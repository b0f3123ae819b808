"""
Ablation harness: one model per fusion layout, all scored on the same test split.

Canonical variants:
    baseline               key frame only
    kf+of / kf+fd / kf+bs  key frame + one classical motion map
    kf+tdl-unsupervised    key frame + TDL output, lambda0 = 0 and no warmup
    kf+tdl-supervised      key frame + TDL output
    ffs+lrs                key frame + liver map
    dsa-ltdnet             key frame + TDL output + liver map

Reports: results.json, results.csv, dice_bar.png and per-variant contour
overlays of the 4 best and 4 worst test samples.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from tqdm import tqdm  # noqa: E402

from constants import (  # noqa: E402
    BACKGROUND_SUBTRACTION,
    FRAME_DIFF_OFFSET,
    FRAME_DIFF_OFFSET_SWEEP,
    FRAME_DIFFERENCE,
    KEY_FRAME,
    LIVER_MAP,
    OPTICAL_FLOW,
    REFERENCE_DICE,
    RESULTS_SCHEMA_VERSION,
    TDL_OUTPUT,
)
from dataset import DatasetManifest, dataset_hash, load_sample, read_manifest  # noqa: E402
from logging_config import logger  # noqa: E402
from models import BundleConfig, bundle_config_for, check_fusion_inputs  # noqa: E402
from train_model import EvaluationReport, TrainConfig, evaluate, train  # noqa: E402
from utils import PathLike, dump_json, stable_hash  # noqa: E402

OVERLAYS_PER_SIDE = 4
RESULTS_JSON = "results.json"
RESULTS_CSV = "results.csv"
BAR_CHART = "dice_bar.png"

GROUND_TRUTH_COLOR = "yellow"
PREDICTION_COLOR = "cyan"
LIVER_COLOR = "lime"


@dataclass(frozen=True)
class AblationVariant:
    """
    Attributes:
        name: Report name of the variant
        ffs_inputs: Ordered fusion inputs, key frame first
        tdl_supervised: Whether L_LTD (and warmup) train the TDL
        fd_offset: Offset of a raw frame-difference input
    """

    name: str
    ffs_inputs: Tuple[str, ...]
    tdl_supervised: bool = True
    fd_offset: int = FRAME_DIFF_OFFSET

    def __post_init__(self) -> None:
        object.__setattr__(self, "ffs_inputs", tuple(self.ffs_inputs))
        check_fusion_inputs(self.ffs_inputs)

    @property
    def includes_lrs(self) -> bool:
        return LIVER_MAP in self.ffs_inputs

    @property
    def includes_tdl(self) -> bool:
        return TDL_OUTPUT in self.ffs_inputs

    def configs(self, cfg: TrainConfig) -> Tuple[BundleConfig, TrainConfig]:
        """Bundle and training configs of this variant under a shared protocol."""
        bundle_config = bundle_config_for(
            self.ffs_inputs, base_width=cfg.base_width, depth=cfg.depth, fd_offset=self.fd_offset
        )
        if not self.includes_tdl:
            cfg = replace(cfg, tdl_warmup_epochs=0)
        elif not self.tdl_supervised:
            cfg = replace(cfg, tdl_warmup_epochs=0, weights=replace(cfg.weights, lambda0=0.0))
        return bundle_config, cfg


def canonical_variants() -> List[AblationVariant]:
    return [
        AblationVariant("baseline", (KEY_FRAME,)),
        AblationVariant("kf+of", (KEY_FRAME, OPTICAL_FLOW)),
        AblationVariant("kf+fd", (KEY_FRAME, FRAME_DIFFERENCE)),
        AblationVariant("kf+bs", (KEY_FRAME, BACKGROUND_SUBTRACTION)),
        AblationVariant("kf+tdl-unsupervised", (KEY_FRAME, TDL_OUTPUT), tdl_supervised=False),
        AblationVariant("kf+tdl-supervised", (KEY_FRAME, TDL_OUTPUT)),
        AblationVariant("ffs+lrs", (KEY_FRAME, LIVER_MAP)),
        AblationVariant("dsa-ltdnet", (KEY_FRAME, TDL_OUTPUT, LIVER_MAP)),
    ]


def offset_sweep_variants(offsets: Sequence[int] = FRAME_DIFF_OFFSET_SWEEP) -> List[AblationVariant]:
    """KF+FD variants at each frame-difference offset."""
    return [
        AblationVariant(f"kf+fd-offset{offset}", (KEY_FRAME, FRAME_DIFFERENCE), fd_offset=offset)
        for offset in offsets
    ]


def variants_by_name(names: Sequence[str], offset_sweep: bool = False) -> List[AblationVariant]:
    """
    Raises:
        KeyError: If a name is not a known variant
    """
    known = {v.name: v for v in canonical_variants() + offset_sweep_variants()}
    unknown = [n for n in names if n not in known]
    if unknown:
        logger.error(f"Unknown ablation variants {unknown}")
        raise KeyError(f"unknown variants {unknown}; known: {sorted(known)}")
    selected = [known[n] for n in names]
    if offset_sweep:
        selected += [v for v in offset_sweep_variants() if v.name not in names]
    return selected


@dataclass
class VariantResult:
    variant: AblationVariant
    status: str
    config_hash: str
    train_log_path: Optional[str] = None
    evaluation: Optional[EvaluationReport] = field(default=None, repr=False)
    error: Optional[str] = None

    def to_dict(self) -> Dict:
        reference = REFERENCE_DICE.get(self.variant.name)
        ok = self.evaluation is not None
        return {
            "name": self.variant.name,
            "status": self.status,
            "error": self.error,
            "ffs_inputs": list(self.variant.ffs_inputs),
            "fd_offset": self.variant.fd_offset,
            "tdl_supervised": self.variant.tdl_supervised,
            "mean_dice": self.evaluation.mean_dice if ok else None,
            "std_dice": self.evaluation.std_dice if ok else None,
            "per_sample": self.evaluation.to_dict()["per_sample"] if ok else [],
            "train_log_path": self.train_log_path,
            "config_hash": self.config_hash,
            "reference": None if reference is None else {"dice": reference[0], "delta": reference[1]},
        }


@dataclass
class AblationReport:
    dataset_hash: str
    seed: int
    results: List[VariantResult]
    dataset_root: Optional[Path] = None

    def to_dict(self) -> Dict:
        return {
            "schema_version": RESULTS_SCHEMA_VERSION,
            "dataset_hash": self.dataset_hash,
            "seed": self.seed,
            "variants": [r.to_dict() for r in self.results],
        }


def run_ablation(
    manifest: DatasetManifest,
    variants: Sequence[AblationVariant],
    cfg: TrainConfig,
    out_dir: PathLike,
) -> AblationReport:
    """
    Train and evaluate every variant with the same seed and test split.

    A failing variant is recorded with status "failed" and the rest continue.

    Raises:
        ValueError: If no variant is given or names repeat
    """
    if not variants:
        raise ValueError("at least one variant is required")
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate variant names in {names}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = []
    for variant in tqdm(variants, desc="Ablation"):
        bundle_config, variant_cfg = variant.configs(cfg)
        config_hash = stable_hash({"bundle": bundle_config.to_dict(), "train": variant_cfg.to_dict()})
        variant_dir = out_dir / variant.name
        logger.info(f"Variant {variant.name}: inputs {list(variant.ffs_inputs)}")
        try:
            trained = train(manifest, bundle_config, variant_cfg, variant_dir)
            evaluation = evaluate(
                manifest, trained.best_checkpoint, "test", variant_cfg.threshold, device=variant_cfg.device
            )
            results.append(
                VariantResult(
                    variant=variant,
                    status="ok",
                    config_hash=config_hash,
                    train_log_path=trained.log_path.relative_to(out_dir).as_posix(),
                    evaluation=evaluation,
                )
            )
            logger.info(f"Variant {variant.name}: mean test DICE {evaluation.mean_dice:.4f}")
        except Exception as e:
            logger.error(f"Variant {variant.name} failed: {e}")
            results.append(
                VariantResult(variant=variant, status="failed", config_hash=config_hash, error=str(e))
            )
    return AblationReport(
        dataset_hash=dataset_hash(manifest), seed=cfg.seed, results=results, dataset_root=manifest.root
    )


def results_table(report: AblationReport) -> pd.DataFrame:
    """One row per variant: inputs, DICE statistics and reference numbers."""
    baseline = next(
        (r.evaluation.mean_dice for r in report.results if r.variant.name == "baseline" and r.evaluation),
        None,
    )
    rows = []
    for r in report.results:
        reference = REFERENCE_DICE.get(r.variant.name, (None, None))
        mean = r.evaluation.mean_dice if r.evaluation else None
        rows.append(
            {
                "variant": r.variant.name,
                "inputs": "+".join(r.variant.ffs_inputs),
                "n_test": len(r.evaluation.scores) if r.evaluation else 0,
                "mean_dice": mean,
                "std_dice": r.evaluation.std_dice if r.evaluation else None,
                "delta_vs_baseline": None if mean is None or baseline is None else mean - baseline,
                "reference_dice": reference[0],
                "reference_delta": reference[1],
                "status": r.status,
            }
        )
    return pd.DataFrame(rows)


def plot_dice_bars(report: AblationReport, path: Path) -> None:
    done = [r for r in report.results if r.evaluation is not None]
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(done)), 4))
    means = [100 * r.evaluation.mean_dice for r in done]
    stds = [100 * r.evaluation.std_dice for r in done]
    ax.bar(range(len(done)), means, yerr=stds, capsize=3, color="tab:blue")
    ax.set_xticks(range(len(done)))
    ax.set_xticklabels([r.variant.name for r in done], rotation=30, ha="right")
    ax.set_ylabel("Test DICE (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _contour(ax, mask: np.ndarray, color: str) -> None:
    if 0 < mask.sum() < mask.size:
        ax.contour(mask.astype(float), levels=[0.5], colors=color, linewidths=1)


def plot_overlay(
    key_frame: np.ndarray,
    ground_truth: np.ndarray,
    prediction: np.ndarray,
    liver: Optional[np.ndarray],
    title: str,
    path: Path,
) -> None:
    """Key frame with ground truth (yellow), prediction (cyan) and predicted liver (green) contours."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(key_frame, cmap="gray", vmin=0.0, vmax=1.0)
    _contour(ax, ground_truth, GROUND_TRUTH_COLOR)
    _contour(ax, prediction, PREDICTION_COLOR)
    if liver is not None:
        _contour(ax, liver, LIVER_COLOR)
    ax.set_title(title, fontsize=8)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def overlay_selection(evaluation: EvaluationReport, per_side: int = OVERLAYS_PER_SIDE) -> List[Tuple[str, int, str]]:
    """(kind, rank, sample_id) for the best and worst samples; ties broken by id."""
    ranked = sorted(evaluation.scores, key=lambda s: (-s.dice, s.sample_id))
    best = [("best", i + 1, s.sample_id) for i, s in enumerate(ranked[:per_side])]
    worst_ranked = sorted(evaluation.scores, key=lambda s: (s.dice, s.sample_id))
    worst = [("worst", i + 1, s.sample_id) for i, s in enumerate(worst_ranked[:per_side])]
    return best + worst


def _write(path: Path, writer, failures: Dict[str, str]) -> Optional[Path]:
    try:
        writer(path)
        return path
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        failures[str(path)] = str(e)
        return None


def emit_report(
    report: AblationReport, out_dir: PathLike, manifest: Optional[DatasetManifest] = None
) -> Tuple[List[Path], Dict[str, str]]:
    """
    Write results.json, results.csv, the bar chart and the overlays.

    Args:
        report: Possibly partially failed ablation report
        out_dir: Report directory
        manifest: Dataset for the overlays; defaults to the report's dataset root

    Returns:
        (written files, failed path -> error message)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Optional[Path]] = []
    failures: Dict[str, str] = {}

    written.append(_write(out_dir / RESULTS_JSON, lambda p: dump_json(report.to_dict(), p), failures))
    table = results_table(report)
    written.append(_write(out_dir / RESULTS_CSV, lambda p: table.to_csv(p, index=False), failures))
    written.append(_write(out_dir / BAR_CHART, lambda p: plot_dice_bars(report, p), failures))

    if manifest is None and report.dataset_root is not None:
        manifest = read_manifest(report.dataset_root)
    if manifest is None:
        logger.warning("No dataset available, skipping overlays")
    else:
        samples = {}
        for r in report.results:
            if r.evaluation is None:
                continue
            overlay_dir = out_dir / "overlays" / r.variant.name
            overlay_dir.mkdir(parents=True, exist_ok=True)
            for kind, rank, sid in overlay_selection(r.evaluation):
                if sid not in samples:
                    samples[sid] = load_sample(manifest, sid)
                sample = samples[sid]
                dice = next(s.dice for s in r.evaluation.scores if s.sample_id == sid)
                written.append(
                    _write(
                        overlay_dir / f"{kind}_{rank}_{sid}.png",
                        lambda p: plot_overlay(
                            sample.key_frame,
                            sample.tumor_mask,
                            r.evaluation.masks[sid],
                            r.evaluation.liver_masks.get(sid),
                            f"{r.variant.name} {sid} DICE {dice:.3f}",
                            p,
                        ),
                        failures,
                    )
                )
    files = [p for p in written if p is not None]
    logger.info(f"Wrote {len(files)} report files to {out_dir} ({len(failures)} failures)")
    return files, failures
