"""
Synthetic DSA phantom generator.

Each sample is a short video of a smooth background, a faint liver region in
the upper-left quadrant, one or more feathered elliptical tumors inside the
liver whose contrast washes in and then plateaus, optional tumor-like
confounders outside the liver, static noise and a rigid jitter trajectory.
Masks come from the un-jittered plateau geometry.

Tumor sizes and counts follow the statistics of the clinical collection:
diameters in [6.5, 217] px (mean 69.37) at 1021 px width, about 1.56 tumors
per sample, 548 of 760 tumors with rich blood supply.
"""

import shutil
from dataclasses import asdict, dataclass, replace
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import erfc
from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

from constants import (
    AUGMENTATION_OFFSETS,
    MANIFEST_NAME,
    MAX_TUMORS_PER_SAMPLE,
    MEAN_TUMORS_PER_SAMPLE,
    MIN_FRAME_COUNT,
    MIN_FRAME_SIZE,
    MIN_KEY_FRAME_INDEX,
    MIN_TUMOR_RADIUS,
    RICH_BLOOD_PROBABILITY,
    SOURCE_WIDTH,
    TRAIN_FRACTION,
    TUMOR_SIZE_MEAN,
    TUMOR_SIZE_RANGE,
)
from core import DsaVideo, Sample, to_unit_range, to_uint8
from dataset import DatasetManifest, ManifestEntry, augmentation_frames, save_sample, write_manifest
from logging_config import logger
from utils import PathLike

# Shape parameter of the gamma law for tumor diameters
TUMOR_SIZE_SHAPE = 2.0
PLACEMENT_ATTEMPTS = 60


@dataclass(frozen=True)
class PhantomConfig:
    """
    Attributes:
        seed: Dataset seed; the dataset is a pure function of the config
        num_samples: Number of samples to generate
        frame_count: Frames per video
        height: Frame height in pixels
        width: Frame width in pixels
        tumors_per_sample_range: Inclusive bounds on the tumor count
        tumor_radius_range: Radius bounds in pixels; None scales the clinical size range
        confounder_probability: Chance that a scene carries confounders
        artifact_amplitude: Standard deviation (px) of each jitter random-walk step
        washin_midpoint_range: Inclusive bounds of the frame where a tumor plateaus;
            None gives (14, frame_count - 5), narrowed for short videos
        washin_duration: Frames from first enhancement to plateau
        edge_feather: Gaussian edge width (px) of every ellipse
        rich_blood_probability: Share of tumors with rich blood supply
        rich_contrast: Plateau enhancement of a rich tumor
        poor_contrast: Plateau enhancement of a poor tumor
        liver_contrast: Static enhancement of the liver region
        background_level: Mean background intensity
        noise_std: Standard deviation of the static pixel noise
        liver_margin: Tumors must lie within this many pixels of the liver
        train_fraction: Share of samples in the train split (floored)
        workers: Worker processes for generation
    """

    seed: int = 0
    num_samples: int = 80
    frame_count: int = 24
    height: int = 256
    width: int = 256
    tumors_per_sample_range: Tuple[int, int] = (1, MAX_TUMORS_PER_SAMPLE)
    tumor_radius_range: Optional[Tuple[float, float]] = None
    confounder_probability: float = 0.5
    artifact_amplitude: float = 0.5
    washin_midpoint_range: Optional[Tuple[int, int]] = None
    washin_duration: int = 8
    edge_feather: float = 1.5
    rich_blood_probability: float = RICH_BLOOD_PROBABILITY
    rich_contrast: float = 0.45
    poor_contrast: float = 0.22
    liver_contrast: float = 0.08
    background_level: float = 0.25
    noise_std: float = 0.01
    liver_margin: int = 3
    train_fraction: float = TRAIN_FRACTION
    workers: int = 1

    def __post_init__(self) -> None:
        for name in ("tumors_per_sample_range", "tumor_radius_range", "washin_midpoint_range"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))
        problems = self.violations()
        if problems:
            logger.error(f"Invalid phantom config: {problems}")
            raise ValueError("; ".join(problems))

    def violations(self) -> List[str]:
        problems = []
        if self.num_samples < 1:
            problems.append("num_samples must be >= 1")
        if self.frame_count < MIN_FRAME_COUNT:
            problems.append(f"frame_count must be >= {MIN_FRAME_COUNT}")
        if min(self.height, self.width) < MIN_FRAME_SIZE:
            problems.append(f"frames must be at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}")
        low, high = self.tumors_per_sample_range
        if not 1 <= low <= high <= MAX_TUMORS_PER_SAMPLE:
            problems.append(f"tumors_per_sample_range must lie within [1, {MAX_TUMORS_PER_SAMPLE}]")
        r_low, r_high = self.radius_range
        if not 0 < r_low <= r_high:
            problems.append("tumor_radius_range must satisfy 0 < low <= high")
        p_low, p_high = self.plateau_range
        if p_low < MIN_KEY_FRAME_INDEX or p_low > p_high:
            problems.append(f"washin_midpoint_range must satisfy {MIN_KEY_FRAME_INDEX} <= low <= high")
        if p_high + max(AUGMENTATION_OFFSETS) >= self.frame_count:
            problems.append("washin_midpoint_range leaves no room for augmentation frames")
        for name in ("confounder_probability", "rich_blood_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if not 0.0 < self.train_fraction <= 1.0:
            problems.append("train_fraction must lie in (0, 1]")
        if self.washin_duration < 1:
            problems.append("washin_duration must be >= 1")
        if self.artifact_amplitude < 0 or self.edge_feather < 0 or self.noise_std < 0:
            problems.append("artifact_amplitude, edge_feather and noise_std must be >= 0")
        if not 0.0 < self.poor_contrast <= self.rich_contrast:
            problems.append("contrasts must satisfy 0 < poor_contrast <= rich_contrast")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        return problems

    @property
    def radius_range(self) -> Tuple[float, float]:
        if self.tumor_radius_range is not None:
            return self.tumor_radius_range
        scale = self.width / SOURCE_WIDTH / 2.0
        low, high = TUMOR_SIZE_RANGE
        return max(MIN_TUMOR_RADIUS, low * scale), max(MIN_TUMOR_RADIUS, high * scale)

    @property
    def plateau_range(self) -> Tuple[int, int]:
        if self.washin_midpoint_range is not None:
            return self.washin_midpoint_range
        high = self.frame_count - 5
        return max(MIN_KEY_FRAME_INDEX, min(14, high)), high

    @property
    def num_train(self) -> int:
        return int(np.floor(self.num_samples * self.train_fraction + 1e-9))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class Ellipse:
    center_y: float
    center_x: float
    radius_y: float
    radius_x: float
    angle: float = 0.0

    def normalized_distance(self, shape: Tuple[int, int]) -> np.ndarray:
        """Elliptical radius rho per pixel; rho <= 1 inside."""
        yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
        dy = yy - self.center_y
        dx = xx - self.center_x
        cos, sin = np.cos(self.angle), np.sin(self.angle)
        u = dx * cos + dy * sin
        v = -dx * sin + dy * cos
        return np.sqrt((u / self.radius_x) ** 2 + (v / self.radius_y) ** 2)

    def mask(self, shape: Tuple[int, int]) -> np.ndarray:
        return (self.normalized_distance(shape) <= 1.0).astype(np.uint8)

    def profile(self, shape: Tuple[int, int], feather: float) -> np.ndarray:
        """Soft occupancy in [0, 1] with a Gaussian-blurred edge of width `feather`."""
        rho = self.normalized_distance(shape)
        if feather <= 0:
            return (rho <= 1.0).astype(np.float64)
        edge_distance = (rho - 1.0) * np.sqrt(self.radius_x * self.radius_y)
        return 0.5 * erfc(edge_distance / (np.sqrt(2.0) * feather))


@dataclass(frozen=True)
class Tumor:
    shape: Ellipse
    rich: bool
    contrast: float
    plateau_frame: int


@dataclass(frozen=True)
class Confounder:
    shape: Ellipse
    contrast: float
    plateau_frame: int


@dataclass(frozen=True)
class PhantomScene:
    """
    Attributes:
        index: Sample index within the dataset
        liver: Liver ellipse, centered in the upper-left quadrant
        tumors: Tumors inside (or within the margin of) the liver
        confounders: Tumor-like ellipses outside the liver
        trajectory: Per-frame (dy, dx) translation, zero at the key frame
        noise_seed: Seed of the static noise and background field
    """

    index: int
    liver: Ellipse
    tumors: Tuple[Tumor, ...]
    confounders: Tuple[Confounder, ...]
    trajectory: Tuple[Tuple[float, float], ...]
    noise_seed: int

    @property
    def key_frame_index(self) -> int:
        """First frame at which every tumor has plateaued."""
        return max(t.plateau_frame for t in self.tumors)


def sample_id(index: int) -> str:
    return f"sample_{index:04d}"


def washin_curve(frame_count: int, plateau_frame: int, duration: int) -> np.ndarray:
    """
    Smoothstep enhancement rising from 0 at plateau_frame - duration to exactly 1
    from plateau_frame onward.
    """
    t = np.arange(frame_count, dtype=np.float64)
    x = np.clip((t - (plateau_frame - duration)) / duration, 0.0, 1.0)
    curve = x * x * (3.0 - 2.0 * x)
    curve[t >= plateau_frame] = 1.0
    return curve


def _sample_liver(rng: np.random.Generator, height: int, width: int) -> Ellipse:
    return Ellipse(
        center_y=rng.uniform(0.22, 0.32) * height,
        center_x=rng.uniform(0.22, 0.32) * width,
        radius_y=rng.uniform(0.15, 0.2) * height,
        radius_x=rng.uniform(0.17, 0.22) * width,
        angle=rng.uniform(-0.5, 0.5),
    )


def _sample_radius(rng: np.random.Generator, config: PhantomConfig) -> float:
    low, high = config.radius_range
    if config.tumor_radius_range is not None:
        return float(rng.uniform(low, high))
    size_low, size_high = TUMOR_SIZE_RANGE
    diameter = rng.gamma(TUMOR_SIZE_SHAPE, TUMOR_SIZE_MEAN / TUMOR_SIZE_SHAPE)
    diameter = float(np.clip(diameter, size_low, size_high))
    return float(np.clip(diameter * config.width / SOURCE_WIDTH / 2.0, low, high))


def _sample_tumor_count(rng: np.random.Generator, config: PhantomConfig) -> int:
    low, high = config.tumors_per_sample_range
    return int(np.clip(rng.geometric(1.0 / MEAN_TUMORS_PER_SAMPLE), low, high))


def _random_ellipse(
    rng: np.random.Generator, candidates: np.ndarray, radius: float
) -> Ellipse:
    cy, cx = candidates[rng.integers(len(candidates))]
    aspect = rng.uniform(0.8, 1.25)
    return Ellipse(
        center_y=float(cy),
        center_x=float(cx),
        radius_y=radius * aspect,
        radius_x=radius / aspect,
        angle=rng.uniform(0.0, np.pi),
    )


def _place(
    rng: np.random.Generator,
    candidates: np.ndarray,
    radius: float,
    allowed: np.ndarray,
    occupied: np.ndarray,
    shape: Tuple[int, int],
) -> Optional[Ellipse]:
    """Rejection-sample an ellipse whose mask lies in `allowed` and misses `occupied`."""
    for attempt in range(PLACEMENT_ATTEMPTS):
        # shrink after repeated failures
        r = max(MIN_TUMOR_RADIUS, radius * 0.5 ** (attempt // 20))
        ellipse = _random_ellipse(rng, candidates, r)
        mask = ellipse.mask(shape).astype(bool)
        if mask.any() and not (mask & ~allowed).any() and not (mask & occupied).any():
            return ellipse
    return None


def generate_scene(config: PhantomConfig, index: int) -> PhantomScene:
    """
    Sample the geometry and timing of one phantom.

    Deterministic in (config.seed, index). Tumor masks stay inside the liver
    dilated by config.liver_margin; confounders stay clear of the liver.

    Raises:
        IndexError: If index is outside [0, num_samples)
    """
    if not 0 <= index < config.num_samples:
        logger.error(f"Scene index {index} outside [0, {config.num_samples})")
        raise IndexError(f"index {index} outside [0, {config.num_samples})")
    rng = np.random.default_rng([config.seed, index])
    shape = (config.height, config.width)
    p_low, p_high = config.plateau_range

    liver = _sample_liver(rng, *shape)
    liver_mask = liver.mask(shape).astype(bool)
    allowed = ndimage.binary_dilation(liver_mask, iterations=config.liver_margin) if config.liver_margin else liver_mask
    liver_pixels = np.argwhere(liver_mask)
    # keep tumors from touching each other so each wash-in stays separable
    spacing = max(1, int(np.ceil(3 * config.edge_feather)))

    tumors: List[Tumor] = []
    occupied = np.zeros(shape, dtype=bool)
    for _ in range(_sample_tumor_count(rng, config)):
        ellipse = _place(rng, liver_pixels, _sample_radius(rng, config), allowed, occupied, shape)
        if ellipse is None:
            continue
        occupied |= ndimage.binary_dilation(ellipse.mask(shape).astype(bool), iterations=spacing)
        rich = bool(rng.random() < config.rich_blood_probability)
        tumors.append(
            Tumor(
                shape=ellipse,
                rich=rich,
                contrast=config.rich_contrast if rich else config.poor_contrast,
                plateau_frame=int(rng.integers(p_low, p_high + 1)),
            )
        )
    if not tumors:
        # the liver always fits one minimal tumor at its center
        tumors.append(
            Tumor(
                shape=Ellipse(liver.center_y, liver.center_x, MIN_TUMOR_RADIUS, MIN_TUMOR_RADIUS),
                rich=True,
                contrast=config.rich_contrast,
                plateau_frame=p_high,
            )
        )
    key_frame = max(t.plateau_frame for t in tumors)

    confounders: List[Confounder] = []
    if rng.random() < config.confounder_probability:
        outside = ~ndimage.binary_dilation(liver_mask, iterations=config.liver_margin + 2)
        outside_pixels = np.argwhere(outside)
        for _ in range(int(rng.integers(1, 4))):
            ellipse = _place(rng, outside_pixels, _sample_radius(rng, config), outside, occupied, shape)
            if ellipse is None:
                continue
            occupied |= ellipse.mask(shape).astype(bool)
            confounders.append(
                Confounder(
                    shape=ellipse,
                    contrast=float(rng.uniform(config.poor_contrast, config.rich_contrast)),
                    plateau_frame=int(rng.integers(2, key_frame + 1)),
                )
            )

    steps = rng.normal(0.0, config.artifact_amplitude, size=(config.frame_count, 2))
    steps[0] = 0.0
    walk = np.cumsum(steps, axis=0)
    walk -= walk[key_frame]
    trajectory = tuple((float(dy), float(dx)) for dy, dx in walk)

    return PhantomScene(
        index=index,
        liver=liver,
        tumors=tuple(tumors),
        confounders=tuple(confounders),
        trajectory=trajectory,
        noise_seed=int(rng.integers(2**31 - 1)),
    )


def _static_layer(scene: PhantomScene, config: PhantomConfig) -> np.ndarray:
    """Background field, liver enhancement and noise; identical in every frame."""
    shape = (config.height, config.width)
    rng = np.random.default_rng(scene.noise_seed)
    field = ndimage.gaussian_filter(rng.normal(size=shape), sigma=max(shape) / 8.0, mode="wrap")
    spread = np.abs(field).max()
    if spread > 0:
        field = field / spread
    layer = config.background_level + 0.05 * field
    layer = layer + config.liver_contrast * scene.liver.profile(shape, config.edge_feather)
    return layer + rng.normal(0.0, config.noise_std, size=shape)


def render_video(scene: PhantomScene, config: PhantomConfig) -> Sample:
    """
    Render a scene into a Sample.

    Every lesion's enhancement follows its wash-in curve and stays constant
    from its plateau frame. Frames are quantized to 8 bits.

    Raises:
        ValueError: If the scene plateaus before frame 9 or leaves no room
            for the augmentation frames
    """
    key_frame = scene.key_frame_index
    if key_frame < MIN_KEY_FRAME_INDEX or key_frame + max(AUGMENTATION_OFFSETS) >= config.frame_count:
        logger.error(f"Scene {scene.index} plateaus at frame {key_frame}, rejected")
        raise ValueError(
            f"scene {scene.index}: key frame {key_frame} must lie in "
            f"[{MIN_KEY_FRAME_INDEX}, {config.frame_count - max(AUGMENTATION_OFFSETS) - 1}]"
        )
    shape = (config.height, config.width)
    static = _static_layer(scene, config)
    lesions = [(t.shape, t.contrast, t.plateau_frame) for t in scene.tumors]
    lesions += [(c.shape, c.contrast, c.plateau_frame) for c in scene.confounders]
    profiles = [contrast * ellipse.profile(shape, config.edge_feather) for ellipse, contrast, _ in lesions]
    curves = [washin_curve(config.frame_count, plateau, config.washin_duration) for _, _, plateau in lesions]

    frames = np.empty((config.frame_count,) + shape, dtype=np.float64)
    for t in range(config.frame_count):
        frame = static.copy()
        for profile, curve in zip(profiles, curves):
            if curve[t] > 0:
                frame += curve[t] * profile
        dy, dx = scene.trajectory[t]
        if dy or dx:
            frame = ndimage.shift(frame, (dy, dx), order=1, mode="nearest")
        frames[t] = frame
    frames = to_unit_range(to_uint8(np.clip(frames, 0.0, 1.0)))

    tumor_mask = np.zeros(shape, dtype=np.uint8)
    for tumor in scene.tumors:
        tumor_mask |= tumor.shape.mask(shape)
    return Sample(
        video=DsaVideo(frames),
        key_frame_index=key_frame,
        tumor_mask=tumor_mask,
        liver_mask=scene.liver.mask(shape),
        sample_id=sample_id(scene.index),
    )


def _generate_one(index: int, config: PhantomConfig, out_dir: Path) -> Tuple[str, int]:
    sample = render_video(generate_scene(config, index), config)
    save_sample(sample, out_dir)
    return sample.sample_id, sample.key_frame_index


def split_assignment(config: PhantomConfig) -> List[str]:
    """Split name per sample index; a seeded permutation picks the train samples."""
    order = np.random.default_rng(config.seed).permutation(config.num_samples)
    train = set(order[: config.num_train].tolist())
    return ["train" if i in train else "test" for i in range(config.num_samples)]


def _remove_stale_samples(out_dir: Path, num_samples: int) -> None:
    """Delete sample directories of an earlier run that this run will not write."""
    keep = {sample_id(i) for i in range(num_samples)}
    for path in sorted(out_dir.glob("sample_*")):
        if path.is_dir() and path.name not in keep:
            logger.info(f"Removing stale sample directory {path}")
            shutil.rmtree(path)


def generate_dataset(config: PhantomConfig, out_dir: PathLike, overwrite: bool = False) -> DatasetManifest:
    """
    Generate, write and describe a full phantom dataset.

    Args:
        config: Generator config
        out_dir: Dataset directory, created if needed
        overwrite: Replace an existing manifest

    Returns:
        The manifest written to out_dir/manifest.json

    Raises:
        FileExistsError: If a manifest exists and overwrite is False
    """
    out_dir = Path(out_dir)
    if (out_dir / MANIFEST_NAME).exists() and not overwrite:
        logger.error(f"{out_dir / MANIFEST_NAME} exists; pass overwrite to replace it")
        raise FileExistsError(out_dir / MANIFEST_NAME)
    out_dir.mkdir(parents=True, exist_ok=True)
    _remove_stale_samples(out_dir, config.num_samples)

    worker = partial(_generate_one, config=config, out_dir=out_dir)
    indices = list(range(config.num_samples))
    desc = "Generating phantoms"
    if config.workers > 1:
        results = process_map(
            worker,
            indices,
            desc=desc,
            max_workers=config.workers,
            chunksize=max(1, len(indices) // (config.workers * 8)),
        )
    else:
        results = list(tqdm(map(worker, indices), total=len(indices), desc=desc))

    splits = split_assignment(config)
    entries = []
    for index, (sid, key_frame) in enumerate(results):
        split = splits[index]
        entries.append(
            ManifestEntry(
                id=sid,
                split=split,
                key_frame_index=key_frame,
                aug_frame_indices=augmentation_frames(key_frame) if split == "train" else (),
            )
        )
    manifest = DatasetManifest(
        config=config.to_dict(),
        samples=tuple(sorted(entries, key=lambda e: e.id)),
        root=out_dir,
    )
    write_manifest(manifest, out_dir)
    logger.info(
        f"Generated {config.num_samples} phantoms "
        f"({config.num_train} train / {config.num_samples - config.num_train} test) in {out_dir}"
    )
    return manifest


def with_contrast(scene: PhantomScene, contrast: float) -> PhantomScene:
    """Copy of a scene with every tumor set to the given plateau contrast."""
    return replace(scene, tumors=tuple(replace(t, contrast=contrast) for t in scene.tumors))
