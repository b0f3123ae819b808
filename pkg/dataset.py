"""
On-disk dataset format for the DSA-LTD project.

Layout of a generated dataset directory:
    manifest.json                 schema_version, config echo, samples[]
    <id>/frame_###.png            8-bit grayscale frames
    <id>/tumor_mask.png           0 / 255
    <id>/liver_mask.png           0 / 255

The manifest is written with sorted keys so that regenerating a dataset from
the same config reproduces it byte for byte.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from constants import (
    AUGMENTATION_OFFSETS,
    FRAME_NAME_TEMPLATE,
    FULL_FFS_INPUTS,
    KEY_FRAME,
    LIVER_MASK_NAME,
    MANIFEST_NAME,
    MANIFEST_SCHEMA_VERSION,
    RAW_MOTION_INPUTS,
    TDL_STACK_SIZE,
    TUMOR_MASK_NAME,
)
from core import DsaVideo, Sample, to_uint8, validate_sample
from logging_config import logger
from motion import extract_motion, frame_difference
from utils import PathLike, dump_json, load_json, stable_hash

SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    key_frame_index: int
    aug_frame_indices: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "aug_frame_indices", tuple(self.aug_frame_indices))
        if self.split == "test" and self.aug_frame_indices:
            raise ValueError(f"test sample {self.id} must not list augmentation frames")

    @property
    def training_frames(self) -> Tuple[int, ...]:
        return (self.key_frame_index,) + self.aug_frame_indices

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "split": self.split,
            "key_frame_index": self.key_frame_index,
            "aug_frame_indices": list(self.aug_frame_indices),
        }


@dataclass(frozen=True)
class DatasetManifest:
    """
    Attributes:
        config: Echo of the generator config
        samples: One entry per sample, sorted by id
        root: Directory holding the manifest (not serialized)
        schema_version: Manifest format version
    """

    config: Dict[str, Any]
    samples: Tuple[ManifestEntry, ...]
    root: Optional[Path] = field(default=None, compare=False)
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def entries(self, split: str) -> List[ManifestEntry]:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return [e for e in self.samples if e.split == split]

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.samples:
            if e.id == sample_id:
                return e
        raise KeyError(sample_id)

    def sample_dir(self, sample_id: str) -> Path:
        if self.root is None:
            raise ValueError("manifest has no root directory")
        return self.root / sample_id

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "samples": [e.to_dict() for e in self.samples],
        }


def write_manifest(manifest: DatasetManifest, out_dir: PathLike) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    dump_json(manifest.to_dict(), path)
    logger.info(f"Wrote manifest with {len(manifest.samples)} samples to {path}")
    return path


def read_manifest(path: PathLike) -> DatasetManifest:
    """
    Load a manifest from a dataset directory or a manifest file.

    Raises:
        FileNotFoundError: If no manifest exists
        ValueError: If the schema version or an entry is invalid
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        logger.error(f"No manifest at {path}")
        raise FileNotFoundError(path)
    data = load_json(path)
    if data.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        logger.error(f"Unsupported manifest schema {data.get('schema_version')!r} in {path}")
        raise ValueError(f"unsupported manifest schema_version {data.get('schema_version')!r}")
    try:
        samples = tuple(
            ManifestEntry(
                id=s["id"],
                split=s["split"],
                key_frame_index=int(s["key_frame_index"]),
                aug_frame_indices=tuple(int(i) for i in s.get("aug_frame_indices", [])),
            )
            for s in data["samples"]
        )
    except KeyError as e:
        logger.error(f"Manifest entry is missing field {e}")
        raise ValueError(f"manifest entry missing field {e}") from e
    return DatasetManifest(config=data.get("config", {}), samples=samples, root=path.parent)


def dataset_hash(manifest: DatasetManifest) -> str:
    return stable_hash(manifest.to_dict())


def _save_png(pixels_u8: np.ndarray, path: Path) -> None:
    Image.fromarray(np.ascontiguousarray(pixels_u8, dtype=np.uint8)).save(path)


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def save_sample(sample: Sample, out_dir: PathLike) -> Path:
    """
    Write frames and masks of one sample under out_dir/<sample_id>/.

    Returns:
        The sample directory
    """
    sample_dir = Path(out_dir) / sample.sample_id
    sample_dir.mkdir(parents=True, exist_ok=True)
    # drop frames left by an earlier, longer render
    for stale in sample_dir.glob("frame_*.png"):
        stale.unlink()
    frames_u8 = to_uint8(sample.video.frames)
    for index, frame in enumerate(frames_u8):
        _save_png(frame, sample_dir / FRAME_NAME_TEMPLATE.format(index))
    _save_png((np.asarray(sample.tumor_mask) > 0).astype(np.uint8) * 255, sample_dir / TUMOR_MASK_NAME)
    _save_png((np.asarray(sample.liver_mask) > 0).astype(np.uint8) * 255, sample_dir / LIVER_MASK_NAME)
    logger.debug(f"Saved {sample.video.frame_count} frames of {sample.sample_id} to {sample_dir}")
    return sample_dir


def frame_paths(video_dir: PathLike) -> List[Path]:
    """Frame files of a video directory in index order."""
    paths = sorted(Path(video_dir).glob("frame_*.png"))
    if not paths:
        logger.error(f"No frame_###.png files in {video_dir}")
        raise FileNotFoundError(f"no frames in {video_dir}")
    return paths


def load_video_u8(video_dir: PathLike) -> np.ndarray:
    return np.stack([_load_png(p) for p in frame_paths(video_dir)])


def load_video(video_dir: PathLike) -> DsaVideo:
    return DsaVideo.from_uint8(load_video_u8(video_dir))


def load_mask(path: PathLike) -> np.ndarray:
    """Read a 0/255 PNG mask as a {0, 1} uint8 array."""
    pixels = _load_png(Path(path))
    if not np.isin(pixels, (0, 255)).all():
        logger.error(f"Mask {path} holds values other than 0 and 255")
        raise ValueError(f"mask {path} is not binary")
    return (pixels > 0).astype(np.uint8)


def load_sample(manifest: DatasetManifest, sample_id: str) -> Sample:
    """
    Read one sample of a dataset back into memory.

    Raises:
        KeyError: If the id is not listed in the manifest
        ValueError: If the stored sample violates a Sample invariant
    """
    entry = manifest.entry(sample_id)
    sample_dir = manifest.sample_dir(sample_id)
    sample = Sample(
        video=load_video(sample_dir),
        key_frame_index=entry.key_frame_index,
        tumor_mask=load_mask(sample_dir / TUMOR_MASK_NAME),
        liver_mask=load_mask(sample_dir / LIVER_MASK_NAME),
        sample_id=sample_id,
    )
    violations = validate_sample(sample)
    if violations:
        logger.error(f"Sample {sample_id} is invalid: {violations}")
        raise ValueError(f"sample {sample_id}: {'; '.join(violations)}")
    return sample


def holdout_bucket(sample_id: str) -> int:
    """Stable bucket in [0, 100) derived from the sample id."""
    return int(hashlib.md5(sample_id.encode("utf-8")).hexdigest(), 16) % 100


def split_validation(
    entries: Sequence[ManifestEntry], val_fraction: float
) -> Tuple[List[ManifestEntry], List[ManifestEntry]]:
    """
    Partition training entries into (fit, validation) by id hash.

    Returns:
        Entries whose bucket is >= 100 * val_fraction, then the held-out rest
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    cutoff = 100.0 * val_fraction
    fit = [e for e in entries if holdout_bucket(e.id) >= cutoff]
    held_out = [e for e in entries if holdout_bucket(e.id) < cutoff]
    return fit, held_out


class DsaTrainingDataset(Dataset):
    """
    Torch dataset over (sample, frame j) pairs.

    With augmentation each training entry contributes its key frame and the
    listed augmentation frames; masks are shared by all three. Each item holds
    the frames j-9..j, frame j, the I_FD target of frame j, every raw motion map
    of the fusion layout, and both masks, as float32 tensors.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        entries: Sequence[ManifestEntry],
        ffs_inputs: Sequence[str] = FULL_FFS_INPUTS,
        fd_offset: int = TDL_STACK_SIZE - 1,
        augment: bool = True,
    ) -> None:
        self.motion_inputs = tuple(n for n in ffs_inputs if n in RAW_MOTION_INPUTS)
        self.fd_offset = fd_offset
        self.videos: Dict[str, np.ndarray] = {}
        self.masks: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self.items: List[Tuple[str, int]] = []

        for entry in entries:
            sample = load_sample(manifest, entry.id)
            # kept as uint8 to bound memory
            self.videos[entry.id] = to_uint8(sample.video.frames)
            self.masks[entry.id] = (sample.tumor_mask, sample.liver_mask)
            frames = entry.training_frames if augment else (entry.key_frame_index,)
            for j in frames:
                needed = max(TDL_STACK_SIZE - 1, fd_offset if self.motion_inputs else 0)
                if j - needed < 0 or j >= sample.video.frame_count:
                    logger.error(f"Sample {entry.id}: frame {j} lacks frame {j - needed}")
                    raise ValueError(f"sample {entry.id}: frame {j} needs frame {j - needed}")
                self.items.append((entry.id, j))
        logger.debug(f"Training dataset: {len(entries)} samples, {len(self.items)} items")

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> Dict[str, Any]:
        sample_id, j = self.items[index]
        video = DsaVideo.from_uint8(self.videos[sample_id])
        tumor_mask, liver_mask = self.masks[sample_id]
        frames = video.frames

        def tensor(pixels: np.ndarray) -> torch.Tensor:
            return torch.as_tensor(np.ascontiguousarray(pixels), dtype=torch.float32)

        item: Dict[str, Any] = {
            "sample_id": sample_id,
            "frame_index": j,
            KEY_FRAME: tensor(frames[j])[None],
            "stack": tensor(frames[j - TDL_STACK_SIZE + 1 : j + 1]),
            "fd_target": tensor(frame_difference(video, j, TDL_STACK_SIZE - 1).pixels)[None],
            "tumor_mask": tensor(tumor_mask)[None],
            "liver_mask": tensor(liver_mask)[None],
        }
        for name in self.motion_inputs:
            item[name] = tensor(extract_motion(video, j, name, offset=self.fd_offset).pixels)[None]
        return item


def augmentation_frames(key_frame_index: int) -> Tuple[int, ...]:
    return tuple(key_frame_index + offset for offset in AUGMENTATION_OFFSETS)
