"""
Core data types for the DSA-LTD project.

Frames, videos and masks are numpy arrays wrapped only where an invariant has
to travel with the data (DsaVideo, Sample). Every function here is pure.

Conventions:
- Frame: 2-D float array, intensities in [0, 1]
- BinaryMask: 2-D uint8 array over {0, 1}
- ProbabilityMap: 2-D float array in [0, 1]
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from constants import (
    DEFAULT_THRESHOLD,
    MIN_FRAME_COUNT,
    MIN_FRAME_SIZE,
    MIN_KEY_FRAME_INDEX,
    PIXEL_MAX,
)
from logging_config import logger

Frame = np.ndarray
BinaryMask = np.ndarray
ProbabilityMap = np.ndarray


class ShapeError(ValueError):
    """Raised when arrays that must share dimensions do not."""


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    """Raise ShapeError unless both arrays have identical shapes."""
    if a.shape != b.shape:
        logger.error(f"Shape mismatch between {what}: {a.shape} vs {b.shape}")
        raise ShapeError(f"{what} must share dimensions: {a.shape} vs {b.shape}")


def check_frame(pixels: np.ndarray) -> None:
    """
    Check the Frame invariants.

    Raises:
        ShapeError: If the frame is not 2-D or smaller than 16x16
        ValueError: If an intensity lies outside [0, 1]
    """
    if pixels.ndim != 2:
        raise ShapeError(f"frame must be 2-D, got shape {pixels.shape}")
    height, width = pixels.shape
    if height < MIN_FRAME_SIZE or width < MIN_FRAME_SIZE:
        raise ShapeError(
            f"frame must be at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}, got {height}x{width}"
        )
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise ValueError("frame intensities must lie in [0, 1]")


def is_binary_mask(mask: np.ndarray) -> bool:
    return mask.ndim == 2 and bool(np.isin(mask, (0, 1)).all())


def check_probability_map(pixels: np.ndarray) -> None:
    """Raise ValueError unless every value lies in [0, 1]."""
    if pixels.size and (np.nanmin(pixels) < 0.0 or np.nanmax(pixels) > 1.0):
        raise ValueError("probability map values must lie in [0, 1]")
    if np.isnan(pixels).any():
        raise ValueError("probability map contains NaN")


def to_unit_range(pixels_u8: np.ndarray) -> np.ndarray:
    """8-bit intensities to float64 in [0, 1]."""
    return np.asarray(pixels_u8, dtype=np.float64) / PIXEL_MAX


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Float intensities in [0, 1] to 8-bit, rounding to nearest."""
    return np.clip(np.rint(np.asarray(pixels) * PIXEL_MAX), 0, PIXEL_MAX).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class DsaVideo:
    """
    Ordered stack of grayscale frames.

    Attributes:
        frames: Array of shape (frame_count, height, width), intensities in [0, 1]
    """

    frames: np.ndarray

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3:
            logger.error(f"Video frames must be a 3-D stack, got shape {frames.shape}")
            raise ShapeError(f"video must be (frames, height, width), got {frames.shape}")
        if frames.shape[0] < MIN_FRAME_COUNT:
            logger.error(f"Video has {frames.shape[0]} frames, need {MIN_FRAME_COUNT}")
            raise ValueError(
                f"video needs at least {MIN_FRAME_COUNT} frames, got {frames.shape[0]}"
            )
        check_frame(frames[0])
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError("frame intensities must lie in [0, 1]")
        frames = frames.copy()
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @classmethod
    def from_uint8(cls, frames_u8: np.ndarray) -> "DsaVideo":
        """Build a video from 8-bit frames, normalizing by 255."""
        return cls(to_unit_range(frames_u8))

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return int(self.frames.shape[1]), int(self.frames.shape[2])

    def frame(self, index: int) -> Frame:
        if not 0 <= index < self.frame_count:
            raise IndexError(f"frame {index} outside [0, {self.frame_count})")
        return self.frames[index]


@dataclass(frozen=True, eq=False)
class Sample:
    """One training/evaluation unit. Invariants are checked by validate_sample."""

    video: DsaVideo
    key_frame_index: int
    tumor_mask: BinaryMask
    liver_mask: BinaryMask
    sample_id: str

    @property
    def key_frame(self) -> Frame:
        return self.video.frame(self.key_frame_index)


def dice_score(a: BinaryMask, b: BinaryMask) -> float:
    """
    DICE overlap 2|A n B| / (|A| + |B|).

    Two empty masks agree perfectly and score 1.0.

    Args:
        a: First binary mask
        b: Second binary mask

    Returns:
        Score in [0, 1]

    Raises:
        ShapeError: If the masks differ in shape
    """
    check_same_shape(a, b, "masks")
    a_bool = np.asarray(a, dtype=bool)
    b_bool = np.asarray(b, dtype=bool)
    total = int(np.count_nonzero(a_bool)) + int(np.count_nonzero(b_bool))
    if total == 0:
        return 1.0
    intersection = int(np.count_nonzero(a_bool & b_bool))
    return 2.0 * intersection / total


def binarize(p: ProbabilityMap, threshold: float = DEFAULT_THRESHOLD) -> BinaryMask:
    """
    Threshold a probability map; the boundary is inclusive.

    Raises:
        ValueError: If threshold is not strictly inside (0, 1)
    """
    if not 0.0 < threshold < 1.0:
        logger.error(f"Binarization threshold {threshold} outside (0, 1)")
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(p) >= threshold).astype(np.uint8)


def validate_sample(s: Sample) -> List[str]:
    """
    List every violated Sample invariant. Never raises.

    Returns:
        Empty list for a well-formed sample, else one message per violation
    """
    violations: List[str] = []
    try:
        frame_count = s.video.frame_count
        frame_shape = s.video.frame_shape
    except Exception as e:  # not a DsaVideo at all
        return [f"invalid video: {e}"]

    k = s.key_frame_index
    if not isinstance(k, (int, np.integer)):
        violations.append(f"key frame index not an integer: {k!r}")
        return violations
    if not 0 <= k < frame_count:
        violations.append(f"key frame out of range: {k} not in [0, {frame_count})")
    if k < MIN_KEY_FRAME_INDEX:
        violations.append(
            f"offset frame missing: key_frame_index={k} < {MIN_KEY_FRAME_INDEX}"
        )

    for name, mask in (("tumor_mask", s.tumor_mask), ("liver_mask", s.liver_mask)):
        mask = np.asarray(mask)
        if mask.shape != frame_shape:
            violations.append(
                f"dimension mismatch: {name} {mask.shape} vs frames {frame_shape}"
            )
        elif not is_binary_mask(mask):
            violations.append(f"non-binary mask: {name} has values outside {{0, 1}}")

    if not s.sample_id:
        violations.append("missing sample id")
    return violations
