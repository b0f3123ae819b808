"""
Key-frame selection module for the DSA-LTD project.

The key frame is the frame where tumor imaging is the most stable. Among the
last frames of a video, each interior frame is scored by the mean of the
summed absolute differences to its two neighbours, and the lowest score wins.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from constants import KEY_FRAME_WINDOW, MIN_FRAME_COUNT, MIN_KEY_FRAME_INDEX
from core import DsaVideo
from logging_config import logger


@dataclass(frozen=True)
class KeyFrameResult:
    """
    Attributes:
        index: Absolute index of the selected frame
        scores: (frame_index, stability_score) for every candidate
    """

    index: int
    scores: Tuple[Tuple[int, float], ...]


def adjacent_differences(video: DsaVideo, window: int = KEY_FRAME_WINDOW) -> List[float]:
    """
    Summed absolute differences between adjacent frames of the last `window` frames.

    Args:
        video: Input video
        window: Number of trailing frames to scan

    Returns:
        window - 1 values; value j compares frames s + j and s + j + 1,
        with s = frame_count - window

    Raises:
        ValueError: If window < 2 or window > frame_count
    """
    if window < 2:
        logger.error(f"Key-frame window {window} is smaller than 2")
        raise ValueError(f"window must be at least 2, got {window}")
    if window > video.frame_count:
        logger.error(f"Key-frame window {window} exceeds {video.frame_count} frames")
        raise ValueError(
            f"window {window} larger than video ({video.frame_count} frames)"
        )
    start = video.frame_count - window
    tail = video.frames[start:]
    sums = np.abs(np.diff(tail, axis=0)).sum(axis=(1, 2))
    return [float(v) for v in sums]


def stability_score(diff_sums: Sequence[float], candidate: int) -> float:
    """
    Mean of the difference sums on both sides of a window-local candidate frame.

    Args:
        diff_sums: Output of adjacent_differences
        candidate: Window-local frame index; frame i sits between diff i-1 and diff i

    Returns:
        (diff_sums[candidate - 1] + diff_sums[candidate]) / 2

    Raises:
        ValueError: If the candidate lacks a difference on either side
    """
    if not 1 <= candidate <= len(diff_sums) - 1:
        logger.error(f"Candidate {candidate} has no difference image on both sides")
        raise ValueError(
            f"candidate {candidate} must be interior: 1 <= candidate <= {len(diff_sums) - 1}"
        )
    return (diff_sums[candidate - 1] + diff_sums[candidate]) / 2.0


def select_key_frame(video: DsaVideo, window: int = KEY_FRAME_WINDOW) -> KeyFrameResult:
    """
    Pick the most stable interior frame of the trailing window.

    Ties go to the earliest frame. If the winner sits before frame 9, the
    earliest candidate at or after frame 9 is taken instead.

    Args:
        video: Input video with at least 16 frames
        window: Number of trailing frames to scan

    Returns:
        KeyFrameResult with the absolute index and all candidate scores

    Raises:
        ValueError: If the video is shorter than 16 frames
    """
    if video.frame_count < MIN_FRAME_COUNT:
        logger.error(f"Video has {video.frame_count} frames, need {MIN_FRAME_COUNT}")
        raise ValueError(
            f"key-frame selection needs at least {MIN_FRAME_COUNT} frames"
        )
    if window < 3:
        raise ValueError(f"window must be at least 3 to have an interior frame, got {window}")

    diff_sums = adjacent_differences(video, window)
    start = video.frame_count - window
    scores = tuple(
        (start + local, stability_score(diff_sums, local))
        for local in range(1, window - 1)
    )

    best_index, best_score = scores[0]
    for frame_index, score in scores[1:]:
        if score < best_score:
            best_index, best_score = frame_index, score

    if best_index < MIN_KEY_FRAME_INDEX:
        eligible = [i for i, _ in scores if i >= MIN_KEY_FRAME_INDEX]
        logger.debug(
            f"Key frame {best_index} precedes frame {MIN_KEY_FRAME_INDEX}, using {eligible[0]}"
        )
        best_index = eligible[0]

    logger.debug(f"Selected key frame {best_index} (score {best_score:.4f})")
    return KeyFrameResult(index=best_index, scores=scores)
