"""
Motion information extractors for the DSA-LTD project.

Three classical single-channel motion maps, all in [0, 1] with the source
frame dimensions:
- frame difference |F[k] - F[k - offset]| (supervision target of the TDL network)
- background subtraction against an exponential running average
- Lucas-Kanade optical flow magnitude between frames k - 1 and k
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numba import njit

from constants import (
    BACKGROUND_ALPHA,
    BACKGROUND_SUBTRACTION,
    FLOW_MIN_EIGENVALUE,
    FLOW_WINDOW,
    FRAME_DIFF_OFFSET,
    FRAME_DIFFERENCE,
    OPTICAL_FLOW,
)
from core import DsaVideo
from logging_config import logger

MOTION_KINDS: Tuple[str, ...] = (FRAME_DIFFERENCE, OPTICAL_FLOW, BACKGROUND_SUBTRACTION)


@dataclass(frozen=True, eq=False)
class MotionMap:
    """
    Attributes:
        pixels: 2-D array in [0, 1]
        kind: One of MOTION_KINDS
    """

    pixels: np.ndarray
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in MOTION_KINDS:
            raise ValueError(f"unknown motion kind {self.kind!r}")


def _check_frame_index(video: DsaVideo, k: int) -> None:
    if not 0 <= k < video.frame_count:
        logger.error(f"Frame {k} outside video of {video.frame_count} frames")
        raise ValueError(f"frame index {k} outside [0, {video.frame_count})")


def frame_difference(
    video: DsaVideo, k: int, offset: int = FRAME_DIFF_OFFSET
) -> MotionMap:
    """
    Absolute difference between frame k and frame k - offset.

    Args:
        video: Source video
        k: Index of the key frame
        offset: Temporal distance to the reference frame

    Returns:
        MotionMap of kind "frame_difference"

    Raises:
        ValueError: If k - offset < 0 or k is outside the video
    """
    _check_frame_index(video, k)
    if offset < 1 or k - offset < 0:
        logger.error(f"Frame difference needs frame {k - offset}, which does not exist")
        raise ValueError(f"k - offset must be >= 0 (k={k}, offset={offset})")
    pixels = np.clip(np.abs(video.frames[k] - video.frames[k - offset]), 0.0, 1.0)
    return MotionMap(pixels=pixels, kind=FRAME_DIFFERENCE)


def background_subtraction(
    video: DsaVideo, k: int, alpha: float = BACKGROUND_ALPHA
) -> MotionMap:
    """
    Difference between frame k and an exponential running background.

    The background starts at frame 0 and absorbs frames 1..k-1 as
    B <- (1 - alpha) * B + alpha * F[t]. With alpha = 1 the background is
    frame k - 1 alone.

    Args:
        video: Source video
        k: Index of the frame to segment
        alpha: Update rate of the background, in [0, 1]

    Returns:
        MotionMap of kind "background_subtraction"

    Raises:
        ValueError: If k < 1 or alpha outside [0, 1]
    """
    _check_frame_index(video, k)
    if k < 1:
        logger.error("Background subtraction needs at least one previous frame")
        raise ValueError("k must be >= 1 for background subtraction")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")

    background = video.frames[0].copy()
    for t in range(1, k):
        background = (1.0 - alpha) * background + alpha * video.frames[t]
    pixels = np.clip(np.abs(video.frames[k] - background), 0.0, 1.0)
    return MotionMap(pixels=pixels, kind=BACKGROUND_SUBTRACTION)


@njit(cache=True)
def _solve_local_flow(
    ix: np.ndarray,
    iy: np.ndarray,
    it: np.ndarray,
    radius: int,
    min_eigenvalue: float,
) -> np.ndarray:
    """
    Per-pixel least-squares flow over a (2r+1)^2 window.

    Pixels within radius + 1 of the border, and pixels whose structure tensor
    has a smallest eigenvalue below `min_eigenvalue`, get zero flow.

    Returns:
        Flow magnitude array, same shape as the gradients
    """
    height, width = ix.shape
    magnitude = np.zeros((height, width), dtype=np.float64)
    margin = radius + 1
    for y in range(margin, height - margin):
        for x in range(margin, width - margin):
            sxx = 0.0
            syy = 0.0
            sxy = 0.0
            sxt = 0.0
            syt = 0.0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    gx = ix[y + dy, x + dx]
                    gy = iy[y + dy, x + dx]
                    gt = it[y + dy, x + dx]
                    sxx += gx * gx
                    syy += gy * gy
                    sxy += gx * gy
                    sxt += gx * gt
                    syt += gy * gt
            # smallest eigenvalue of [[sxx, sxy], [sxy, syy]]
            half_trace = 0.5 * (sxx + syy)
            spread = np.sqrt(0.25 * (sxx - syy) ** 2 + sxy * sxy)
            if half_trace - spread < min_eigenvalue:
                continue
            det = sxx * syy - sxy * sxy
            u = (-syy * sxt + sxy * syt) / det
            v = (sxy * sxt - sxx * syt) / det
            magnitude[y, x] = np.sqrt(u * u + v * v)
    return magnitude


def optical_flow_magnitude(
    video: DsaVideo,
    k: int,
    window: int = FLOW_WINDOW,
    min_eigenvalue: float = FLOW_MIN_EIGENVALUE,
) -> MotionMap:
    """
    Single-level Lucas-Kanade flow magnitude between frames k - 1 and k.

    Spatial gradients are central differences averaged over both frames; the
    magnitude map is divided by its maximum.

    Args:
        video: Source video
        k: Index of the later frame
        window: Odd side length of the least-squares window
        min_eigenvalue: Aperture threshold on the structure tensor

    Returns:
        MotionMap of kind "optical_flow"; all zeros when no flow is recoverable

    Raises:
        ValueError: If k < 1 or window is not an odd number >= 3
    """
    _check_frame_index(video, k)
    if k < 1:
        logger.error("Optical flow needs a previous frame")
        raise ValueError("k must be >= 1 for optical flow")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")

    previous = video.frames[k - 1]
    current = video.frames[k]
    gy_prev, gx_prev = np.gradient(previous)
    gy_curr, gx_curr = np.gradient(current)
    ix = np.ascontiguousarray(0.5 * (gx_prev + gx_curr))
    iy = np.ascontiguousarray(0.5 * (gy_prev + gy_curr))
    it = np.ascontiguousarray(current - previous)

    magnitude = _solve_local_flow(ix, iy, it, window // 2, min_eigenvalue)
    peak = magnitude.max()
    if peak > 0.0:
        magnitude = magnitude / peak
    logger.debug(f"Optical flow at frame {k}: peak magnitude {peak:.4f} px")
    return MotionMap(pixels=np.clip(magnitude, 0.0, 1.0), kind=OPTICAL_FLOW)


def extract_motion(video: DsaVideo, k: int, kind: str, offset: int = FRAME_DIFF_OFFSET) -> MotionMap:
    """Dispatch to the extractor named by `kind`."""
    if kind == FRAME_DIFFERENCE:
        return frame_difference(video, k, offset)
    if kind == OPTICAL_FLOW:
        return optical_flow_magnitude(video, k)
    if kind == BACKGROUND_SUBTRACTION:
        return background_subtraction(video, k)
    logger.error(f"Unknown motion kind {kind!r}")
    raise ValueError(f"kind must be one of {MOTION_KINDS}, got {kind!r}")
