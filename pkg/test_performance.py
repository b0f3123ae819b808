#!/usr/bin/env python3
"""
Performance test for the metric, key-frame and motion kernels
"""

import time
from typing import List

import numpy as np

from core import DsaVideo, dice_score
from keyframe import select_key_frame
from motion import optical_flow_magnitude


def create_mask_pairs(count: int, size: int = 16, seed: int = 0) -> List[np.ndarray]:
    """Random binary mask pairs with varying foreground density"""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        density = rng.random()
        pairs.append(
            (
                (rng.random((size, size)) < density).astype(np.uint8),
                (rng.random((size, size)) < density).astype(np.uint8),
            )
        )
    return pairs


def benchmark_dice():
    print("Benchmarking dice_score on 1000 random 16x16 pairs...")
    pairs = create_mask_pairs(1000)
    start_time = time.time()
    scores = [dice_score(a, b) for a, b in pairs]
    end_time = time.time()
    print(f"dice_score: {end_time - start_time:.4f}s (mean {np.mean(scores):.4f})")


def benchmark_key_frames():
    print("Benchmarking select_key_frame on 100 random videos...")
    rng = np.random.default_rng(1)
    videos = [DsaVideo(rng.random((int(rng.integers(16, 31)), 64, 64))) for _ in range(100)]
    start_time = time.time()
    indices = [select_key_frame(v).index for v in videos]
    end_time = time.time()
    print(f"select_key_frame: {end_time - start_time:.4f}s (mean index {np.mean(indices):.1f})")


def benchmark_optical_flow():
    print("Benchmarking optical_flow_magnitude at growing frame sizes...")
    rng = np.random.default_rng(2)

    # First call compiles the numba kernel
    optical_flow_magnitude(DsaVideo(rng.random((16, 16, 16))), 10)

    for size in [64, 128, 256, 512]:
        video = DsaVideo(rng.random((16, size, size)))
        start_time = time.time()
        optical_flow_magnitude(video, 10)
        end_time = time.time()
        print(f"Size {size}: {end_time - start_time:.4f}s")

        # Stop if it takes too long
        if end_time - start_time > 5.0:
            print(f"Stopping at size {size} due to long execution time")
            break


if __name__ == "__main__":
    benchmark_dice()
    benchmark_key_frames()
    benchmark_optical_flow()
