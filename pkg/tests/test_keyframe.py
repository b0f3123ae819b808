import numpy as np
import pytest

from core import DsaVideo
from keyframe import adjacent_differences, select_key_frame, stability_score


def _exhaustive_key_frame(frames, window=15):
    """Score every candidate directly from the frames."""
    count = frames.shape[0]
    start = count - window
    best, best_score = None, None
    for c in range(start + 1, count - 1):
        before = np.abs(frames[c] - frames[c - 1]).sum()
        after = np.abs(frames[c + 1] - frames[c]).sum()
        score = (before + after) / 2
        if best_score is None or score < best_score:
            best, best_score = c, score
    if best < 9:
        best = min(c for c in range(start + 1, count - 1) if c >= 9)
    return best


def test_matches_exhaustive_scorer(rng):
    for _ in range(100):
        count = int(rng.integers(16, 31))
        frames = rng.random((count, 16, 16))
        assert select_key_frame(DsaVideo(frames)).index == _exhaustive_key_frame(frames)


def test_picks_the_stable_frame(rng):
    frames = rng.random((24, 16, 16))
    frames[18] = frames[17]
    frames[19] = frames[17]
    result = select_key_frame(DsaVideo(frames))
    assert result.index == 18
    assert dict(result.scores)[18] == 0.0


def test_selection_ignores_constant_offset(rng):
    for _ in range(20):
        frames = 0.5 * rng.random((int(rng.integers(16, 31)), 16, 16))
        shifted = frames + 0.3
        assert select_key_frame(DsaVideo(shifted)).index == select_key_frame(DsaVideo(frames)).index


def test_selection_ignores_pixel_permutation(rng):
    for _ in range(20):
        frames = rng.random((24, 16, 16))
        order = rng.permutation(16 * 16)
        permuted = frames.reshape(24, -1)[:, order].reshape(24, 16, 16)
        assert select_key_frame(DsaVideo(permuted)).index == select_key_frame(DsaVideo(frames)).index


def test_candidates_cover_window_interior(rng):
    result = select_key_frame(DsaVideo(rng.random((24, 16, 16))))
    assert [i for i, _ in result.scores] == list(range(10, 23))


def test_tie_goes_to_earliest_frame():
    result = select_key_frame(DsaVideo(np.full((24, 16, 16), 0.3)))
    assert result.index == 10


def test_short_window_falls_back_to_frame_nine():
    # 16 frames: candidates start at frame 2, all tied at zero
    result = select_key_frame(DsaVideo(np.full((16, 16, 16), 0.3)))
    assert result.index == 9


def test_key_frame_is_never_before_nine(rng):
    frames = rng.random((16, 16, 16))
    frames[3] = frames[2]
    frames[4] = frames[2]
    assert select_key_frame(DsaVideo(frames)).index >= 9


def test_adjacent_differences_values():
    frames = np.zeros((16, 16, 16))
    frames[15] = 0.5
    sums = adjacent_differences(DsaVideo(frames), window=3)
    assert sums == [0.0, 128.0]


def test_adjacent_differences_window_too_large():
    with pytest.raises(ValueError):
        adjacent_differences(DsaVideo(np.zeros((16, 16, 16))), window=17)


def test_stability_score_requires_interior_candidate():
    assert stability_score([1.0, 3.0], 1) == 2.0
    with pytest.raises(ValueError):
        stability_score([1.0, 3.0], 0)
    with pytest.raises(ValueError):
        stability_score([1.0, 3.0], 2)
