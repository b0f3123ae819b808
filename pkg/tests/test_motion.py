import numpy as np
import pytest

from constants import BACKGROUND_SUBTRACTION, FRAME_DIFFERENCE, OPTICAL_FLOW
from core import DsaVideo
from motion import (
    MotionMap,
    background_subtraction,
    extract_motion,
    frame_difference,
    optical_flow_magnitude,
)


def test_frame_difference_of_a_block():
    frames = np.zeros((20, 16, 16))
    frames[12, 4:8, 4:8] = 0.8
    frames[3, 4:8, 4:8] = 0.3
    frames[3, 0, 0] = 0.1
    fd = frame_difference(DsaVideo(frames), 12)
    expected = np.zeros((16, 16))
    expected[4:8, 4:8] = 0.5
    expected[0, 0] = 0.1
    np.testing.assert_allclose(fd.pixels, expected)
    assert fd.kind == FRAME_DIFFERENCE


def test_frame_difference_ignores_other_frames(rng):
    frames = rng.random((20, 16, 16))
    before = frame_difference(DsaVideo(frames), 14).pixels
    perturbed = frames.copy()
    for t in range(20):
        if t not in (14, 5):
            perturbed[t] = rng.random((16, 16))
    after = frame_difference(DsaVideo(perturbed), 14).pixels
    np.testing.assert_array_equal(before, after)


def test_frame_difference_is_symmetric(rng):
    frames = rng.random((20, 16, 16))
    swapped = frames.copy()
    swapped[[5, 14]] = frames[[14, 5]]
    before = frame_difference(DsaVideo(frames), 14).pixels
    after = frame_difference(DsaVideo(swapped), 14).pixels
    np.testing.assert_array_equal(before, after)


def test_background_subtraction_recovers_added_region():
    frames = np.full((16, 32, 32), 0.2)
    frames[10, 8:16, 8:16] += 0.4
    pixels = background_subtraction(DsaVideo(frames), 10).pixels
    np.testing.assert_allclose(pixels[8:16, 8:16], 0.4, atol=1e-9)
    outside = np.ones((32, 32), dtype=bool)
    outside[8:16, 8:16] = False
    np.testing.assert_allclose(pixels[outside], 0.0, atol=1e-9)


@pytest.mark.parametrize("later", [0.5, 0.8])
def test_optical_flow_of_uniform_frames_is_zero(later):
    frames = np.full((16, 32, 32), 0.5)
    frames[10] = later
    flow = optical_flow_magnitude(DsaVideo(frames), 10)
    np.testing.assert_array_equal(flow.pixels, np.zeros((32, 32)))


def test_frame_difference_needs_offset_frame():
    video = DsaVideo(np.zeros((20, 16, 16)))
    with pytest.raises(ValueError):
        frame_difference(video, 5)
    with pytest.raises(ValueError):
        frame_difference(video, 20)
    assert frame_difference(video, 9).pixels.shape == (16, 16)


def test_background_subtraction_alpha_one_is_frame_difference(rng):
    video = DsaVideo(rng.random((20, 16, 16)))
    for k in (1, 2, 12):
        np.testing.assert_array_equal(
            background_subtraction(video, k, alpha=1.0).pixels,
            frame_difference(video, k, offset=1).pixels,
        )


def test_background_subtraction_of_static_video_is_zero():
    video = DsaVideo(np.full((20, 16, 16), 0.4))
    bs = background_subtraction(video, 15)
    assert bs.kind == BACKGROUND_SUBTRACTION
    np.testing.assert_allclose(bs.pixels, 0.0, atol=1e-12)


def test_background_subtraction_rejects_bad_arguments():
    video = DsaVideo(np.zeros((20, 16, 16)))
    with pytest.raises(ValueError):
        background_subtraction(video, 0)
    with pytest.raises(ValueError):
        background_subtraction(video, 5, alpha=1.5)


def _plaid(size=64, period=16):
    y, x = np.mgrid[0:size, 0:size]
    return 0.5 + 0.2 * np.sin(2 * np.pi * x / period) + 0.2 * np.sin(2 * np.pi * y / period)


def test_optical_flow_of_uniform_shift():
    base = _plaid()
    frames = np.stack([np.roll(base, t, axis=1) for t in range(20)])
    flow = optical_flow_magnitude(DsaVideo(frames), 10)
    assert flow.kind == OPTICAL_FLOW
    assert flow.pixels.shape == (64, 64)
    assert flow.pixels.min() >= 0.0 and flow.pixels.max() == pytest.approx(1.0)
    interior = flow.pixels[8:-8, 8:-8]
    assert interior.mean() >= 0.8


def test_optical_flow_of_static_video_is_zero():
    video = DsaVideo(np.stack([_plaid()] * 20))
    np.testing.assert_array_equal(optical_flow_magnitude(video, 10).pixels, 0.0)


def test_optical_flow_rejects_bad_arguments():
    video = DsaVideo(np.zeros((20, 16, 16)))
    with pytest.raises(ValueError):
        optical_flow_magnitude(video, 0)
    with pytest.raises(ValueError):
        optical_flow_magnitude(video, 5, window=4)


def test_extract_motion_dispatch(rng):
    video = DsaVideo(rng.random((20, 16, 16)))
    for kind in (FRAME_DIFFERENCE, OPTICAL_FLOW, BACKGROUND_SUBTRACTION):
        motion = extract_motion(video, 12, kind)
        assert motion.kind == kind
        assert motion.pixels.shape == (16, 16)
        assert 0.0 <= motion.pixels.min() and motion.pixels.max() <= 1.0
    with pytest.raises(ValueError):
        extract_motion(video, 12, "sparkle")


def test_motion_map_rejects_unknown_kind():
    with pytest.raises(ValueError):
        MotionMap(pixels=np.zeros((16, 16)), kind="sparkle")
