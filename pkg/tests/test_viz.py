import numpy as np
import pytest

from permakey.viz import (
    draw_keypoints,
    heatmap_to_rgb,
    keypoint_color,
    keypoint_figure,
    norm_to_pixel,
    render_overlay,
)


def test_norm_to_pixel_endpoints():
    assert norm_to_pixel(-1.0) == 0
    assert norm_to_pixel(1.0) == 83
    assert norm_to_pixel(0.0) == 42  # rounds 41.5 up


def test_norm_to_pixel_clamps():
    assert norm_to_pixel(-5.0) == 0
    assert norm_to_pixel(5.0) == 83


def test_keypoint_color_cycles():
    assert keypoint_color(0) == keypoint_color(12)


def test_draw_keypoints_marks_center_pixel():
    frame = np.zeros((84, 84, 3), dtype=np.uint8)
    out = draw_keypoints(frame, np.array([[0.0, 0.0]]), radius=1)
    assert tuple(out[42, 42]) == keypoint_color(0)
    # Original untouched, far corner untouched.
    assert frame.sum() == 0
    assert tuple(out[0, 0]) == (0, 0, 0)


def test_draw_keypoints_bad_shape_raises():
    with pytest.raises(ValueError):
        draw_keypoints(np.zeros((84, 84)), np.zeros((1, 2)))


def test_heatmap_normalizes_to_peak():
    m = np.zeros((8, 8))
    m[3, 3] = 2.0
    rgb = heatmap_to_rgb(m)
    assert rgb[3, 3, 0] == 255
    assert rgb[0, 0].sum() == 0


def test_heatmap_all_zero_stays_black():
    assert heatmap_to_rgb(np.zeros((8, 8))).sum() == 0


def test_render_overlay_dimensions():
    row = [np.zeros((84, 84, 3), dtype=np.uint8) for _ in range(3)]
    img = render_overlay([row, row], scale=2)
    assert img.size == (3 * 84 * 2, 2 * 84 * 2)


def test_render_overlay_ragged_rows_raise():
    a = np.zeros((84, 84, 3), dtype=np.uint8)
    with pytest.raises(ValueError):
        render_overlay([[a, a], [a]])


def test_keypoint_figure_with_errmaps():
    frames = [np.zeros((84, 84, 3), dtype=np.uint8) for _ in range(2)]
    centers = [np.zeros((3, 2)) for _ in range(2)]
    errmaps = np.random.default_rng(0).random((2, 2, 84, 84))
    img = keypoint_figure(frames, centers, errmaps, scale=1)
    assert img.size == (2 * 84, 4 * 84)  # frames + overlay + 2 map rows
