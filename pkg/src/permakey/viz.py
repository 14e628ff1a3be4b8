"""Qualitative figures: keypoint overlays and error-map heatmaps rendered
as a single strip image per row of inputs."""

import numpy as np
from PIL import Image

from .data import FRAME_HW

# Fixed palette, indexed by keypoint id so colors are consistent across
# frames within one figure.
_PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (170, 110, 40),
], dtype=np.uint8)


def keypoint_color(k: int):
    """Color for keypoint index k (cycles if k exceeds the palette)."""
    return tuple(int(v) for v in _PALETTE[k % len(_PALETTE)])


def norm_to_pixel(coord: float, hw: int = FRAME_HW) -> int:
    """Map a [-1, 1] coordinate to the nearest pixel index."""
    i = int(round((coord + 1.0) * (hw - 1) / 2.0))
    return min(max(i, 0), hw - 1)


def draw_keypoints(frame, centers, radius: int = 2):
    """Return a copy of an (H, W, 3) uint8 frame with a filled disc per
    keypoint. centers: (K, 2) as (x, y) in [-1, 1]."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) frame, got {frame.shape}")
    out = frame.copy()
    hw = frame.shape[0]
    yy, xx = np.mgrid[0:hw, 0:frame.shape[1]]
    for k, (cx, cy) in enumerate(np.asarray(centers).reshape(-1, 2)):
        px, py = norm_to_pixel(cx, frame.shape[1]), norm_to_pixel(cy, hw)
        disc = (yy - py) ** 2 + (xx - px) ** 2 <= radius ** 2
        out[disc] = keypoint_color(k)
    return out


def heatmap_to_rgb(errmap):
    """Render a nonnegative 2D map as a red-hot uint8 image, normalized to
    its own max (all-zero maps stay black)."""
    m = np.asarray(errmap, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected 2D map, got {m.shape}")
    peak = m.max()
    norm = m / peak if peak > 0 else m
    out = np.zeros(m.shape + (3,), dtype=np.uint8)
    out[..., 0] = np.clip(norm * 255, 0, 255).astype(np.uint8)
    out[..., 1] = np.clip(norm * 170, 0, 255).astype(np.uint8)
    return out


def render_overlay(rows, scale: int = 2) -> Image.Image:
    """Stack rows of images into one figure.

    rows: list of rows; each row is a list of (H, W, 3) uint8 arrays with
    identical shape. Typical usage: one row of raw frames, one of keypoint
    overlays, one of error-map heatmaps. Returns a PIL image scaled by
    `scale` with nearest-neighbor upsampling.
    """
    if not rows or not rows[0]:
        raise ValueError("need at least one non-empty row")
    n = len(rows[0])
    if any(len(r) != n for r in rows):
        raise ValueError("rows must have equal length")
    strips = [np.concatenate([np.asarray(img) for img in row], axis=1)
              for row in rows]
    canvas = np.concatenate(strips, axis=0)
    img = Image.fromarray(canvas)
    if scale != 1:
        img = img.resize((img.width * scale, img.height * scale),
                         Image.NEAREST)
    return img


def keypoint_figure(frames, centers_per_frame, errmaps=None,
                    scale: int = 2) -> Image.Image:
    """Convenience wrapper: raw frames on top, keypoint overlays below,
    and (optionally) a heatmap row per error-map channel."""
    top = [np.asarray(f) for f in frames]
    mid = [draw_keypoints(f, c) for f, c in zip(frames, centers_per_frame)]
    rows = [top, mid]
    if errmaps is not None:
        errmaps = np.asarray(errmaps)  # (N, M, H, W)
        for m in range(errmaps.shape[1]):
            rows.append([heatmap_to_rgb(errmaps[i, m])
                         for i in range(errmaps.shape[0])])
    return render_overlay(rows, scale=scale)
