"""Frame collection, dataset splits, storage, and distractor augmentation."""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

FRAME_HW = 84
FRAME_SHAPE = (FRAME_HW, FRAME_HW, 3)


class CollectionExhaustedError(RuntimeError):
    """Environment stopped producing frames before the requested count."""


class SplitSizeError(ValueError):
    """Requested split sizes exceed the dataset size."""


def as_frame(pixels) -> np.ndarray:
    """Coerce an observation to a float32 84x84x3 frame in [0, 1].

    uint8 inputs are rescaled by 1/255; other sizes are resized bilinearly.
    """
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 observation, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    if arr.shape[:2] != (FRAME_HW, FRAME_HW):
        img = Image.fromarray((np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8))
        img = img.resize((FRAME_HW, FRAME_HW), Image.BILINEAR)
        arr = np.asarray(img).astype(np.float32) / 255.0
    return np.clip(arr, 0.0, 1.0)


def validate_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float32)
    if frame.shape != FRAME_SHAPE:
        raise ValueError(f"frame shape {frame.shape} != {FRAME_SHAPE}")
    if frame.min() < 0.0 or frame.max() > 1.0:
        raise ValueError("frame values outside [0, 1]")
    return frame


@dataclass
class FrameDataset:
    """An ordered collection of frames belonging to one split."""

    frames: np.ndarray  # (N, 84, 84, 3) float32 in [0, 1]
    split: str = "train"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[1:] != FRAME_SHAPE:
            raise ValueError(f"bad frames array shape {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, idx):
        return self.frames[idx]


def random_policy(rng: np.random.Generator, n_actions: int):
    def policy(obs):
        return int(rng.integers(n_actions))

    return policy


def collect_frames(env, policy, n_frames: int, split: str = "train") -> FrameDataset:
    """Roll out `policy` in `env`, recording every observation.

    Episodes are restarted on `done`. Raises CollectionExhaustedError if the
    environment refuses to reset before n_frames are gathered.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    frames = np.empty((n_frames,) + FRAME_SHAPE, dtype=np.float32)
    try:
        obs = env.reset()
    except StopIteration as e:
        raise CollectionExhaustedError("environment exhausted at reset") from e
    count = 0
    while count < n_frames:
        frames[count] = as_frame(obs)
        count += 1
        if count == n_frames:
            break
        obs, _reward, done = env.step(policy(obs))[:3]
        if done:
            try:
                obs = env.reset()
            except StopIteration as e:
                raise CollectionExhaustedError(
                    f"environment exhausted after {count} frames"
                ) from e
    return FrameDataset(frames, split=split)


# Default split sizes used when the source has at least 95k frames.
DEFAULT_SPLIT_SIZES = (85000, 5000, 5000)


def split_dataset(ds: FrameDataset, sizes=None):
    """Partition a dataset into disjoint contiguous train/val/test splits."""
    if sizes is None:
        if len(ds) >= sum(DEFAULT_SPLIT_SIZES):
            sizes = DEFAULT_SPLIT_SIZES
        else:
            raise SplitSizeError("dataset too small for default split sizes")
    n_train, n_val, n_test = sizes
    if n_train + n_val + n_test > len(ds):
        raise SplitSizeError(
            f"requested {n_train + n_val + n_test} frames from dataset of {len(ds)}"
        )
    a, b = n_train, n_train + n_val
    c = b + n_test
    return (
        FrameDataset(ds.frames[:a].copy(), split="train"),
        FrameDataset(ds.frames[a:b].copy(), split="val"),
        FrameDataset(ds.frames[b:c].copy(), split="test"),
    )


@dataclass
class DistractorSpec:
    """Colored-bar augmentation superimposed at a random position."""

    mode: str = "horizontal"  # horizontal | vertical | both
    bar_thickness: int = 4
    color: tuple = (1.0, 1.0, 1.0)
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("horizontal", "vertical", "both"):
            raise ValueError(f"bad distractor mode {self.mode!r}")
        if self.bar_thickness < 1:
            raise ValueError("bar thickness must be >= 1")


def _band(center: int, thickness: int, size: int):
    lo = max(0, center - thickness // 2)
    hi = min(size, lo + thickness)
    lo = max(0, hi - thickness)
    return lo, hi


def apply_distractor(frame: np.ndarray, spec: DistractorSpec, rng: np.random.Generator):
    """Overwrite one (or two) full-extent bars with spec.color.

    Returns the augmented frame and the binary mask of overwritten pixels.
    Pixels outside the mask are exactly equal to the input.
    """
    frame = validate_frame(frame)
    out = frame.copy()
    mask = np.zeros((FRAME_HW, FRAME_HW), dtype=bool)
    color = np.asarray(spec.color, dtype=np.float32)
    if spec.mode in ("horizontal", "both"):
        cy = int(rng.integers(FRAME_HW))
        lo, hi = _band(cy, spec.bar_thickness, FRAME_HW)
        mask[lo:hi, :] = True
    if spec.mode in ("vertical", "both"):
        cx = int(rng.integers(FRAME_HW))
        lo, hi = _band(cx, spec.bar_thickness, FRAME_HW)
        mask[:, lo:hi] = True
    out[mask] = color
    return out, mask


def save_split(ds: FrameDataset, out_dir: str):
    """Write `<out_dir>/<split>/frames.bin` (raw uint8) plus meta.json."""
    split_dir = os.path.join(out_dir, ds.split)
    os.makedirs(split_dir, exist_ok=True)
    raw = (np.clip(ds.frames, 0.0, 1.0) * 255).round().astype(np.uint8)
    raw.tofile(os.path.join(split_dir, "frames.bin"))
    meta = {
        "split": ds.split,
        "n_frames": len(ds),
        "height": FRAME_HW,
        "width": FRAME_HW,
        "channels": 3,
        "dtype": "uint8",
    }
    with open(os.path.join(split_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2)


def load_split(out_dir: str, split: str) -> FrameDataset:
    split_dir = os.path.join(out_dir, split)
    with open(os.path.join(split_dir, "meta.json")) as f:
        meta = json.load(f)
    shape = (meta["n_frames"], meta["height"], meta["width"], meta["channels"])
    raw = np.fromfile(os.path.join(split_dir, "frames.bin"), dtype=np.uint8)
    raw = raw.reshape(shape)
    return FrameDataset(raw.astype(np.float32) / 255.0, split=split)
