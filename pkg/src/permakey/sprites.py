"""Procedurally generated sprites world with ground-truth instance masks.

A small episodic environment used for desk-scale verification: an agent
sprite collects reward sprites on a static textured background, with
optional moving enemy sprites and an optional constant-velocity colored
bar distractor. The bar cycles predictably, so it is temporally moving
but statistically predictable. `ground_truth()` exposes exact per-sprite
instance masks for metric computation.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import FRAME_HW


class IllegalTransitionError(RuntimeError):
    """step() was called after the episode terminated."""


@dataclass
class SpriteScene:
    """Ground-truth rasterization of the current environment state."""

    frame: np.ndarray  # (84, 84, 3) float32
    instance_masks: list  # per-sprite (84, 84) bool, pairwise disjoint
    distractor_mask: np.ndarray  # (84, 84) bool, all-False when no distractor


@dataclass
class SpritesConfig:
    n_sprites: int = 3  # agent + collectibles/enemies
    n_enemies: int = 0  # moving sprites among the non-agent ones
    size_range: tuple = (10, 16)
    agent_speed: int = 3
    enemy_speed: int = 2
    distractor: bool = False
    distractor_thickness: int = 4
    distractor_color: tuple = (0.25, 0.45, 1.0)
    distractor_speed: int = 3
    max_steps: int = 200
    texture_seed: int = 7  # background is fixed per config, not per episode


_SHAPES = ("circle", "square", "triangle", "diamond")
_COLORS = (
    (0.95, 0.2, 0.2),
    (0.2, 0.9, 0.25),
    (0.95, 0.85, 0.15),
    (0.9, 0.25, 0.9),
    (0.2, 0.85, 0.9),
    (0.98, 0.55, 0.1),
)

ACTIONS = ("noop", "up", "down", "left", "right")
_MOVES = {0: (0, 0), 1: (-1, 0), 2: (1, 0), 3: (0, -1), 4: (0, 1)}


def _stencil(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = size / 2.0
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= r * r
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "diamond":
        return np.abs(yy - c) + np.abs(xx - c) <= r
    if shape == "triangle":
        # upward-pointing, widening with row index
        return np.abs(xx - c) <= (yy + 1) / 2.0
    raise ValueError(f"unknown shape {shape!r}")


def _make_background(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:FRAME_HW, 0:FRAME_HW].astype(np.float64)
    bg = np.zeros((FRAME_HW, FRAME_HW, 3), dtype=np.float32)
    for ch in range(3):
        fy, fx = rng.uniform(1.0, 3.0, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        wave = np.sin(2 * np.pi * fy * yy / FRAME_HW + py) * np.sin(
            2 * np.pi * fx * xx / FRAME_HW + px
        )
        bg[:, :, ch] = 0.18 + 0.07 * wave
    return np.clip(bg, 0.0, 1.0).astype(np.float32)


@dataclass
class _Sprite:
    kind: str  # agent | reward | enemy
    shape: str
    size: int
    color: np.ndarray
    pos: np.ndarray  # (y, x) center, float
    vel: np.ndarray  # (dy, dx) per step, enemies only
    mask: np.ndarray = field(default=None, repr=False)  # cached stencil

    def bbox_overlaps(self, other: "_Sprite") -> bool:
        half = (self.size + other.size) / 2.0
        return (
            abs(self.pos[0] - other.pos[0]) < half
            and abs(self.pos[1] - other.pos[1]) < half
        )


class SpritesEnv:
    """step/reset environment over 84x84 RGB frames.

    Action space: noop/up/down/left/right. Moving onto a reward sprite
    yields +1 and respawns it elsewhere; touching an enemy yields -1 and
    blocks the move. Episodes end after `max_steps` steps.
    """

    def __init__(self, config: SpritesConfig = None, seed: int = 0):
        self.config = config or SpritesConfig()
        self._seed = seed
        self._rng = np.random.default_rng(seed)
        self._background = _make_background(self.config.texture_seed)
        self.n_actions = len(ACTIONS)
        self._sprites = []
        self._t = 0
        self._bar_y = 0
        self._done = True

    # -- episode control ---------------------------------------------------

    def reset(self, seed: int = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        cfg = self.config
        self._sprites = []
        n_enemies = min(cfg.n_enemies, cfg.n_sprites - 1)
        kinds = ["agent"] + ["enemy"] * n_enemies
        kinds += ["reward"] * (cfg.n_sprites - len(kinds))
        for i, kind in enumerate(kinds):
            size = int(self._rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
            shape = _SHAPES[int(self._rng.integers(len(_SHAPES)))]
            color = np.asarray(_COLORS[i % len(_COLORS)], dtype=np.float32)
            sprite = _Sprite(kind, shape, size, color, None, np.zeros(2))
            sprite.mask = _stencil(shape, size)
            self._place(sprite)
            if kind == "enemy":
                angle = self._rng.uniform(0, 2 * np.pi)
                sprite.vel = cfg.enemy_speed * np.array(
                    [np.sin(angle), np.cos(angle)]
                )
            self._sprites.append(sprite)
        self._bar_y = int(self._rng.integers(FRAME_HW))
        self._t = 0
        self._done = False
        return self.render()

    def step(self, action: int):
        if self._done:
            raise IllegalTransitionError("step() called on a finished episode")
        cfg = self.config
        reward = 0.0
        agent = self._sprites[0]
        dy, dx = _MOVES[int(action)]
        new_pos = self._clip_pos(
            agent.pos + cfg.agent_speed * np.array([dy, dx], dtype=float), agent.size
        )
        moved = _Sprite(
            agent.kind, agent.shape, agent.size, agent.color, new_pos, agent.vel
        )
        blocked = False
        for sprite in self._sprites[1:]:
            if moved.bbox_overlaps(sprite):
                if sprite.kind == "reward":
                    reward += 1.0
                    self._respawn(sprite)
                else:
                    reward -= 1.0
                    blocked = True
        if not blocked:
            agent.pos = new_pos
        for sprite in self._sprites[1:]:
            if sprite.kind == "enemy":
                self._move_enemy(sprite)
        self._bar_y = (self._bar_y + cfg.distractor_speed) % FRAME_HW
        self._t += 1
        done = self._t >= cfg.max_steps
        self._done = done
        return self.render(), reward, done

    # -- rendering ---------------------------------------------------------

    def render(self) -> np.ndarray:
        return self.ground_truth().frame

    def ground_truth(self) -> SpriteScene:
        cfg = self.config
        frame = self._background.copy()
        distractor_mask = np.zeros((FRAME_HW, FRAME_HW), dtype=bool)
        if cfg.distractor:
            rows = (self._bar_y + np.arange(cfg.distractor_thickness)) % FRAME_HW
            distractor_mask[rows, :] = True
            frame[distractor_mask] = np.asarray(
                cfg.distractor_color, dtype=np.float32
            )
        covered = np.zeros((FRAME_HW, FRAME_HW), dtype=bool)
        instance_masks = []
        # later sprites draw over earlier ones; keep visible pixels only
        stamps = [self._stamp(s) for s in self._sprites]
        for i, stamp in enumerate(stamps):
            visible = stamp.copy()
            for later in stamps[i + 1 :]:
                visible &= ~later
            instance_masks.append(visible)
        for sprite, stamp in zip(self._sprites, stamps):
            frame[stamp] = sprite.color
            covered |= stamp
        distractor_mask &= ~covered
        return SpriteScene(frame, instance_masks, distractor_mask)

    def _stamp(self, sprite: _Sprite) -> np.ndarray:
        out = np.zeros((FRAME_HW, FRAME_HW), dtype=bool)
        size = sprite.size
        y0 = int(round(sprite.pos[0] - size / 2.0))
        x0 = int(round(sprite.pos[1] - size / 2.0))
        y0 = min(max(y0, 0), FRAME_HW - size)
        x0 = min(max(x0, 0), FRAME_HW - size)
        out[y0 : y0 + size, x0 : x0 + size] = sprite.mask
        return out

    # -- dynamics helpers --------------------------------------------------

    def _clip_pos(self, pos: np.ndarray, size: int) -> np.ndarray:
        half = size / 2.0
        return np.clip(pos, half, FRAME_HW - half)

    def _place(self, sprite: _Sprite):
        half = sprite.size / 2.0
        for _ in range(200):
            pos = self._rng.uniform(half, FRAME_HW - half, size=2)
            sprite.pos = pos
            if not any(sprite.bbox_overlaps(o) for o in self._sprites if o is not sprite):
                return
        raise RuntimeError("could not place sprite without overlap")

    def _respawn(self, sprite: _Sprite):
        self._place(sprite)

    def _move_enemy(self, sprite: _Sprite):
        new_pos = sprite.pos + sprite.vel
        half = sprite.size / 2.0
        for axis in range(2):
            if new_pos[axis] < half or new_pos[axis] > FRAME_HW - half:
                sprite.vel[axis] = -sprite.vel[axis]
        new_pos = self._clip_pos(sprite.pos + sprite.vel, sprite.size)
        trial = _Sprite(
            sprite.kind, sprite.shape, sprite.size, sprite.color, new_pos, sprite.vel
        )
        others = [s for s in self._sprites if s is not sprite]
        if any(trial.bbox_overlaps(o) for o in others):
            sprite.vel = -sprite.vel  # bounce off the blocking sprite
        else:
            sprite.pos = new_pos
