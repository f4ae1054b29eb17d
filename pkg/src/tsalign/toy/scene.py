"""Synthetic moving-shape videos used as training data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneObject:
    kind: str  # "square" or "disc"
    size: float  # side length or diameter, pixels
    position: tuple  # initial centroid (x, y), pixels
    velocity: tuple  # (vx, vy), pixels per frame
    color: tuple  # RGB in [0, 1]


@dataclass(frozen=True)
class SyntheticScene:
    objects: tuple
    frames: int = 8
    height: int = 16
    width: int = 16
    bounce: bool = True
    background: tuple = (0.1, 0.1, 0.1)
    noise: float = 0.0
    seed: int = 0
    label: int = 0


def reflect(start: float, velocity: float, t, lo: float, hi: float):
    """Position after ``t`` frames of motion bouncing elastically inside [lo, hi]."""
    span = hi - lo
    if span <= 0:
        return np.full(np.shape(t), lo, dtype=float)
    u = np.mod(start - lo + velocity * np.asarray(t, dtype=float), 2 * span)
    return lo + np.where(u > span, 2 * span - u, u)


def centroid_track(obj: SceneObject, scene: SyntheticScene) -> np.ndarray:
    """Centroid (x, y) of ``obj`` for every frame, shape [frames, 2]."""
    t = np.arange(scene.frames)
    half = obj.size / 2
    if scene.bounce:
        x = reflect(obj.position[0], obj.velocity[0], t, half, scene.width - half)
        y = reflect(obj.position[1], obj.velocity[1], t, half, scene.height - half)
    else:
        x = obj.position[0] + obj.velocity[0] * t
        y = obj.position[1] + obj.velocity[1] * t
    return np.stack([x, y], axis=1)


def _coverage(obj: SceneObject, cx: float, cy: float, height: int, width: int) -> np.ndarray:
    half = obj.size / 2
    if obj.kind == "square":
        # exact box-filter coverage of each unit pixel
        xs = np.arange(width)
        ys = np.arange(height)
        ox = np.clip(np.minimum(xs + 1, cx + half) - np.maximum(xs, cx - half), 0, 1)
        oy = np.clip(np.minimum(ys + 1, cy + half) - np.maximum(ys, cy - half), 0, 1)
        return oy[:, None] * ox[None, :]
    if obj.kind == "disc":
        s = SUPERSAMPLE
        sub = (np.arange(s) + 0.5) / s
        px = (np.arange(width)[:, None] + sub[None, :]).reshape(-1)
        py = (np.arange(height)[:, None] + sub[None, :]).reshape(-1)
        inside = (px[None, :] - cx) ** 2 + (py[:, None] - cy) ** 2 <= half * half
        return inside.reshape(height, s, width, s).mean(axis=(1, 3))
    raise ValueError(f"unknown object kind {obj.kind!r}")


def generate_scene(scene: SyntheticScene) -> np.ndarray:
    """Render ``scene`` to a float video [F', H', W', 3] in [0, 1]."""
    for obj in scene.objects:
        if obj.size > min(scene.height, scene.width) or obj.size <= 0:
            raise ValueError(
                f"object of size {obj.size} does not fit a {scene.height}x{scene.width} frame"
            )
    video = np.empty((scene.frames, scene.height, scene.width, 3))
    video[:] = np.asarray(scene.background, dtype=float)
    if scene.noise > 0:
        rng = np.random.default_rng(scene.seed)
        video += scene.noise * rng.standard_normal(video.shape)
    for obj in scene.objects:
        color = np.asarray(obj.color, dtype=float)
        track = centroid_track(obj, scene)
        for f in range(scene.frames):
            cov = _coverage(obj, track[f, 0], track[f, 1], scene.height, scene.width)[..., None]
            video[f] = (1 - cov) * video[f] + cov * color
    return np.clip(video, 0.0, 1.0)


def random_scene(rng: np.random.Generator, *, frames: int, height: int, width: int,
                 n_objects: int = 1, bounce: bool = True, label: int = 0) -> SyntheticScene:
    """Draw a scene of squares/discs with random size, colour and velocity."""
    objs = []
    for _ in range(n_objects):
        size = float(rng.integers(3, max(4, min(height, width) // 3) + 1))
        half = size / 2
        pos = (float(rng.uniform(half, width - half)), float(rng.uniform(half, height - half)))
        speed = rng.choice([-2.0, -1.0, 1.0, 2.0], size=2)
        if rng.random() < 0.3:
            speed[rng.integers(2)] = 0.0
        color = tuple(float(c) for c in rng.uniform(0.4, 1.0, size=3))
        kind = "square" if rng.random() < 0.6 else "disc"
        objs.append(SceneObject(kind, size, pos, (float(speed[0]), float(speed[1])), color))
    bg = tuple(float(c) for c in rng.uniform(0.0, 0.25, size=3))
    return SyntheticScene(tuple(objs), frames, height, width, bounce, bg,
                          seed=int(rng.integers(2**31)), label=label)


def make_dataset(n_scenes: int, *, frames: int, height: int, width: int, n_objects: int = 1,
                 bounce: bool = True, seed: int = 0):
    """``n_scenes`` scenes and their videos; scene i has class label i."""
    rng = np.random.default_rng(seed)
    scenes = [random_scene(rng, frames=frames, height=height, width=width,
                           n_objects=n_objects, bounce=bounce, label=i)
              for i in range(n_scenes)]
    return scenes, [generate_scene(s) for s in scenes]
