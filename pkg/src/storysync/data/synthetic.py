"""Synthetic story groups: one flat-coloured character in varied scenes.

Every frame of a group shows the same character (shape, colour, size) in a
different textured background and pose, with an exact binary mask of the
character pixels and a prompt of the form
``"<color> <shape> hero <action> in <scene>"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from matplotlib.path import Path as MplPath
from scipy.ndimage import zoom

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (40, 80, 230),
    "yellow": (240, 215, 40),
    "purple": (150, 50, 190),
    "orange": (245, 135, 30),
    "cyan": (40, 210, 220),
    "pink": (245, 125, 190),
    "white": (250, 250, 250),
    "black": (15, 15, 15),
}

SCENES: dict[str, tuple[int, int, int]] = {
    "forest": (40, 90, 50),
    "desert": (205, 175, 120),
    "ocean": (30, 75, 135),
    "snow": (215, 222, 232),
    "night": (22, 26, 62),
    "meadow": (125, 170, 85),
    "city": (115, 115, 128),
    "sunset": (215, 120, 95),
    "cave": (78, 60, 46),
    "beach": (225, 205, 160),
}

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "star", "hexagon")

# action -> (centre x, centre y, rotation in degrees, scale)
ACTIONS: dict[str, tuple[float, float, float, float]] = {
    "standing": (0.5, 0.6, 0.0, 1.0),
    "jumping": (0.5, 0.28, 0.0, 1.0),
    "sitting": (0.5, 0.74, 0.0, 0.85),
    "running": (0.32, 0.6, -20.0, 1.0),
    "flying": (0.68, 0.3, 30.0, 0.9),
    "resting": (0.62, 0.74, 90.0, 0.9),
    "dancing": (0.5, 0.5, 45.0, 1.0),
    "walking": (0.7, 0.62, 10.0, 1.0),
}

MIN_CONTRAST = 110.0


@dataclass(frozen=True)
class IdentitySpec:
    shape: str
    color: str
    size: float = 0.17  # radius as a fraction of the image side

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")

    @property
    def identity_id(self) -> str:
        return f"{self.color}-{self.shape}"

    @property
    def description(self) -> str:
        return f"{self.color} {self.shape} hero"


@dataclass(frozen=True)
class Pose:
    cx: float
    cy: float
    rotation: float
    scale: float


@dataclass
class SyntheticScene:
    identity: IdentitySpec
    scene: str
    action: str
    pose: Pose
    texture_seed: int
    image: np.ndarray = field(repr=False)  # (H, W, 3) uint8
    mask: np.ndarray = field(repr=False)  # (H, W) bool

    @property
    def prompt(self) -> str:
        return f"{self.identity.description} {self.action} in {self.scene}"


def _unit_polygon(shape: str) -> np.ndarray:
    if shape == "square":
        return np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], float) * 0.85
    if shape == "triangle":
        a = np.deg2rad([90, 210, 330])
        return np.stack([np.cos(a), -np.sin(a)], 1)
    if shape == "diamond":
        return np.array([[0, -1], [0.75, 0], [0, 1], [-0.75, 0]], float)
    if shape == "cross":
        w = 0.35
        return np.array([[-w, -1], [w, -1], [w, -w], [1, -w], [1, w], [w, w], [w, 1], [-w, 1],
                         [-w, w], [-1, w], [-1, -w], [-w, -w]], float)
    if shape == "star":
        a = np.deg2rad(np.arange(10) * 36 - 90)
        r = np.where(np.arange(10) % 2 == 0, 1.0, 0.45)
        return np.stack([r * np.cos(a), r * np.sin(a)], 1)
    if shape == "hexagon":
        a = np.deg2rad(np.arange(6) * 60)
        return np.stack([np.cos(a), np.sin(a)], 1)
    raise ValueError(shape)


def rasterize_character(identity: IdentitySpec, pose: Pose, size: int) -> np.ndarray:
    """Exact boolean mask of the character, sampled at pixel centres."""
    ys, xs = np.mgrid[0:size, 0:size].astype(float) + 0.5
    radius = identity.size * pose.scale * size
    x = (xs - pose.cx * size) / radius
    y = (ys - pose.cy * size) / radius
    th = np.deg2rad(pose.rotation)
    # rotate sample points by -rotation into the shape frame
    u = np.cos(th) * x + np.sin(th) * y
    v = -np.sin(th) * x + np.cos(th) * y
    if identity.shape == "circle":
        return u * u + v * v <= 1.0
    path = MplPath(_unit_polygon(identity.shape))
    inside = path.contains_points(np.stack([u.ravel(), v.ravel()], 1), radius=0.0)
    return inside.reshape(size, size)


def render_background(scene: str, size: int, rng: np.random.Generator) -> np.ndarray:
    base = np.array(SCENES[scene], float)
    grad = np.linspace(-18, 18, size)[:, None, None] * rng.choice([-1, 1])
    coarse = rng.normal(0, 14, (6, 6, 3))
    tex = zoom(coarse, (size / 6, size / 6, 1), order=1)
    fine = rng.normal(0, 4, (size, size, 3))
    img = base[None, None] + grad + tex + fine
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def compatible_scenes(identity: IdentitySpec) -> list[str]:
    c = np.array(COLORS[identity.color], float)
    return [s for s, rgb in SCENES.items() if np.linalg.norm(c - np.array(rgb, float)) >= MIN_CONTRAST]


def render_scene(identity: IdentitySpec, scene: str, action: str, size: int,
                 rng: np.random.Generator) -> SyntheticScene:
    cx, cy, rot, scale = ACTIONS[action]
    pose = Pose(cx + rng.uniform(-0.06, 0.06), cy + rng.uniform(-0.05, 0.05),
                rot + rng.uniform(-8, 8), scale * rng.uniform(0.92, 1.08))
    tex_seed = int(rng.integers(2**31))
    image = render_background(scene, size, np.random.default_rng(tex_seed))
    mask = rasterize_character(identity, pose, size)
    image[mask] = COLORS[identity.color]
    return SyntheticScene(identity, scene, action, pose, tex_seed, image, mask)


def identity_pool(seed: int = 0, count: int | None = None) -> list[IdentitySpec]:
    """All colour/shape identities in a seeded order."""
    specs = [IdentitySpec(shape, color) for color in COLORS for shape in SHAPES]
    order = np.random.default_rng(seed).permutation(len(specs))
    specs = [specs[i] for i in order]
    return specs if count is None else specs[:count]
