"""Procedural scenes: rendering, captions, corruptions, and a quality oracle.

A scene is a colored geometric shape on a colored background, rendered
hard-edged at 32x32 so every clean pixel sits exactly on the color palette.
Corruption blends the render toward a fixed full-strength artifact image
(box blur -> off-palette quantization -> additive Gaussian noise), so the
pixelwise distortion grows linearly with the corruption level.

The quality oracle scores an image by how far its pixels stray from the
palette: exp(-k * mean nearest-palette distance). Sharp boundaries score
high (soft edge pixels fall between palette colors), additive noise and
banding push pixels off palette. Under the blend corruption the score is
strictly decreasing in the level for a fixed noise draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

H, W, CHANNELS = 32, 32, 3

# palette amplitude stays inside the nominal [-1, 1] value range: predictions
# of clean pixels then straddle +-A instead of the clamp boundary, so scoring
# and critic gradients at the boundary stay alive during feedback training
A = 0.8
PALETTE = {
    "red": (A, -A, -A),
    "green": (-A, A, -A),
    "blue": (-A, -A, A),
    "yellow": (A, A, -A),
    "magenta": (A, -A, A),
    "cyan": (-A, A, A),
    "white": (A, A, A),
    "orange": (A, 0.0, -A),
}
COLORS = tuple(PALETTE)
SHAPES = ("square", "circle", "triangle", "cross")
ANCHORS = {
    "center": (0.5, 0.5),
    "upper left": (0.3, 0.3),
    "upper right": (0.3, 0.7),
    "lower left": (0.7, 0.3),
    "lower right": (0.7, 0.7),
}

NOISE_STD = 0.35
BAND_LEVELS = np.array([-1.0, -0.6, -0.2, 0.2, 0.6, 1.0])
ORACLE_SHARPNESS = 3.0


@dataclass(frozen=True)
class SceneAttributes:
    shape: str
    color: str
    background: str
    position: str
    size: float  # shape half-extent as a fraction of image height

    def caption(self) -> str:
        return f"a {self.color} {self.shape} on a {self.background} background"


def sample_scene(rng: np.random.Generator) -> SceneAttributes:
    color = COLORS[rng.integers(0, len(COLORS))]
    background = color
    while background == color:
        background = COLORS[rng.integers(0, len(COLORS))]
    return SceneAttributes(
        shape=SHAPES[rng.integers(0, len(SHAPES))],
        color=color,
        background=background,
        position=list(ANCHORS)[rng.integers(0, len(ANCHORS))],
        size=float(rng.uniform(0.18, 0.32)),
    )


def shape_mask(attrs: SceneAttributes, h: int = H, w: int = W) -> np.ndarray:
    """Binary footprint of the shape, uint8 (h, w). Hard edges, no AA."""
    cy, cx = ANCHORS[attrs.position]
    cy, cx = cy * h, cx * w
    r = attrs.size * h
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    if attrs.shape == "square":
        inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif attrs.shape == "circle":
        inside = dy * dy + dx * dx <= r * r
    elif attrs.shape == "triangle":
        # upright isoceles triangle: apex at cy - r, base at cy + r
        inside = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    elif attrs.shape == "cross":
        arm = r / 3.0
        inside = ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    else:
        raise ValueError(f"unknown shape {attrs.shape!r}")
    return inside.astype(np.uint8)


def render_scene(attrs: SceneAttributes, h: int = H, w: int = W) -> np.ndarray:
    """Render to float32 (3, h, w) in [-1, 1]. Deterministic given attributes."""
    fg = np.array(PALETTE[attrs.color], dtype=np.float32).reshape(3, 1, 1)
    bg = np.array(PALETTE[attrs.background], dtype=np.float32).reshape(3, 1, 1)
    inside = shape_mask(attrs, h, w)[None].astype(np.float32)
    return (inside * fg + (1.0 - inside) * bg).astype(np.float32)


def _box_blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += padded[:, dy : dy + img.shape[1], dx : dx + img.shape[2]]
    return (out / 9.0).astype(img.dtype)


def _quantize(img: np.ndarray) -> np.ndarray:
    idx = np.abs(img[..., None] - BAND_LEVELS).argmin(axis=-1)
    return BAND_LEVELS[idx].astype(img.dtype)


def corrupt_image(image: np.ndarray, level: float, rng_seed) -> np.ndarray:
    """Blend the image toward its full-strength artifact version.

    level 0 returns the image unchanged; level 1 returns
    quantize(blur(image)) + Gaussian noise. Deterministic given the seed,
    and the distortion of every pixel scales linearly with the level.
    """
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"corruption level must be in [0, 1], got {level}")
    rng = np.random.default_rng(rng_seed)
    noise = rng.standard_normal(image.shape).astype(np.float32)
    artifact = _quantize(_box_blur3(image)) + NOISE_STD * noise
    out = image + np.float32(level) * (artifact - image)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


class QualityOracle:
    """Closed-form no-reference scorer for rendered and generated images.

    Score = exp(-sharpness * mean_over_pixels(distance to nearest palette
    color)). A clean hard-edged render scores exactly 1; additive noise,
    banding, and softened boundaries all push pixels off the palette and
    lower the score.
    """

    def __init__(self, sharpness: float = ORACLE_SHARPNESS):
        self.sharpness = sharpness
        # palette at render precision, so clean renders deviate by exactly 0
        self._palette = np.array(list(PALETTE.values()), dtype=np.float32).astype(np.float64)  # (K, 3)

    def palette_deviation(self, image: np.ndarray) -> float:
        """Mean distance from each pixel to its nearest palette color."""
        px = np.asarray(image, dtype=np.float64).reshape(3, -1).T  # (N, 3)
        d2 = ((px[:, None, :] - self._palette[None, :, :]) ** 2).sum(axis=-1)
        return float(np.sqrt(d2.min(axis=1)).mean())

    def score(self, image: np.ndarray) -> float:
        return float(np.exp(-self.sharpness * self.palette_deviation(image)))

    def score_region(self, image: np.ndarray, region: np.ndarray) -> float:
        """Score restricted to pixels where region == 1."""
        sel = np.asarray(region, dtype=bool).reshape(-1)
        if not sel.any():
            raise ValueError("empty region")
        px = np.asarray(image, dtype=np.float64).reshape(3, -1).T[sel]
        d2 = ((px[:, None, :] - self._palette[None, :, :]) ** 2).sum(axis=-1)
        return float(np.exp(-self.sharpness * np.sqrt(d2.min(axis=1)).mean()))


def image_to_png(image: np.ndarray, path) -> None:
    """Save a (3, H, W) image in [-1, 1] as an 8-bit RGB PNG."""
    arr = np.clip(np.rint((image.transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def png_to_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)
