"""Training-mask generation.

Four mask families cover the editing tasks: global (whole image), irregular
(thick strokes and blobs), square (one rectangle), and outward (a border
frame around a kept interior window, the outpainting setup). A policy mixes
them by probability. Instance masks can be coarsened by dilation plus a
random surrounding blob for erase-style training.

Masks are uint8 arrays of shape (H, W) with values {0, 1}; 1 marks the
region to generate. All sampling is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

MASK_KINDS = ("global", "irregular", "square", "outward")


@dataclass(frozen=True)
class MaskPolicy:
    """Mixture over mask kinds plus per-kind coverage parameters."""

    p_global: float = 0.1
    p_irregular: float = 0.3
    p_square: float = 0.3
    p_outward: float = 0.3
    square_coverage: tuple[float, float] = (0.1, 0.5)
    irregular_coverage: tuple[float, float] = (0.1, 0.4)
    outward_keep: tuple[float, float] = (0.25, 0.6)

    def __post_init__(self):
        probs = self.probs()
        if any(p < 0 for p in probs):
            raise ValueError("mask policy probabilities must be >= 0")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"mask policy probabilities must sum to 1, got {sum(probs)}")

    def probs(self) -> tuple[float, float, float, float]:
        return (self.p_global, self.p_irregular, self.p_square, self.p_outward)

    def coverage_range(self, kind: str) -> tuple[float, float]:
        rng = {
            "global": (1.0, 1.0),
            "irregular": self.irregular_coverage,
            "square": self.square_coverage,
            "outward": self.outward_keep,
        }[kind]
        lo, hi = rng
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"empty or invalid coverage range for {kind}: {rng}")
        return rng


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _disk(radius: int) -> np.ndarray:
    if radius == 0:
        return np.ones((1, 1), dtype=bool)
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def _stamp_disk(mask: np.ndarray, cy: int, cx: int, radius: int) -> None:
    h, w = mask.shape
    y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
    x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
    disk = _disk(radius)
    mask[y0:y1, x0:x1] |= disk[y0 - (cy - radius) : y1 - (cy - radius), x0 - (cx - radius) : x1 - (cx - radius)]


def _irregular_mask(h: int, w: int, target: float, rng: np.random.Generator) -> np.ndarray:
    """Union of random thick polylines and elliptical blobs.

    Coarse strokes take coverage near the target, then single-pixel-radius
    stamps top it up so the final coverage lands within +-10% (relative) of
    the requested fraction.
    """
    mask = np.zeros((h, w), dtype=bool)
    total = h * w
    target_px = target * total
    max_radius = max(1, int(round(min(h, w) * np.sqrt(target) / 6)))
    for _ in range(int(rng.integers(1, 9))):
        if mask.sum() >= 0.85 * target_px:
            break
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
        radius = int(rng.integers(1, max_radius + 1))
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(int(rng.integers(4, 16))):
            if mask.sum() >= 0.95 * target_px:
                break
            _stamp_disk(mask, cy, cx, radius)
            angle += rng.uniform(-0.7, 0.7)
            step = max(1, radius)
            cy = int(np.clip(cy + round(np.sin(angle) * step), 0, h - 1))
            cx = int(np.clip(cx + round(np.cos(angle) * step), 0, w - 1))
    # fine top-up with small stamps until inside the band
    for _ in range(10 * total):
        if mask.sum() >= 0.9 * target_px:
            break
        _stamp_disk(mask, int(rng.integers(0, h)), int(rng.integers(0, w)), 1)
    while mask.sum() < max(1, int(round(0.9 * target_px))):
        mask[rng.integers(0, h), rng.integers(0, w)] = True
    return mask


def _square_mask(h: int, w: int, coverage: float, rng: np.random.Generator) -> np.ndarray:
    area = coverage * h * w
    aspect = rng.uniform(0.6, 1.6)
    mh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
    mw = int(np.clip(round(area / mh), 1, w))
    y0 = int(rng.integers(0, h - mh + 1))
    x0 = int(rng.integers(0, w - mw + 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[y0 : y0 + mh, x0 : x0 + mw] = True
    return mask


def _outward_mask(h: int, w: int, keep_frac: float, rng: np.random.Generator) -> np.ndarray:
    """Ones on a border frame, zeros in a kept interior window.

    The window may touch a subset of the image edges (expanding only some
    sides), but never all four at once.
    """
    kh = int(np.clip(round(h * np.sqrt(keep_frac)), 1, h - 1))
    kw = int(np.clip(round(w * np.sqrt(keep_frac)), 1, w - 1))
    anchor = rng.integers(0, 5)  # 0 = centered, 1..4 = flush against one edge
    y0 = (h - kh) // 2
    x0 = (w - kw) // 2
    if anchor == 1:
        y0 = 0
    elif anchor == 2:
        y0 = h - kh
    elif anchor == 3:
        x0 = 0
    elif anchor == 4:
        x0 = w - kw
    mask = np.ones((h, w), dtype=bool)
    mask[y0 : y0 + kh, x0 : x0 + kw] = False
    return mask


def sample_mask(kind: str, h: int, w: int, coverage_range: tuple[float, float], rng_seed) -> np.ndarray:
    """Draw one mask of the given kind. Deterministic given the seed."""
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}")
    lo, hi = coverage_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"empty or invalid coverage range ({lo}, {hi})")
    rng = _rng(rng_seed)
    if kind == "global":
        return np.ones((h, w), dtype=np.uint8)
    size = rng.uniform(lo, hi)
    if kind == "square":
        mask = _square_mask(h, w, size, rng)
    elif kind == "irregular":
        mask = _irregular_mask(h, w, size, rng)
    else:
        mask = _outward_mask(h, w, size, rng)
    return mask.astype(np.uint8)


def dilate_instance_mask(instance: np.ndarray, radius: int, rng_seed, element: str = "disk") -> np.ndarray:
    """Coarsen an instance mask: dilate, then union a random surrounding blob.

    The result is always a superset of the input.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if instance.ndim != 2:
        raise ValueError(f"instance mask must be 2-D, got shape {instance.shape}")
    mask = instance.astype(bool)
    if radius > 0:
        struct = _disk(radius) if element == "disk" else np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
        mask = ndimage.binary_dilation(mask, structure=struct)
    rng = _rng(rng_seed)
    out = mask.copy()
    ys, xs = np.nonzero(mask)
    if ys.size > 0:
        n_blobs = int(rng.integers(0, 4))
        for _ in range(n_blobs):
            i = int(rng.integers(0, ys.size))
            jitter = int(rng.integers(0, max(2, radius + 2)))
            cy = int(np.clip(ys[i] + rng.integers(-jitter, jitter + 1), 0, mask.shape[0] - 1))
            cx = int(np.clip(xs[i] + rng.integers(-jitter, jitter + 1), 0, mask.shape[1] - 1))
            _stamp_disk(out, cy, cx, int(rng.integers(1, max(2, radius + 1))))
    return out.astype(np.uint8)


def sample_training_mask(policy: MaskPolicy, h: int, w: int, rng_seed) -> tuple[np.ndarray, str]:
    """Draw (mask, kind) with kind chosen by the policy probabilities."""
    rng = _rng(rng_seed)
    kind = rng.choice(MASK_KINDS, p=policy.probs())
    kind = str(kind)
    mask = sample_mask(kind, h, w, policy.coverage_range(kind), rng.integers(0, 2**63 - 1))
    return mask, kind


def save_mask_png(mask: np.ndarray, path) -> None:
    """Masks serialize as 1-bit PNG: 0 = keep, 255 = generate."""
    img = Image.fromarray((mask.astype(np.uint8) * 255)).convert("1")
    img.save(path)


def load_mask_png(path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return (np.asarray(img) > 127).astype(np.uint8)
