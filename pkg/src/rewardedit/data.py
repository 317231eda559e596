"""Feedback-data curation: prompt encoding, diversity selection, and the
construction of the preference, alignment, and fine-tuning datasets from
synthetic oracles.

All builders are deterministic given their seed: record i derives its own
RNG from (seed, i), so datasets can be sharded across workers by index and
concatenate to the single-worker result.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans

from .masking import MaskPolicy, sample_training_mask, save_mask_png
from .scenes import (
    COLORS,
    SHAPES,
    ANCHORS,
    H,
    W,
    QualityOracle,
    SceneAttributes,
    corrupt_image,
    image_to_png,
    png_to_image,
    render_scene,
    sample_scene,
)

PROMPT_DIM = 32
_HASHES_PER_TOKEN = 4

# words that carry no scene content; excluded when measuring how decorative
# a caption is
FUNCTION_WORDS = frozenset({"a", "an", "the", "on", "in", "of", "with", "and", "is", "are"})

DEFAULT_STOPLIST = ("fantastic", "brilliant", "unbelievable", "amazing", "stunning", "incredible")


def _derive_seed(*parts) -> int:
    h = hashlib.blake2s(":".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") % (2**63 - 1)


class TextEncoder:
    """Deterministic bag-of-tokens hashing encoder.

    Each token maps to a few signed coordinates of a fixed-dimension vector
    (feature hashing); a caption is the L2-normalized sum over its tokens.
    Same text always gives the same embedding, across processes. The empty
    caption encodes to the zero vector (the null prompt).
    """

    def __init__(self, dim: int = PROMPT_DIM):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for i in range(_HASHES_PER_TOKEN):
            digest = hashlib.blake2s(f"{token}\x00{i}".encode(), digest_size=8).digest()
            val = int.from_bytes(digest, "little")
            idx = val % self.dim
            sign = 1.0 if (val >> 40) & 1 else -1.0
            vec[idx] += sign
        return vec

    def encode(self, caption: str) -> np.ndarray:
        """Unit-norm float32 vector; zeros for the empty caption."""
        cached = self._cache.get(caption)
        if cached is not None:
            return cached
        tokens = caption.lower().split()
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            vec += self._token_vector(tok)
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        out = vec.astype(np.float32)
        self._cache[caption] = out
        return out

    def encode_batch(self, captions: list[str]) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.encode(c) for c in captions]))


def cluster_and_select(
    embeddings: np.ndarray,
    k_clusters: int,
    k_nn: int,
    n_select: int,
    rng_seed: int = 0,
    return_details: bool = False,
):
    """Pick the n_select most isolated points of an embedding set.

    K-means (fixed seed, capped iterations) organizes the set into clusters
    for diagnostics; points are then ranked by mean distance to their k_nn
    nearest neighbors and the most isolated ones are returned, ties broken
    by index.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    n = emb.shape[0]
    if n_select > n:
        raise ValueError(f"n_select={n_select} exceeds population {n}")
    if k_nn >= n:
        raise ValueError(f"k_nn={k_nn} must be smaller than population {n}")
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")

    degenerate = bool(np.all(emb == emb[0]))
    if degenerate:
        warnings.warn("cluster_and_select: all points identical; selection is arbitrary")
        labels = np.zeros(n, dtype=int)
        mean_knn = np.zeros(n)
        indices = np.arange(n_select)
    else:
        k = min(k_clusters, n)
        km = KMeans(n_clusters=k, random_state=rng_seed, n_init=10, max_iter=100)
        labels = km.fit_predict(emb)
        dists = cdist(emb, emb)
        np.fill_diagonal(dists, np.inf)
        knn = np.partition(dists, k_nn - 1, axis=1)[:, :k_nn]
        mean_knn = knn.mean(axis=1)
        indices = np.argsort(-mean_knn, kind="stable")[:n_select]
    indices = np.asarray(indices, dtype=int)
    if return_details:
        return indices, labels, mean_knn
    return indices


def is_decorative(caption: str, stoplist, threshold: float = 0.5) -> bool:
    """True when more than `threshold` of the caption's content words
    (function words excluded) appear in the stoplist, or when it has no
    content words at all."""
    if not stoplist:
        raise ValueError("stoplist must be non-empty")
    stop = {s.lower() for s in stoplist}
    content = [t for t in caption.lower().split() if t not in FUNCTION_WORDS]
    if not content:
        return True
    return sum(t in stop for t in content) / len(content) > threshold


def filter_decorative(captions: list[str], stoplist, threshold: float = 0.5) -> list[str]:
    """Drop captions dominated by decorative filler words."""
    return [c for c in captions if not is_decorative(c, stoplist, threshold)]


@dataclass
class PreferenceTriplet:
    """(caption, preferred image, non-preferred image) plus provenance."""

    caption: str
    x_p: np.ndarray
    x_n: np.ndarray
    attrs: SceneAttributes
    level_p: float
    level_n: float


@dataclass
class AlignTriplet:
    """(true caption, perturbed caption, image)."""

    c_p: str
    c_n: str
    image: np.ndarray
    attrs: SceneAttributes
    swapped: str


def _swap_attribute(attrs: SceneAttributes, rng: np.random.Generator) -> tuple[str, str]:
    """Wrong caption differing from the truth in exactly one attribute."""
    which = ("color", "shape", "background")[rng.integers(0, 3)]
    if which == "shape":
        alts = [s for s in SHAPES if s != attrs.shape]
        wrong = SceneAttributes(
            shape=alts[rng.integers(0, len(alts))],
            color=attrs.color,
            background=attrs.background,
            position=attrs.position,
            size=attrs.size,
        )
    elif which == "color":
        alts = [c for c in COLORS if c != attrs.color]
        wrong = SceneAttributes(
            shape=attrs.shape,
            color=alts[rng.integers(0, len(alts))],
            background=attrs.background,
            position=attrs.position,
            size=attrs.size,
        )
    else:
        alts = [c for c in COLORS if c != attrs.background]
        wrong = SceneAttributes(
            shape=attrs.shape,
            color=attrs.color,
            background=alts[rng.integers(0, len(alts))],
            position=attrs.position,
            size=attrs.size,
        )
    return wrong.caption(), which


def _aes_triplet_range(args) -> tuple[list[PreferenceTriplet], int]:
    lo, hi, rng_seed, variants_per_prompt, level_range, sharpness = args
    oracle = QualityOracle(sharpness)
    triplets: list[PreferenceTriplet] = []
    skipped = 0
    for i in range(lo, hi):
        rng = np.random.default_rng(_derive_seed(rng_seed, "aes", i))
        attrs = sample_scene(rng)
        clean = render_scene(attrs)
        images = [clean]
        levels = [0.0]
        for v in range(variants_per_prompt - 1):
            lvl = float(rng.uniform(*level_range))
            images.append(corrupt_image(clean, lvl, _derive_seed(rng_seed, "aes", i, "noise", v)))
            levels.append(lvl)
        scores = [oracle.score(img) for img in images]
        best, worst = int(np.argmax(scores)), int(np.argmin(scores))
        if scores[best] == scores[worst]:
            skipped += 1
            continue
        triplets.append(
            PreferenceTriplet(
                caption=attrs.caption(),
                x_p=images[best],
                x_n=images[worst],
                attrs=attrs,
                level_p=levels[best],
                level_n=levels[worst],
            )
        )
    return triplets, skipped


def build_aesthetic_triplets(
    n_prompts: int,
    oracle: QualityOracle,
    rng_seed: int,
    variants_per_prompt: int = 4,
    level_range: tuple[float, float] = (0.15, 1.0),
    workers: int = 1,
) -> tuple[list[PreferenceTriplet], int]:
    """One triplet per prompt: best and worst of a small variant set.

    Each prompt renders one clean image plus corrupted variants at random
    levels; the oracle picks the preferred and non-preferred variant.
    Prompts whose oracle scores tie are skipped and counted. Record i seeds
    its own RNG, so sharding across workers changes nothing in the output.
    """
    if variants_per_prompt < 2:
        raise ValueError("variants_per_prompt must be >= 2")
    if workers <= 1 or n_prompts < 64:
        return _aes_triplet_range((0, n_prompts, rng_seed, variants_per_prompt, level_range, oracle.sharpness))
    from concurrent.futures import ProcessPoolExecutor

    bounds = np.linspace(0, n_prompts, workers + 1).astype(int)
    jobs = [
        (int(lo), int(hi), rng_seed, variants_per_prompt, level_range, oracle.sharpness)
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]
    triplets: list[PreferenceTriplet] = []
    skipped = 0
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part, part_skipped in pool.map(_aes_triplet_range, jobs):
            triplets.extend(part)
            skipped += part_skipped
    return triplets, skipped


def build_align_triplets(n_scenes: int, rng_seed: int) -> list[AlignTriplet]:
    """True caption vs single-attribute-swapped caption for each scene."""
    out: list[AlignTriplet] = []
    for i in range(n_scenes):
        rng = np.random.default_rng(_derive_seed(rng_seed, "align", i))
        attrs = sample_scene(rng)
        c_n, which = _swap_attribute(attrs, rng)
        out.append(AlignTriplet(c_p=attrs.caption(), c_n=c_n, image=render_scene(attrs), attrs=attrs, swapped=which))
    return out


def build_scenes(n_scenes: int, rng_seed: int) -> list[SceneAttributes]:
    return [sample_scene(np.random.default_rng(_derive_seed(rng_seed, "scene", i))) for i in range(n_scenes)]


@dataclass
class TrainBatch:
    x: torch.Tensor  # (B, 3, H, W)
    m: torch.Tensor  # (B, 1, H, W), values {0, 1}
    c: torch.Tensor  # (B, d_c)
    captions: list[str]
    kinds: list[str]
    attrs: list[SceneAttributes] = field(default_factory=list)


def build_train_batch(
    scenes: list[SceneAttributes],
    policy: MaskPolicy,
    rng_seed: int,
    encoder: TextEncoder | None = None,
) -> TrainBatch:
    """Render scenes, draw one training mask each, encode the captions."""
    encoder = encoder or TextEncoder()
    xs, ms, kinds, captions, attrs = [], [], [], [], []
    for i, scene in enumerate(scenes):
        xs.append(render_scene(scene))
        mask, kind = sample_training_mask(policy, H, W, _derive_seed(rng_seed, "mask", i))
        ms.append(mask[None].astype(np.float32))
        kinds.append(kind)
        captions.append(scene.caption())
        attrs.append(scene)
    return TrainBatch(
        x=torch.from_numpy(np.stack(xs)),
        m=torch.from_numpy(np.stack(ms)),
        c=encoder.encode_batch(captions),
        captions=captions,
        kinds=kinds,
        attrs=attrs,
    )


# ---------------------------------------------------------------------------
# dataset persistence: PNG images plus one JSONL manifest
# ---------------------------------------------------------------------------


def _attrs_to_dict(attrs: SceneAttributes) -> dict:
    return {
        "shape": attrs.shape,
        "color": attrs.color,
        "background": attrs.background,
        "position": attrs.position,
        "size": attrs.size,
    }


def _attrs_from_dict(d: dict) -> SceneAttributes:
    return SceneAttributes(
        shape=d["shape"], color=d["color"], background=d["background"], position=d["position"], size=d["size"]
    )


def _manifest_line(row: dict) -> str:
    base = {"caption": None, "attributes": None, "corruption_level": None, "mask_file": None}
    base.update(row)
    return json.dumps(base, sort_keys=True)


def write_datasets(
    out_dir: Path,
    train_scenes: list[SceneAttributes],
    aes_triplets: list[PreferenceTriplet],
    align_triplets: list[AlignTriplet],
    policy: MaskPolicy,
    rng_seed: int,
    eval_scenes: list[SceneAttributes] = (),
) -> Path:
    """Materialize all datasets under out_dir; returns the manifest path."""
    out_dir = Path(out_dir)
    rows: list[str] = []
    train_dir = out_dir / "train"
    aes_dir = out_dir / "aes"
    align_dir = out_dir / "align"
    eval_dir = out_dir / "eval"
    for d in (train_dir, aes_dir, align_dir, eval_dir):
        d.mkdir(parents=True, exist_ok=True)

    for i, attrs in enumerate(train_scenes):
        img_file = f"train/img_{i:05d}.png"
        mask_file = f"train/mask_{i:05d}.png"
        image_to_png(render_scene(attrs), out_dir / img_file)
        mask, kind = sample_training_mask(policy, H, W, _derive_seed(rng_seed, "mask", i))
        save_mask_png(mask, out_dir / mask_file)
        rows.append(
            _manifest_line(
                {
                    "split": "train",
                    "index": i,
                    "image_file": img_file,
                    "mask_file": mask_file,
                    "mask_kind": kind,
                    "caption": attrs.caption(),
                    "attributes": _attrs_to_dict(attrs),
                }
            )
        )

    for i, trip in enumerate(aes_triplets):
        for role, img, lvl in (("preferred", trip.x_p, trip.level_p), ("rejected", trip.x_n, trip.level_n)):
            img_file = f"aes/t{i:05d}_{role}.png"
            image_to_png(img, out_dir / img_file)
            rows.append(
                _manifest_line(
                    {
                        "split": "aes",
                        "index": i,
                        "role": role,
                        "image_file": img_file,
                        "caption": trip.caption,
                        "attributes": _attrs_to_dict(trip.attrs),
                        "corruption_level": lvl,
                    }
                )
            )

    for i, trip in enumerate(align_triplets):
        img_file = f"align/img_{i:05d}.png"
        image_to_png(trip.image, out_dir / img_file)
        rows.append(
            _manifest_line(
                {
                    "split": "align",
                    "index": i,
                    "image_file": img_file,
                    "caption": trip.c_p,
                    "caption_negative": trip.c_n,
                    "swapped": trip.swapped,
                    "attributes": _attrs_to_dict(trip.attrs),
                }
            )
        )

    for i, attrs in enumerate(eval_scenes):
        img_file = f"eval/img_{i:05d}.png"
        image_to_png(render_scene(attrs), out_dir / img_file)
        rows.append(
            _manifest_line(
                {
                    "split": "eval",
                    "index": i,
                    "image_file": img_file,
                    "caption": attrs.caption(),
                    "attributes": _attrs_to_dict(attrs),
                }
            )
        )

    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest


def read_manifest(data_dir: Path) -> list[dict]:
    manifest = Path(data_dir) / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    return [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]


def load_train_scenes(data_dir: Path) -> list[SceneAttributes]:
    return [_attrs_from_dict(r["attributes"]) for r in read_manifest(data_dir) if r["split"] == "train"]


def load_eval_scenes(data_dir: Path) -> list[SceneAttributes]:
    return [_attrs_from_dict(r["attributes"]) for r in read_manifest(data_dir) if r["split"] == "eval"]


def load_aesthetic_triplets(data_dir: Path) -> list[PreferenceTriplet]:
    data_dir = Path(data_dir)
    by_index: dict[int, dict] = {}
    for r in read_manifest(data_dir):
        if r["split"] != "aes":
            continue
        by_index.setdefault(r["index"], {})[r["role"]] = r
    out = []
    for i in sorted(by_index):
        pair = by_index[i]
        p, n = pair["preferred"], pair["rejected"]
        out.append(
            PreferenceTriplet(
                caption=p["caption"],
                x_p=png_to_image(data_dir / p["image_file"]),
                x_n=png_to_image(data_dir / n["image_file"]),
                attrs=_attrs_from_dict(p["attributes"]),
                level_p=p["corruption_level"],
                level_n=n["corruption_level"],
            )
        )
    return out


def load_align_triplets(data_dir: Path) -> list[AlignTriplet]:
    data_dir = Path(data_dir)
    out = []
    for r in read_manifest(data_dir):
        if r["split"] != "align":
            continue
        out.append(
            AlignTriplet(
                c_p=r["caption"],
                c_n=r["caption_negative"],
                image=png_to_image(data_dir / r["image_file"]),
                attrs=_attrs_from_dict(r["attributes"]),
                swapped=r["swapped"],
            )
        )
    return out
