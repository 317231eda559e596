"""Metric suite: alignment probe, region consistency, preference arithmetic,
and batch evaluation of generator checkpoints over the three editing tasks.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import TextEncoder, _derive_seed
from .diffusion import NoiseSchedule, sample_edit
from .masking import dilate_instance_mask, sample_mask
from .scenes import QualityOracle, SceneAttributes, render_scene, shape_mask, H, W

TASKS = ("outpainting", "inpainting-editing", "inpainting-erasing")


class AttributeProbe(nn.Module):
    """Frozen eval asset: predicts the caption embedding from pixels.

    Trained once per experiment suite on clean renders and never updated
    during generator training, so the alignment metric cannot drift.
    """

    def __init__(self, prompt_dim: int = 32, base: int = 32):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(3, base, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base * 2, base * 4, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(base * 4, prompt_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.enc(x)


def train_attribute_probe(
    scenes: list[SceneAttributes],
    encoder: TextEncoder,
    seed: int = 0,
    epochs: int = 60,
    batch_size: int = 64,
    lr: float = 3e-3,
) -> AttributeProbe:
    """Fit the probe on clean renders by maximizing cosine to the caption embedding."""
    torch.manual_seed(seed)
    probe = AttributeProbe(prompt_dim=encoder.dim)
    images = torch.from_numpy(np.stack([render_scene(s) for s in scenes]))
    targets = encoder.encode_batch([s.caption() for s in scenes])
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        perm = torch.randperm(len(scenes), generator=gen)
        for start in range(0, len(scenes), batch_size):
            idx = perm[start : start + batch_size]
            pred = probe(images[idx])
            loss = 1.0 - torch.nn.functional.cosine_similarity(pred, targets[idx], dim=1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    probe.requires_grad_(False)
    probe.eval()
    return probe


def toy_alignment_score(
    encoder: TextEncoder, probe: AttributeProbe, caption: str, image: torch.Tensor
) -> float:
    """Cosine between the caption embedding and the probed image embedding."""
    c = torch.from_numpy(encoder.encode(caption))
    with torch.no_grad():
        pred = probe(image[None] if image.dim() == 3 else image)[0]
    denom = torch.linalg.norm(c) * torch.linalg.norm(pred)
    if denom == 0:
        return 0.0
    return float(torch.dot(c, pred) / denom)


def region_consistency(x: torch.Tensor, y: torch.Tensor, m: torch.Tensor) -> tuple[float, float]:
    """Mean absolute difference split by mask region: (unmasked_l1, masked_l1).

    An all-ones or all-zeros mask makes one region empty; that side reports
    0 and a warning flags it.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mask = (m > 0.5).expand_as(x) if m.shape != x.shape else (m > 0.5)
    diff = (x - y).abs()
    out = []
    for sel, name in ((~mask, "unmasked"), (mask, "masked")):
        n = int(sel.sum())
        if n == 0:
            warnings.warn(f"region_consistency: {name} region is empty")
            out.append(0.0)
        else:
            out.append(float(diff[sel].mean()))
    return out[0], out[1]


def gsb_superiority(G: float, S: float, B: float) -> float:
    """(G+S)/(S+B) * 100, the preference superiority percentage.

    Multiplies before dividing so integer tallies give exact percentages.
    """
    if S + B <= 0:
        raise ValueError("gsb_superiority undefined for S + B = 0")
    return (G + S) * 100.0 / (S + B)


def gsb_preference_rates(G: float, S: float, B: float) -> tuple[float, float]:
    """Win and lose percentages: (G+S) and (S+B) over their sum, unrounded."""
    if G + S + B <= 0:
        raise ValueError("gsb_preference_rates undefined for G + S + B = 0")
    denom = (G + S) + (S + B)
    return (G + S) * 100.0 / denom, (S + B) * 100.0 / denom


@dataclass
class EvalReport:
    """Per-task aggregate over one checkpoint."""

    task: str
    checkpoint_id: str
    n: int
    alignment_mean: float
    oracle_masked_mean: float
    unmasked_l1_mean: float
    unmasked_l1_max: float

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("report requires at least one sample")

    def as_dict(self) -> dict:
        return asdict(self)


def task_inputs(scene: SceneAttributes, task: str, seed: int) -> tuple[np.ndarray, str, str]:
    """(mask, prompt caption, alignment-target caption) for one scene and task."""
    if task == "outpainting":
        mask = sample_mask("outward", H, W, (0.25, 0.5), seed)
        return mask, scene.caption(), scene.caption()
    if task == "inpainting-editing":
        mask = dilate_instance_mask(shape_mask(scene), radius=2, rng_seed=seed)
        return mask, scene.caption(), scene.caption()
    if task == "inpainting-erasing":
        mask = dilate_instance_mask(shape_mask(scene), radius=2, rng_seed=seed)
        return mask, "", f"a {scene.background} background"
    raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")


@torch.no_grad()
def evaluate_generator(
    gen,
    sched: NoiseSchedule,
    scenes: list[SceneAttributes],
    task: str,
    probe: AttributeProbe,
    encoder: TextEncoder,
    seed: int,
    checkpoint_id: str = "",
    steps: int | None = None,
    batch_size: int = 16,
    keep_images: int = 0,
) -> tuple[EvalReport, list[tuple[np.ndarray, np.ndarray, np.ndarray]]]:
    """Run the editing task over scenes and aggregate the metrics.

    Returns the report plus up to keep_images (input, mask, output) triples
    for grid dumps. Oracle quality is measured on the generated region only;
    unmasked L1 must be identically zero by the composition contract.
    """
    oracle = QualityOracle()
    gen.eval()
    align_scores, oracle_scores, unmasked = [], [], []
    kept = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start : start + batch_size]
        xs, ms, prompts, targets = [], [], [], []
        for j, scene in enumerate(chunk):
            mask, prompt, target = task_inputs(scene, task, _derive_seed(seed, task, start + j))
            xs.append(render_scene(scene))
            ms.append(mask[None].astype(np.float32))
            prompts.append(prompt)
            targets.append(target)
        x = torch.from_numpy(np.stack(xs))
        m = torch.from_numpy(np.stack(ms))
        c = encoder.encode_batch(prompts)
        g = torch.Generator().manual_seed(_derive_seed(seed, task, "noise", start))
        y = sample_edit(gen, x, m, c, sched, steps=steps, generator=g)
        for j in range(len(chunk)):
            align_scores.append(toy_alignment_score(encoder, probe, targets[j], y[j]))
            oracle_scores.append(oracle.score_region(y[j].numpy(), ms[j][0]))
            u, _ = region_consistency(x[j], y[j], m[j])
            unmasked.append(u)
            if len(kept) < keep_images:
                kept.append((xs[j], ms[j][0], y[j].numpy()))
    report = EvalReport(
        task=task,
        checkpoint_id=checkpoint_id,
        n=len(align_scores),
        alignment_mean=float(np.mean(align_scores)),
        oracle_masked_mean=float(np.mean(oracle_scores)),
        unmasked_l1_mean=float(np.mean(unmasked)),
        unmasked_l1_max=float(np.max(unmasked)),
    )
    return report, kept


def save_reports(reports: list[EvalReport], path) -> None:
    Path(path).write_text(json.dumps([r.as_dict() for r in reports], indent=2, sort_keys=True) + "\n")


def comparison_table(reports: list[EvalReport]) -> str:
    """Plain-text table across checkpoints with deltas against the first one."""
    lines = [f"{'task':<22} {'checkpoint':<28} {'align':>8} {'oracle':>8} {'d_align':>9} {'d_oracle':>9}"]
    base: dict[str, EvalReport] = {}
    for r in reports:
        if r.task not in base:
            base[r.task] = r
        b = base[r.task]
        lines.append(
            f"{r.task:<22} {r.checkpoint_id:<28} {r.alignment_mean:>8.4f} {r.oracle_masked_mean:>8.4f} "
            f"{r.alignment_mean - b.alignment_mean:>+9.4f} {r.oracle_masked_mean - b.oracle_masked_mean:>+9.4f}"
        )
    return "\n".join(lines)


def image_grid(triples: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> np.ndarray:
    """Stack (input, mask, output) triples into one (3, rows*H, 3*W) image."""
    rows = []
    for x, mask, y in triples:
        mask_rgb = np.repeat(mask[None].astype(np.float32) * 2.0 - 1.0, 3, axis=0)
        rows.append(np.concatenate([x, mask_rgb, y], axis=2))
    return np.concatenate(rows, axis=1)


def plot_metrics(rows: list[dict], out_png) -> None:
    """Loss curves from metrics-log rows (one line per numeric field)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    numeric = sorted(
        {k for row in rows for k, v in row.items() if isinstance(v, (int, float)) and k != "iteration"}
    )
    fig, ax = plt.subplots(figsize=(9, 5))
    its = [row.get("iteration", i) for i, row in enumerate(rows)]
    for key in numeric:
        ys = [row.get(key) for row in rows]
        if any(y is None for y in ys):
            continue
        ax.plot(its, ys, label=key, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_yscale("symlog", linthresh=1e-4)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
