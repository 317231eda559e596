import numpy as np
import pytest
import torch

from rewardedit.data import TextEncoder, build_scenes
from rewardedit.diffusion import compose_masked, make_schedule
from rewardedit.evaluation import (
    AttributeProbe,
    EvalReport,
    comparison_table,
    evaluate_generator,
    gsb_preference_rates,
    gsb_superiority,
    image_grid,
    region_consistency,
    task_inputs,
    toy_alignment_score,
    train_attribute_probe,
)
from rewardedit.generator import CondUNet
from rewardedit.scenes import SceneAttributes, render_scene


def test_gsb_superiority_examples():
    assert gsb_superiority(10, 5, 10) == pytest.approx(100.0)
    assert gsb_superiority(7, 123, 7) == pytest.approx(100.0)
    assert gsb_superiority(50, 30, 20) == pytest.approx(160.0)
    with pytest.raises(ValueError):
        gsb_superiority(5, 0, 0)


def test_gsb_superiority_scale_invariance():
    rng = np.random.default_rng(0)
    for _ in range(200):
        G, S, B = rng.integers(0, 100, size=3)
        if S + B == 0:
            continue
        k = rng.uniform(0.1, 50.0)
        assert gsb_superiority(G * k, S * k, B * k) == pytest.approx(gsb_superiority(G, S, B))


def test_gsb_preference_rates_examples():
    win, lose = gsb_preference_rates(10, 10, 10)
    assert win == pytest.approx(50.0) and lose == pytest.approx(50.0)
    win, lose = gsb_preference_rates(60, 20, 20)
    assert win == pytest.approx(100 * 80 / 120) and lose == pytest.approx(100 * 40 / 120)
    win, lose = gsb_preference_rates(5, 0, 0)
    assert win == pytest.approx(100.0) and lose == pytest.approx(0.0)
    with pytest.raises(ValueError):
        gsb_preference_rates(0, 0, 0)


def test_gsb_preference_monotonicity():
    base_win, _ = gsb_preference_rates(10, 5, 5)
    more_good, _ = gsb_preference_rates(20, 5, 5)
    more_bad, _ = gsb_preference_rates(10, 5, 15)
    assert more_good > base_win > more_bad


def test_region_consistency_cases():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 8, 8, generator=g)
    m = torch.zeros(1, 8, 8)
    m[:, :, :2] = 1.0  # 25% of columns -> 25% of pixels
    assert region_consistency(x, x.clone(), m) == (0.0, 0.0)
    y = compose_masked(x, m, torch.rand(3, 8, 8, generator=g))
    u, mm = region_consistency(x, y, m)
    assert u == 0.0 and mm > 0.0
    u, mm = region_consistency(torch.zeros(3, 8, 8), torch.ones(3, 8, 8), m)
    assert u == pytest.approx(1.0) and mm == pytest.approx(1.0)


def test_region_consistency_empty_region_flags():
    x = torch.zeros(3, 4, 4)
    y = torch.ones(3, 4, 4)
    with pytest.warns(UserWarning):
        u, m = region_consistency(x, y, torch.ones(1, 4, 4))
    assert u == 0.0 and m == pytest.approx(1.0)
    with pytest.warns(UserWarning):
        u, m = region_consistency(x, y, torch.zeros(1, 4, 4))
    assert u == pytest.approx(1.0) and m == 0.0
    with pytest.raises(ValueError):
        region_consistency(x, torch.ones(3, 4, 5), torch.zeros(1, 4, 4))


class EchoProbe(torch.nn.Module):
    """Always predicts a fixed embedding."""

    def __init__(self, vec):
        super().__init__()
        self.vec = vec

    def forward(self, x):
        return self.vec[None].repeat(x.shape[0], 1)


def test_toy_alignment_score_identity():
    enc = TextEncoder()
    caption = "a red square on a blue background"
    probe = EchoProbe(torch.from_numpy(enc.encode(caption)))
    img = torch.zeros(3, 32, 32)
    assert toy_alignment_score(enc, probe, caption, img) == pytest.approx(1.0, abs=1e-6)
    assert toy_alignment_score(enc, probe, "", img) == 0.0  # null prompt -> zero vector


@pytest.fixture(scope="module")
def trained_probe():
    scenes = build_scenes(1000, rng_seed=77)
    enc = TextEncoder()
    probe = train_attribute_probe(scenes, enc, seed=0)
    return probe, enc


def test_probe_scores_clean_renders_high(trained_probe):
    probe, enc = trained_probe
    held_out = build_scenes(40, rng_seed=123)
    scores = []
    for s in held_out:
        img = torch.from_numpy(render_scene(s))
        scores.append(toy_alignment_score(enc, probe, s.caption(), img))
    assert float(np.mean(scores)) >= 0.9


def test_probe_paired_swap_comparison(trained_probe):
    probe, enc = trained_probe
    held_out = build_scenes(40, rng_seed=321)
    wins = 0
    for s in held_out:
        img = torch.from_numpy(render_scene(s))
        alt_colors = [c for c in ("red", "green", "blue", "yellow") if c != s.color and c != s.background]
        swapped = SceneAttributes(s.shape, alt_colors[0], s.background, s.position, s.size)
        true_score = toy_alignment_score(enc, probe, s.caption(), img)
        swap_score = toy_alignment_score(enc, probe, swapped.caption(), img)
        wins += true_score > swap_score
    assert wins >= 38  # strictly lower on essentially every pair


def test_eval_report_validation():
    with pytest.raises(ValueError):
        EvalReport("outpainting", "ckpt", 0, 0.0, 0.0, 0.0, 0.0)


def test_task_inputs_shapes_and_prompts():
    scene = SceneAttributes("circle", "red", "blue", "center", 0.25)
    for task in ("outpainting", "inpainting-editing", "inpainting-erasing"):
        mask, prompt, target = task_inputs(scene, task, seed=0)
        assert mask.shape == (32, 32)
        assert mask.sum() > 0
    _, prompt, target = task_inputs(scene, "inpainting-erasing", seed=0)
    assert prompt == ""
    assert target == "a blue background"
    _, prompt, _ = task_inputs(scene, "outpainting", seed=0)
    assert prompt == scene.caption()
    # editing mask covers the instance footprint
    from rewardedit.scenes import shape_mask

    mask, _, _ = task_inputs(scene, "inpainting-editing", seed=1)
    inst = shape_mask(scene)
    assert np.all(mask[inst == 1] == 1)
    with pytest.raises(ValueError):
        task_inputs(scene, "sideways", seed=0)


def test_evaluate_generator_contract(trained_probe):
    probe, enc = trained_probe
    torch.manual_seed(0)
    gen = CondUNet()
    sched = make_schedule(8, "linear")
    scenes = build_scenes(6, rng_seed=5)
    report, kept = evaluate_generator(
        gen, sched, scenes, "inpainting-editing", probe, enc, seed=0, checkpoint_id="test", keep_images=3
    )
    assert report.n == 6
    assert report.unmasked_l1_max == 0.0  # composition preserves the source bit-exactly
    assert -1.0 <= report.alignment_mean <= 1.0
    assert 0.0 < report.oracle_masked_mean <= 1.0
    assert len(kept) == 3
    grid = image_grid(kept)
    assert grid.shape == (3, 3 * 32, 3 * 32)


def test_comparison_table_lists_all_rows():
    r1 = EvalReport("outpainting", "a", 4, 0.5, 0.6, 0.0, 0.0)
    r2 = EvalReport("outpainting", "b", 4, 0.7, 0.8, 0.0, 0.0)
    table = comparison_table([r1, r2])
    assert "outpainting" in table and "a" in table and "b" in table
    assert "+0.2000" in table
