import numpy as np
import pytest
import torch

from rewardedit.data import (
    TextEncoder,
    build_aesthetic_triplets,
    build_align_triplets,
    build_scenes,
    build_train_batch,
    cluster_and_select,
    filter_decorative,
    is_decorative,
    load_aesthetic_triplets,
    load_align_triplets,
    load_eval_scenes,
    load_train_scenes,
    write_datasets,
)
from rewardedit.masking import MaskPolicy
from rewardedit.scenes import (
    COLORS,
    SHAPES,
    QualityOracle,
    SceneAttributes,
    corrupt_image,
    render_scene,
    sample_scene,
)

STOPLIST = ["fantastic", "brilliant", "unbelievable"]


def test_render_deterministic_and_palette_pure():
    attrs = SceneAttributes("square", "red", "blue", "center", 0.25)
    a = render_scene(attrs)
    b = render_scene(attrs)
    assert np.array_equal(a, b)
    assert QualityOracle().score(a) == 1.0
    assert attrs.caption() == "a red square on a blue background"


def test_all_shapes_render_nonempty():
    from rewardedit.scenes import PALETTE

    for shape in SHAPES:
        attrs = SceneAttributes(shape, "green", "white", "center", 0.25)
        img = render_scene(attrs)
        fg = np.array(PALETTE["green"], dtype=np.float32)
        hits = np.all(img == fg.reshape(3, 1, 1), axis=0)
        assert hits.sum() > 10


def test_corrupt_level_zero_is_identity():
    img = render_scene(sample_scene(np.random.default_rng(0)))
    assert np.array_equal(corrupt_image(img, 0.0, 7), img)


def test_corrupt_rejects_bad_level():
    img = render_scene(sample_scene(np.random.default_rng(0)))
    with pytest.raises(ValueError):
        corrupt_image(img, 1.5, 0)


def test_oracle_strictly_monotone_in_corruption_level():
    oracle = QualityOracle()
    rng = np.random.default_rng(42)
    for _ in range(40):
        img = render_scene(sample_scene(rng))
        seed = int(rng.integers(0, 2**32))
        levels = np.sort(rng.uniform(0.01, 1.0, size=5))
        scores = [oracle.score(corrupt_image(img, float(l), seed)) for l in levels]
        assert all(s1 > s2 for s1, s2 in zip(scores, scores[1:])), (levels, scores)
        assert oracle.score(img) > scores[0]


def test_oracle_score_region():
    img = render_scene(SceneAttributes("square", "red", "blue", "center", 0.25))
    region = np.zeros((32, 32), dtype=np.uint8)
    region[:16] = 1
    assert QualityOracle().score_region(img, region) == 1.0
    with pytest.raises(ValueError):
        QualityOracle().score_region(img, np.zeros((32, 32), dtype=np.uint8))


def test_text_encoder_contracts():
    enc = TextEncoder()
    c = "a red square on a blue background"
    e1, e2 = enc.encode(c), enc.encode(c)
    assert np.array_equal(e1, e2)
    assert np.linalg.norm(e1) == pytest.approx(1.0, abs=1e-6)
    assert float(e1 @ e1) == pytest.approx(1.0, abs=1e-6)
    assert np.linalg.norm(enc.encode("")) == 0.0


def test_text_encoder_separates_single_attribute_swaps():
    enc = TextEncoder()
    base = SceneAttributes("square", "red", "blue", "center", 0.25)
    e = enc.encode(base.caption())
    swaps = [
        SceneAttributes("circle", "red", "blue", "center", 0.25),
        SceneAttributes("square", "green", "blue", "center", 0.25),
        SceneAttributes("square", "red", "yellow", "center", 0.25),
    ]
    for s in swaps:
        cos = float(e @ enc.encode(s.caption()))
        assert cos < 1.0 - 1e-4


def brute_force_isolation_ranking(emb, k_nn, n_select):
    emb = np.asarray(emb, dtype=np.float64)
    n = len(emb)
    means = []
    for i in range(n):
        dists = sorted(np.linalg.norm(emb[i] - emb[j]) for j in range(n) if j != i)
        means.append(np.mean(dists[:k_nn]))
    order = np.argsort(-np.asarray(means), kind="stable")
    return order[:n_select]


def test_cluster_and_select_isolated_point():
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
    idx = cluster_and_select(pts, k_clusters=2, k_nn=2, n_select=1, rng_seed=0)
    assert list(idx) == [2]


def test_cluster_and_select_all_points():
    pts = np.random.default_rng(0).normal(size=(10, 4))
    idx = cluster_and_select(pts, k_clusters=3, k_nn=2, n_select=10)
    assert sorted(idx) == list(range(10))


def test_cluster_and_select_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n = int(rng.integers(10, 50))
        pts = rng.normal(size=(n, 6))
        k_nn = int(rng.integers(1, 6))
        n_sel = int(rng.integers(1, n + 1))
        got = cluster_and_select(pts, k_clusters=4, k_nn=k_nn, n_select=n_sel, rng_seed=0)
        want = brute_force_isolation_ranking(pts, k_nn, n_sel)
        assert list(got) == list(want)


def test_cluster_and_select_degenerate_warns_deterministic():
    pts = np.ones((8, 3))
    with pytest.warns(UserWarning):
        a = cluster_and_select(pts, k_clusters=2, k_nn=2, n_select=3)
    with pytest.warns(UserWarning):
        b = cluster_and_select(pts, k_clusters=2, k_nn=2, n_select=3)
    assert list(a) == list(b)


def test_cluster_and_select_validation():
    pts = np.zeros((5, 2))
    with pytest.raises(ValueError):
        cluster_and_select(pts, 2, k_nn=5, n_select=2)
    with pytest.raises(ValueError):
        cluster_and_select(pts, 2, k_nn=2, n_select=6)


def test_filter_decorative_cases():
    caps = [
        "fantastic brilliant unbelievable",  # all stop tokens -> dropped
        "a red square on a blue background",  # no stop tokens -> kept
        "a fantastic red square",  # 1 of 3 content words -> kept
    ]
    kept = filter_decorative(caps, STOPLIST)
    assert kept == caps[1:]
    assert is_decorative("a fantastic brilliant square", STOPLIST)  # 2 of 3
    with pytest.raises(ValueError):
        filter_decorative(caps, [])


def test_aesthetic_triplets_prefer_clean():
    oracle = QualityOracle()
    triplets, skipped = build_aesthetic_triplets(20, oracle, rng_seed=0)
    assert skipped == 0
    assert len(triplets) == 20
    for t in triplets:
        assert t.level_p == 0.0
        assert np.array_equal(t.x_p, render_scene(t.attrs))
        assert t.level_n > 0.0
        assert oracle.score(t.x_p) > oracle.score(t.x_n)


def test_aesthetic_triplets_two_variants():
    triplets, _ = build_aesthetic_triplets(5, QualityOracle(), rng_seed=1, variants_per_prompt=2)
    for t in triplets:
        assert t.level_p == 0.0 and t.level_n > 0.0
    with pytest.raises(ValueError):
        build_aesthetic_triplets(5, QualityOracle(), 0, variants_per_prompt=1)


def test_aesthetic_triplets_deterministic_and_worker_invariant():
    a, _ = build_aesthetic_triplets(100, QualityOracle(), rng_seed=3)
    b, _ = build_aesthetic_triplets(100, QualityOracle(), rng_seed=3)
    c, _ = build_aesthetic_triplets(100, QualityOracle(), rng_seed=3, workers=2)
    for t1, t2 in zip(a, b):
        assert t1.caption == t2.caption and np.array_equal(t1.x_n, t2.x_n)
    for t1, t3 in zip(a, c):
        assert t1.caption == t3.caption
        assert np.array_equal(t1.x_p, t3.x_p) and np.array_equal(t1.x_n, t3.x_n)


def test_align_triplets_single_attribute_swap():
    triplets = build_align_triplets(200, rng_seed=0)
    for t in triplets:
        assert t.c_p != t.c_n
        p_tokens, n_tokens = t.c_p.split(), t.c_n.split()
        assert len(p_tokens) == len(n_tokens)
        assert sum(a != b for a, b in zip(p_tokens, n_tokens)) == 1


def test_align_triplets_full_toy_run():
    # a tenth of the reference corpus size; must build and validate
    triplets = build_align_triplets(4000, rng_seed=9)
    assert len(triplets) == 4000
    assert all(t.c_p != t.c_n for t in triplets)


def test_build_train_batch_contracts():
    scenes = build_scenes(8, rng_seed=0)
    batch = build_train_batch(scenes, MaskPolicy(), rng_seed=0)
    assert batch.x.shape == (8, 3, 32, 32)
    assert batch.m.shape == (8, 1, 32, 32)
    assert batch.c.shape == (8, 32)
    assert len(batch.captions) == 8 and len(batch.kinds) == 8
    assert set(torch.unique(batch.m).tolist()) <= {0.0, 1.0}


def test_build_train_batch_degenerate_policy_and_determinism():
    scenes = build_scenes(6, rng_seed=1)
    policy = MaskPolicy(p_global=0.0, p_irregular=0.0, p_square=0.0, p_outward=1.0)
    b1 = build_train_batch(scenes, policy, rng_seed=5)
    b2 = build_train_batch(scenes, policy, rng_seed=5)
    assert all(k == "outward" for k in b1.kinds)
    assert torch.equal(b1.x, b2.x) and torch.equal(b1.m, b2.m) and torch.equal(b1.c, b2.c)


def test_dataset_round_trip(tmp_path):
    scenes = build_scenes(6, rng_seed=0)
    eval_scenes = build_scenes(3, rng_seed=99)
    aes, _ = build_aesthetic_triplets(4, QualityOracle(), rng_seed=0)
    align = build_align_triplets(5, rng_seed=0)
    manifest = write_datasets(tmp_path, scenes, aes, align, MaskPolicy(), rng_seed=0, eval_scenes=eval_scenes)
    assert manifest.exists()
    assert len(list((tmp_path / "train").glob("img_*.png"))) == 6
    assert len(list((tmp_path / "train").glob("mask_*.png"))) == 6
    assert len(list((tmp_path / "aes").glob("*.png"))) == 8
    assert len(list((tmp_path / "align").glob("*.png"))) == 5
    assert len(list((tmp_path / "eval").glob("*.png"))) == 3

    assert [s.caption() for s in load_train_scenes(tmp_path)] == [s.caption() for s in scenes]
    assert [s.caption() for s in load_eval_scenes(tmp_path)] == [s.caption() for s in eval_scenes]
    loaded_aes = load_aesthetic_triplets(tmp_path)
    assert len(loaded_aes) == 4
    # PNG round trip quantizes to 8 bits
    assert np.max(np.abs(loaded_aes[0].x_p - aes[0].x_p)) < 1.0 / 127.0
    loaded_align = load_align_triplets(tmp_path)
    assert [(t.c_p, t.c_n) for t in loaded_align] == [(t.c_p, t.c_n) for t in align]


def test_manifest_rerun_byte_identical(tmp_path):
    scenes = build_scenes(4, rng_seed=0)
    aes, _ = build_aesthetic_triplets(3, QualityOracle(), rng_seed=0)
    align = build_align_triplets(3, rng_seed=0)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    m1 = write_datasets(d1, scenes, aes, align, MaskPolicy(), rng_seed=0)
    m2 = write_datasets(d2, scenes, aes, align, MaskPolicy(), rng_seed=0)
    assert m1.read_bytes() == m2.read_bytes()
