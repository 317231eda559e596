"""Command-line entry points: build-data / train / sample / eval.

Every command takes one ``--config`` YAML plus targeted ``--set key=value``
overrides, and is deterministic given the config (seeds included) and its
upstream artifacts.

Exit codes: 0 success, 1 validation error, 2 missing dependency,
3 runtime numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
from tqdm import tqdm

from . import data as data_mod
from .checkpoint import CheckpointError, checkpoint_schedule, load_checkpoint, save_checkpoint
from .config import ConfigError, DependencyError, RunConfig, dump_config, load_config
from .data import TextEncoder, _derive_seed
from .diffusion import make_schedule, sample_edit
from .evaluation import (
    AttributeProbe,
    comparison_table,
    evaluate_generator,
    image_grid,
    plot_metrics,
    save_reports,
    task_inputs,
    train_attribute_probe,
)
from .generator import CondUNet
from .pefl import BaselineTrainer, NonFiniteLossError, PeflTrainer, progressive_phase
from .rewards import FusionScorer, PixelCritic, RewardSuite, train_preference_model
from .scenes import QualityOracle, image_to_png, render_scene, sample_scene

TRAIN_MODES = ("rewards", "pefl_phase1", "pefl_phase2", "baseline")
SAMPLE_TASKS = {
    "outpaint": "outpainting",
    "inpaint_edit": "inpainting-editing",
    "inpaint_erase": "inpainting-erasing",
}

DECOR_WORDS = ("fantastic", "brilliant", "unbelievable", "amazing", "stunning", "incredible")


# ---------------------------------------------------------------------------
# build-data
# ---------------------------------------------------------------------------


def _candidate_prompts(n: int, seed: int, decorative_fraction: float):
    """Scenes plus raw prompt strings, a slice of them decoration-heavy.

    Half of the decorated prompts get one or two filler words (they survive
    filtering); the other half are dominated by fillers and get dropped.
    """
    scenes, prompts = [], []
    for i in range(n):
        rng = np.random.default_rng(_derive_seed(seed, "candidate", i))
        scene = sample_scene(rng)
        caption = scene.caption()
        roll = rng.uniform()
        if roll < decorative_fraction / 2:
            words = [DECOR_WORDS[rng.integers(0, len(DECOR_WORDS))] for _ in range(int(rng.integers(5, 8)))]
            caption = " ".join(words + [caption.split()[-1]])  # filler-dominated
        elif roll < decorative_fraction:
            caption = f"a {DECOR_WORDS[rng.integers(0, len(DECOR_WORDS))]} {caption[2:]}"
        scenes.append(scene)
        prompts.append(caption)
    return scenes, prompts


def cmd_build_data(cfg: RunConfig, workers: int | None = None) -> Path:
    """Materialize the training, preference, alignment and eval datasets,
    then fit the frozen eval probe on the clean training renders."""
    d = cfg.data
    workers = workers if workers is not None else d.workers
    out = cfg.resolved_data_dir()
    out.mkdir(parents=True, exist_ok=True)
    encoder = TextEncoder()

    n_cand = d.n_candidates or 2 * d.n_train_scenes
    scenes, prompts = _candidate_prompts(n_cand, cfg.seed, d.decorative_fraction)
    kept_idx = [i for i, p in enumerate(prompts) if not data_mod.is_decorative(p, d.stoplist)]
    print(f"candidate prompts: {n_cand}, kept after decorative filter: {len(kept_idx)}")
    if len(kept_idx) < d.n_train_scenes:
        raise ConfigError(
            f"data.n_candidates: only {len(kept_idx)} prompts survive filtering, "
            f"need n_train_scenes={d.n_train_scenes}"
        )
    embeddings = np.stack([encoder.encode(prompts[i]) for i in kept_idx])
    selected, labels, _ = data_mod.cluster_and_select(
        embeddings,
        k_clusters=d.k_clusters,
        k_nn=d.k_nn,
        n_select=d.n_train_scenes,
        rng_seed=cfg.seed,
        return_details=True,
    )
    occupancy = np.bincount(labels, minlength=d.k_clusters)
    print(f"diversity selection: {len(selected)} of {len(kept_idx)} prompts, cluster sizes {occupancy.tolist()}")
    train_scenes = [scenes[kept_idx[i]] for i in selected]

    oracle = QualityOracle()
    aes, skipped = data_mod.build_aesthetic_triplets(
        d.n_aes_prompts, oracle, cfg.seed, variants_per_prompt=d.variants_per_prompt, workers=workers
    )
    print(f"aesthetic triplets: {len(aes)} (skipped {skipped} oracle ties)")
    align = data_mod.build_align_triplets(d.n_align_scenes, cfg.seed)
    eval_scenes = data_mod.build_scenes(d.n_eval_scenes, _derive_seed(cfg.seed, "eval-set"))

    manifest = data_mod.write_datasets(out, train_scenes, aes, align, cfg.mask_policy, cfg.seed, eval_scenes)
    bad = [
        f"{r['split']}[{r['index']}]: missing {r['image_file']}"
        for r in data_mod.read_manifest(out)
        if not (out / r["image_file"]).exists()
    ]
    if bad:
        raise DependencyError(f"dataset validation failed for {len(bad)} records: " + "; ".join(bad[:5]))
    print(f"wrote {manifest}")

    probe = train_attribute_probe(train_scenes, encoder, seed=_derive_seed(cfg.seed, "probe"))
    save_checkpoint(out / "probe.pt", "probe", {"model": probe.state_dict()})
    dump_config(cfg, out / "build_config.yaml")
    print(f"wrote {out / 'probe.pt'}")
    return out


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise DependencyError(f"{what} not found: {path} (run the upstream command first)")
    return Path(path)


def _metrics_writer(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w")


def _fresh_generator(seed: int) -> CondUNet:
    torch.manual_seed(seed)
    return CondUNet()


def _load_generator_weights(payload: dict, which: str = "generator") -> CondUNet:
    gen = CondUNet()
    gen.load_state_dict(payload["state"][which])
    return gen


def _save_generator(path, trainer, sched, stage, phase: int, iteration: int, mode: str):
    save_checkpoint(
        path,
        "generator",
        {"generator": trainer.gen.state_dict(), "ema": trainer.ema_gen.state_dict()},
        schedule=sched,
        extra={
            "stage": dataclasses.asdict(stage) if stage else None,
            "phase": phase,
            "iteration": iteration,
            "mode": mode,
        },
    )


def _train_rewards(cfg: RunConfig) -> None:
    data_dir = _require(cfg.resolved_data_dir() / "manifest.jsonl", "dataset manifest").parent
    encoder = TextEncoder()
    aes = data_mod.load_aesthetic_triplets(data_dir)
    align = data_mod.load_align_triplets(data_dir)
    if not aes or not align:
        raise DependencyError(f"dataset at {data_dir} has no preference/alignment records")
    ckpt_dir = cfg.checkpoints_dir()
    rows = []
    for name, triplets, mode in (("aesthetic", aes, "aesthetic"), ("alignment", align, "alignment")):
        torch.manual_seed(_derive_seed(cfg.seed, name, "init"))
        model = FusionScorer()
        history, acc = train_preference_model(
            model,
            triplets,
            encoder,
            mode=mode,
            epochs=cfg.train.rewards_epochs,
            batch_size=cfg.train.rewards_batch,
            lr=cfg.train.rewards_lr,
            val_frac=cfg.train.val_frac,
            seed=_derive_seed(cfg.seed, name, "train"),
        )
        path = ckpt_dir / f"{name}.pt"
        save_checkpoint(path, name, {"model": model.state_dict()}, extra={"val_accuracy": acc, "history": history})
        print(f"{name} reward model: held-out ranking accuracy {acc:.3f} -> {path}")
        for h in history:
            rows.append(json.dumps({"model": name, **h}, sort_keys=True))
    (cfg.resolved_out_dir() / "metrics_rewards.jsonl").write_text("\n".join(rows) + "\n")


def _load_reward_suite(cfg: RunConfig) -> RewardSuite:
    ckpt_dir = cfg.checkpoints_dir()
    aesthetic = FusionScorer()
    aesthetic.load_state_dict(load_checkpoint(_require(ckpt_dir / "aesthetic.pt", "aesthetic reward checkpoint"), "aesthetic")["state"]["model"])
    alignment = FusionScorer()
    alignment.load_state_dict(load_checkpoint(_require(ckpt_dir / "alignment.pt", "alignment reward checkpoint"), "alignment")["state"]["model"])
    torch.manual_seed(_derive_seed(cfg.seed, "critic", "init"))
    critic = PixelCritic()
    return RewardSuite(aesthetic=aesthetic, alignment=alignment, coherence=critic)


def _batch_for_iteration(scenes, cfg: RunConfig, encoder, mode: str, iteration: int):
    rng = np.random.default_rng(_derive_seed(cfg.seed, mode, "batch", iteration))
    idx = rng.choice(len(scenes), size=min(cfg.pefl.batch_size, len(scenes)), replace=False)
    return data_mod.build_train_batch(
        [scenes[int(i)] for i in idx],
        cfg.mask_policy,
        _derive_seed(cfg.seed, mode, "masks", iteration),
        encoder,
    )


def _train_pefl(cfg: RunConfig, mode: str) -> None:
    phase = 1 if mode == "pefl_phase1" else 2
    data_dir = _require(cfg.resolved_data_dir() / "manifest.jsonl", "dataset manifest").parent
    scenes = data_mod.load_train_scenes(data_dir)
    if len(scenes) < cfg.pefl.batch_size:
        raise DependencyError(f"dataset at {data_dir} has {len(scenes)} scenes < batch size {cfg.pefl.batch_size}")
    encoder = TextEncoder()
    rewards = _load_reward_suite(cfg)
    ckpt_dir = cfg.checkpoints_dir()

    stage = progressive_phase(phase)
    sched = make_schedule(stage.T, cfg.schedule.kind)
    if phase == 1:
        if cfg.train.init_from:
            payload = load_checkpoint(_require(Path(cfg.train.init_from), "init generator checkpoint"), "generator")
            gen = _load_generator_weights(payload)
        else:
            gen = _fresh_generator(_derive_seed(cfg.seed, "generator", "init"))
    else:
        phase1_path = Path(cfg.train.phase1_checkpoint or ckpt_dir / "pefl_phase1_final.pt")
        payload = load_checkpoint(_require(phase1_path, "phase-1 generator checkpoint"), "generator")
        gen = _load_generator_weights(payload)
        critic_path = phase1_path.with_name(phase1_path.name.replace("pefl_phase1", "critic_phase1"))
        if critic_path.exists():
            rewards.coherence.load_state_dict(load_checkpoint(critic_path, "coherence")["state"]["model"])

    trainer = PeflTrainer(gen, rewards, stage, sched, cfg.pefl, seed=_derive_seed(cfg.seed, mode, "trainer"))
    out_dir = cfg.resolved_out_dir()
    metrics_path = out_dir / f"metrics_{mode}.jsonl"
    with _metrics_writer(metrics_path) as fh:
        for i in tqdm(range(cfg.train.iters), desc=mode, unit="it", disable=None):
            batch = _batch_for_iteration(scenes, cfg, encoder, mode, i)
            bundle = trainer.train_step(batch)
            if (i + 1) % cfg.train.log_every == 0:
                row = {"iteration": i + 1, "phase": phase, "lr": trainer.lr_at(trainer.iteration)}
                row.update(bundle.as_dict())
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if cfg.train.checkpoint_every and (i + 1) % cfg.train.checkpoint_every == 0:
                _save_generator(ckpt_dir / f"{mode}_iter{i + 1:06d}.pt", trainer, sched, stage, phase, i + 1, mode)
                save_checkpoint(
                    ckpt_dir / f"critic_phase{phase}_iter{i + 1:06d}.pt",
                    "coherence",
                    {"model": rewards.coherence.state_dict()},
                    schedule=sched,
                )
    _save_generator(ckpt_dir / f"{mode}_final.pt", trainer, sched, stage, phase, cfg.train.iters, mode)
    save_checkpoint(
        ckpt_dir / f"critic_phase{phase}_final.pt",
        "coherence",
        {"model": rewards.coherence.state_dict()},
        schedule=sched,
    )
    print(f"wrote {ckpt_dir / f'{mode}_final.pt'} and {metrics_path}")


def _train_baseline(cfg: RunConfig) -> None:
    data_dir = _require(cfg.resolved_data_dir() / "manifest.jsonl", "dataset manifest").parent
    scenes = data_mod.load_train_scenes(data_dir)
    if len(scenes) < cfg.pefl.batch_size:
        raise DependencyError(f"dataset at {data_dir} has {len(scenes)} scenes < batch size {cfg.pefl.batch_size}")
    encoder = TextEncoder()
    stage = progressive_phase(cfg.schedule.phase)
    sched = make_schedule(stage.T, cfg.schedule.kind)
    if cfg.train.init_from:
        payload = load_checkpoint(_require(Path(cfg.train.init_from), "init generator checkpoint"), "generator")
        gen = _load_generator_weights(payload)
    else:
        gen = _fresh_generator(_derive_seed(cfg.seed, "generator", "init"))
    trainer = BaselineTrainer(gen, sched, cfg.pefl, seed=_derive_seed(cfg.seed, "baseline", "trainer"))
    out_dir = cfg.resolved_out_dir()
    metrics_path = out_dir / "metrics_baseline.jsonl"
    ckpt_dir = cfg.checkpoints_dir()
    with _metrics_writer(metrics_path) as fh:
        for i in tqdm(range(cfg.train.iters), desc="baseline", unit="it", disable=None):
            batch = _batch_for_iteration(scenes, cfg, encoder, "baseline", i)
            loss = trainer.train_step(batch)
            if (i + 1) % cfg.train.log_every == 0:
                row = {"iteration": i + 1, "mode": "baseline", "loss": loss, "lr": trainer.lr_at(trainer.iteration)}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if cfg.train.checkpoint_every and (i + 1) % cfg.train.checkpoint_every == 0:
                _save_generator(ckpt_dir / f"baseline_iter{i + 1:06d}.pt", trainer, sched, stage, 0, i + 1, "baseline")
    _save_generator(ckpt_dir / "baseline_final.pt", trainer, sched, stage, 0, cfg.train.iters, "baseline")
    print(f"wrote {ckpt_dir / 'baseline_final.pt'} and {metrics_path}")


def cmd_train(cfg: RunConfig, mode: str) -> None:
    if mode not in TRAIN_MODES:
        raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {mode!r}")
    cfg.resolved_out_dir().mkdir(parents=True, exist_ok=True)
    dump_config(cfg, cfg.resolved_out_dir() / f"train_{mode}_config.yaml")
    if mode == "rewards":
        _train_rewards(cfg)
    elif mode == "baseline":
        _train_baseline(cfg)
    else:
        _train_pefl(cfg, mode)


# ---------------------------------------------------------------------------
# sample / eval
# ---------------------------------------------------------------------------


def _generator_from_checkpoint(path: Path, which: str) -> tuple[CondUNet, dict]:
    payload = load_checkpoint(_require(path, "generator checkpoint"), "generator")
    key = "ema" if which == "ema" else "generator"
    gen = _load_generator_weights(payload, key)
    gen.eval()
    return gen, payload


def cmd_sample(cfg: RunConfig, checkpoint: str, task: str, steps: int | None, prompt_free: bool = False) -> Path:
    if task not in SAMPLE_TASKS:
        raise ConfigError(f"task must be one of {sorted(SAMPLE_TASKS)}, got {task!r}")
    gen, payload = _generator_from_checkpoint(Path(checkpoint), cfg.sample.which)
    sched = checkpoint_schedule(payload)
    steps = steps if steps is not None else sched.T
    if steps > sched.T:
        raise ConfigError(f"steps={steps} exceeds the checkpoint schedule T={sched.T}")
    encoder = TextEncoder()
    long_task = SAMPLE_TASKS[task]
    triples = []
    for i in range(cfg.sample.n):
        rng = np.random.default_rng(_derive_seed(cfg.seed, "sample", task, i))
        scene = sample_scene(rng)
        mask, prompt, _ = task_inputs(scene, long_task, _derive_seed(cfg.seed, "sample-mask", task, i))
        if prompt_free:
            prompt = ""
        x = torch.from_numpy(render_scene(scene))[None]
        m = torch.from_numpy(mask[None].astype(np.float32))[None]
        c = encoder.encode_batch([prompt])
        g = torch.Generator().manual_seed(_derive_seed(cfg.seed, "sample-noise", task, i))
        y = sample_edit(gen, x, m, c, sched, steps=steps, generator=g)
        triples.append((x[0].numpy(), mask.astype(np.float32), y[0].numpy()))
    out_dir = cfg.resolved_out_dir() / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_png = out_dir / f"{task}_steps{steps}.png"
    image_to_png(image_grid(triples), out_png)
    print(f"wrote {out_png} ({cfg.sample.n} samples, {steps} steps)")
    return out_png


def cmd_eval(cfg: RunConfig, checkpoints: list[str]) -> Path:
    if not checkpoints:
        raise ConfigError("eval needs at least one checkpoint")
    data_dir = cfg.resolved_data_dir()
    probe_path = _require(data_dir / "probe.pt", "eval probe asset")
    probe = AttributeProbe()
    probe.load_state_dict(load_checkpoint(probe_path, "probe")["state"]["model"])
    probe.eval()
    scenes = data_mod.load_eval_scenes(data_dir)
    if not scenes:
        raise DependencyError(f"dataset at {data_dir} has no eval split")
    encoder = TextEncoder()
    eval_dir = cfg.resolved_out_dir() / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)

    reports = []
    for ckpt in checkpoints:
        gen, payload = _generator_from_checkpoint(Path(ckpt), cfg.eval.which)
        sched = checkpoint_schedule(payload)
        ckpt_id = Path(ckpt).stem
        for task in cfg.eval.tasks:
            report, kept = evaluate_generator(
                gen,
                sched,
                scenes,
                task,
                probe,
                encoder,
                seed=_derive_seed(cfg.seed, "eval"),
                checkpoint_id=ckpt_id,
                steps=cfg.eval.steps,
                batch_size=cfg.eval.batch_size,
                keep_images=cfg.eval.n_grid,
            )
            reports.append(report)
            if kept:
                image_to_png(image_grid(kept), eval_dir / f"grid_{task}_{ckpt_id}.png")
            print(
                f"{ckpt_id} {task}: alignment {report.alignment_mean:.4f}, "
                f"oracle {report.oracle_masked_mean:.4f}, unmasked L1 {report.unmasked_l1_max:.2e}"
            )
    save_reports(reports, eval_dir / "reports.json")
    table = comparison_table(reports)
    (eval_dir / "table.txt").write_text(table + "\n")
    print(table)
    for metrics_file in sorted(cfg.resolved_out_dir().glob("metrics_*.jsonl")):
        rows = [json.loads(line) for line in metrics_file.read_text().splitlines() if line.strip()]
        if rows:
            plot_metrics(rows, eval_dir / f"losses_{metrics_file.stem.removeprefix('metrics_')}.png")
    print(f"wrote {eval_dir / 'reports.json'}")
    return eval_dir


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rewardedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE")

    p_data = sub.add_parser("build-data", help="materialize datasets and the eval probe")
    add_common(p_data)
    p_data.add_argument("--workers", type=int, default=None, help="data-builder parallelism")

    p_train = sub.add_parser("train", help="train reward models, feedback phases, or the baseline")
    add_common(p_train)
    p_train.add_argument("--mode", required=True, choices=TRAIN_MODES)

    p_sample = sub.add_parser("sample", help="render an editing grid from a checkpoint")
    add_common(p_sample)
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--task", required=True, choices=sorted(SAMPLE_TASKS))
    p_sample.add_argument("--steps", type=int, default=None)
    p_sample.add_argument("--prompt-free", action="store_true", help="use the null prompt (outpainting)")

    p_eval = sub.add_parser("eval", help="score checkpoints on the eval scenes")
    add_common(p_eval)
    p_eval.add_argument("checkpoints", nargs="*", help="generator checkpoint files")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.overrides)
    if args.command == "build-data":
        cmd_build_data(cfg, workers=args.workers)
    elif args.command == "train":
        cmd_train(cfg, args.mode)
    elif args.command == "sample":
        cmd_sample(cfg, args.checkpoint, args.task, args.steps, prompt_free=args.prompt_free)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoints)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except (ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DependencyError, FileNotFoundError) as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
