"""Experiment orchestration: dataset generation, translator training and
selection, policy training, evaluation, and report emission.

Every command validates the configuration, writes a run manifest before doing
any work, and finalizes it (with content hashes of produced files) on
completion. Exit codes: 0 success, 1 internal error, 2 missing or invalid
input.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import glob
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import cut as cut_mod
from . import metrics as metrics_mod
from .config import WorkbenchConfig, named_stream
from .embed import EmbedConfig
from .errors import ConfigError, ContractError, MissingInputError, TrisimError
from .policy import (
    EnvSetup,
    InputConfig,
    ObservationPipeline,
    TriangulationEnv,
    evaluate,
    load_policy,
    run_experiment,
)
from .raster import ImageBuffer, read_image, render, stylize, to_gray, write_pgm
from .reward import evaluate_reward
from .sim import Action, apply_action, init_tissue, step

PROG = "trisim"


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    master_seed: int
    scale: float
    args: dict
    out_dir: str
    started: str = field(default_factory=_utc_now)
    path: str = ""

    def write_initial(self):
        os.makedirs(self.out_dir, exist_ok=True)
        self.path = os.path.join(self.out_dir, "manifest.json")
        payload = {
            "command": self.command,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "scale": self.scale,
            "args": self.args,
            "started": self.started,
            "status": "running",
        }
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)

    def finalize(self, artifacts: list[str], status: str = "ok"):
        with open(self.path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        payload["status"] = status
        payload["finished"] = _utc_now()
        payload["artifacts"] = {
            os.path.relpath(p, self.out_dir): _sha256(p)
            for p in sorted(artifacts)
            if os.path.isfile(p)
        }
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
        os.replace(tmp, self.path)


def _collect_files(root: str) -> list[str]:
    out = []
    for base, _, names in os.walk(root):
        for n in names:
            if n != "manifest.json":
                out.append(os.path.join(base, n))
    return out


# ---- gen-dataset ----------------------------------------------------------------


def _scripted_frames(cfg: WorkbenchConfig, n_frames: int, image_size: int, rng):
    """Roll seeded scripted pulls and render one grayscale frame per action."""
    sim_cfg = cfg.sim_config()
    cam = cfg.camera(resolution=(image_size, image_size))
    reward_cfg = cfg.reward_config(resolution=(image_size, image_size))
    actions_per_episode = cfg.get("dataset", "actions_per_episode")
    lo = np.array(sim_cfg.workspace_box[0])
    hi = np.array(sim_cfg.workspace_box[1])

    base = init_tissue(sim_cfg)
    for _ in range(2 * sim_cfg.settle_steps):
        base = step(base, sim_cfg)

    frames, labels = [], []
    state = base
    k = 0
    while len(frames) < n_frames:
        if k % actions_per_episode == 0:
            state = base
        pi = int(rng.integers(0, state.n_particles))
        p = np.clip(state.positions[pi] + rng.normal(0.0, 0.002, 3), lo, hi)
        d = np.clip(rng.uniform(lo, hi), lo, hi)
        state = apply_action(state, Action.create(p, d), sim_cfg)
        frame = render(state, cam)
        ends = (
            state.positions[state.resection_line.endpoints[0]],
            state.positions[state.resection_line.endpoints[1]],
        )
        grips = tuple(g.position for g in state.grippers)
        report = evaluate_reward(frame, ends, grips, reward_cfg)
        frames.append(to_gray(frame))
        labels.append(report)
        k += 1
    return frames, labels, reward_cfg


def cmd_gen_dataset(cfg: WorkbenchConfig, args) -> int:
    out_dir = args.out
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not args.force:
        raise ContractError(f"output directory {out_dir} is not empty (use --force)")
    n_src = args.count_source or cfg.get("dataset", "count_source")
    n_tgt = args.count_target or cfg.get("dataset", "count_target")
    image_size = cfg.get("dataset", "image_size")

    manifest = RunManifest(
        "gen-dataset", cfg.content_hash(), args.seed, args.scale,
        {"out": out_dir, "count_source": n_src, "count_target": n_tgt}, out_dir,
    )
    manifest.write_initial()
    if args.dry_run:
        manifest.finalize([], status="dry-run")
        return 0

    rng = named_stream(args.seed, "dataset")
    frames, labels, reward_cfg = _scripted_frames(cfg, n_src + n_tgt, image_size, rng)

    src_dir = os.path.join(out_dir, "source")
    tgt_dir = os.path.join(out_dir, "target")
    os.makedirs(src_dir, exist_ok=True)
    os.makedirs(tgt_dir, exist_ok=True)
    style_rng = named_stream(args.seed, "stylize")
    rows = ["split,index,n_mask,goal1,goal2,bucket"]
    for i in range(n_src):
        write_pgm(os.path.join(src_dir, f"{i:04d}.pgm"), frames[i])
        rep = labels[i]
        bucket = metrics_mod.pose_bucket(rep.n_mask, reward_cfg.eps1, rep.goal2)
        rows.append(f"source,{i},{rep.n_mask},{int(rep.goal1)},{int(rep.goal2)},{bucket}")
    for j in range(n_tgt):
        seed = int(style_rng.integers(2**31))
        styled = stylize(frames[n_src + j], cfg.style_params(seed=seed))
        write_pgm(os.path.join(tgt_dir, f"{j:04d}.pgm"), styled)
        rep = labels[n_src + j]
        bucket = metrics_mod.pose_bucket(rep.n_mask, reward_cfg.eps1, rep.goal2)
        rows.append(f"target,{j},{rep.n_mask},{int(rep.goal1)},{int(rep.goal2)},{bucket}")
    with open(os.path.join(out_dir, "labels.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")

    manifest.finalize(_collect_files(out_dir))
    print(f"wrote {n_src} source and {n_tgt} target frames to {out_dir}")
    return 0


# ---- train-translator -------------------------------------------------------------


def cmd_train_translator(cfg: WorkbenchConfig, args) -> int:
    data = args.data
    for sub in ("source", "target"):
        if not os.path.isdir(os.path.join(data, sub)):
            raise MissingInputError(os.path.join(data, sub))
    manifest = RunManifest(
        "train-translator", cfg.content_hash(), args.seed, args.scale,
        {"data": data, "out": args.out}, args.out,
    )
    manifest.write_initial()
    if args.dry_run:
        manifest.finalize([], status="dry-run")
        return 0
    cut_cfg = cfg.cut_config()
    rng = named_stream(args.seed, "translator")
    cks = cut_mod.train_translator(
        os.path.join(data, "source"), os.path.join(data, "target"), args.out, cut_cfg, rng
    )
    manifest.finalize(_collect_files(args.out))
    print(f"trained translator: {len(cks)} checkpoints in {args.out}")
    return 0


# ---- select-translator --------------------------------------------------------------


def _read_labels(path: str) -> dict[str, np.ndarray]:
    if not os.path.isfile(path):
        raise MissingInputError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    src = [r for r in rows if r["split"] == "source"]
    return {
        "bucket": np.array([int(r["bucket"]) for r in src], dtype=np.int64),
    }


def cmd_select_translator(cfg: WorkbenchConfig, args) -> int:
    ckpt_paths = sorted(glob.glob(os.path.join(args.ckpts, "translator_epoch*.ckpt")))
    if not ckpt_paths:
        raise MissingInputError(args.ckpts, f"no translator checkpoints in {args.ckpts}")
    data = args.data
    manifest = RunManifest(
        "select-translator", cfg.content_hash(), args.seed, args.scale,
        {"ckpts": args.ckpts, "data": data}, args.ckpts,
    )
    manifest.write_initial()
    if args.dry_run:
        manifest.finalize([], status="dry-run")
        return 0

    src = cut_mod.load_gray_dir(os.path.join(data, "source"))
    tgt = cut_mod.load_gray_dir(os.path.join(data, "target"))
    labels = _read_labels(os.path.join(data, "labels.csv"))["bucket"]
    if len(labels) != len(src):
        raise ContractError("labels.csv does not match the source image count")

    rng = named_stream(args.seed, "select")
    net = metrics_mod.train_feature_net(
        (src + 1.0) / 2.0,
        labels,
        rng,
        epochs=cfg.get("metrics", "feature_epochs"),
        width=cfg.get("metrics", "feature_width"),
        feature_dim=cfg.get("metrics", "feature_dim"),
    )

    n_sample = min(cfg.get("metrics", "score_sample"), len(src))
    sample = src[:n_sample]
    splits = cfg.get("metrics", "is_splits")
    tgt01 = (tgt + 1.0) / 2.0
    target_stats = metrics_mod.GaussianStats.from_features(net.features(tgt01))

    epochs, is_means, is_stds, fids = [], [], [], []
    from .autodiff import Tensor, no_grad

    for path in ckpt_paths:
        gen, _ = cut_mod.load_translator(path)
        outs = []
        with no_grad():
            for start in range(0, n_sample, 16):
                outs.append(gen(Tensor(sample[start : start + 16])).data)
        fake01 = (np.concatenate(outs, axis=0) + 1.0) / 2.0
        m, s = metrics_mod.inception_score(net, fake01, splits)
        stats = metrics_mod.GaussianStats.from_features(net.features(fake01))
        fid = metrics_mod.frechet_distance(stats, target_stats)
        epoch = int(path.rsplit("translator_epoch", 1)[1].split(".")[0])
        epochs.append(epoch)
        is_means.append(m)
        is_stds.append(s)
        fids.append(fid)

    table = metrics_mod.rank_table(is_means, fids, top_n=cfg.get("metrics", "top_n"))
    scores_path = os.path.join(args.ckpts, "scores.csv")
    with open(scores_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,is_mean,is_std,fid,rank_sum,selected\n")
        for i, entry in enumerate(table):
            fh.write(
                f"{epochs[i]},{is_means[i]:.6f},{is_stds[i]:.6f},"
                f"{fids[i]:.6f},{entry.rank_sum},{int(entry.selected)}\n"
            )
    selected = metrics_mod.rank_sum_select(
        ckpt_paths, is_means, fids, top_n=cfg.get("metrics", "top_n")
    )
    with open(os.path.join(args.ckpts, "selected.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(selected) + "\n")
    manifest.finalize([scores_path, os.path.join(args.ckpts, "selected.txt")])
    print(f"scored {len(ckpt_paths)} checkpoints; best: {selected[0]}")
    return 0


# ---- train-policy / evaluate / report -------------------------------------------------


def _resolve_translator(args, needed: bool) -> str | None:
    if args.translator:
        return args.translator
    if not needed:
        return None
    raise MissingInputError("--translator", "a translator checkpoint is required")


def _env_setup(cfg: WorkbenchConfig) -> EnvSetup:
    return EnvSetup(
        sim=cfg.sim_config(),
        camera=cfg.camera(),
        reward=cfg.reward_config(),
        settle_on_reset=cfg.get("policy", "settle_on_reset"),
    )


def cmd_train_policy(cfg: WorkbenchConfig, args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    needs_ckpt = any(v in ("translated", "embedded") for v in variants)
    ckpt = _resolve_translator(args, needs_ckpt)
    if ckpt and not args.dry_run and not os.path.isfile(ckpt):
        raise MissingInputError(ckpt)
    manifest = RunManifest(
        "train-policy", cfg.content_hash(), args.seed, args.scale,
        {"variants": variants, "translator": ckpt, "out": args.out}, args.out,
    )
    manifest.write_initial()
    inputs = [
        InputConfig(v, translator_ckpt=ckpt, embed_cfg=cfg.embed_config())
        for v in variants
    ]
    report = run_experiment(
        cfg.train_cfg(),
        inputs,
        args.scale,
        named_stream(args.seed, "policy"),
        _env_setup(cfg),
        args.out,
        dry_run=args.dry_run,
    )
    manifest.finalize(
        [] if args.dry_run else _collect_files(args.out),
        status="dry-run" if args.dry_run else "ok",
    )
    print(
        f"{'planned' if args.dry_run else 'trained'} "
        f"{report.evaluated_checkpoints} evaluated checkpoints under {args.out}"
    )
    return 0


def cmd_evaluate(cfg: WorkbenchConfig, args) -> int:
    if not os.path.isfile(args.policy):
        raise MissingInputError(args.policy)
    needs_ckpt = args.variant in ("translated", "embedded")
    ckpt = _resolve_translator(args, needs_ckpt)
    out_dir = args.out or os.path.dirname(args.policy) or "."
    manifest = RunManifest(
        "evaluate", cfg.content_hash(), args.seed, args.scale,
        {"policy": args.policy, "variant": args.variant, "episodes": args.episodes},
        out_dir,
    )
    manifest.write_initial()
    if args.dry_run:
        manifest.finalize([], status="dry-run")
        return 0
    setup = _env_setup(cfg)
    input_cfg = InputConfig(args.variant, translator_ckpt=ckpt, embed_cfg=cfg.embed_config())
    pipeline = ObservationPipeline(input_cfg, setup.camera)
    train_cfg = cfg.train_cfg()
    policy = load_policy(args.policy, pipeline.obs_spec, train_cfg)
    env = TriangulationEnv(setup, train_cfg.horizon)
    result, _ = evaluate(
        policy, env, pipeline, args.episodes, named_stream(args.seed, "policy")
    )
    line = (
        f"{result.success_rate:.4f},{result.mean_steps_to_success:.4f},"
        f"{result.mean_reward:.4f},{int(result.no_success)}"
    )
    out_path = os.path.join(out_dir, "eval_single.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("success_rate,mean_steps,mean_reward,no_success\n" + line + "\n")
    manifest.finalize([out_path])
    print("success_rate,mean_steps,mean_reward,no_success")
    print(line)
    return 0


def _smooth_curves(run_dir: str, frac: float):
    path = os.path.join(run_dir, "train_log.csv")
    rows = np.genfromtxt(path, delimiter=",", names=True)
    t = np.atleast_1d(rows["wall_seconds"]).astype(np.float64)
    t = t + np.arange(len(t)) * 1e-9
    loss = np.atleast_1d(rows["loss"]).astype(np.float64)
    rew = np.atleast_1d(rows["mean_reward"]).astype(np.float64)
    if len(t) < 2:
        return t, loss, rew
    return t, metrics_mod.lowess(t, loss, frac), metrics_mod.lowess(t, rew, frac)


def cmd_report(cfg: WorkbenchConfig, args) -> int:
    exp_dir = args.experiment
    if not os.path.isdir(exp_dir):
        raise MissingInputError(exp_dir)
    out_dir = args.out or exp_dir
    manifest = RunManifest(
        "report", cfg.content_hash(), args.seed, args.scale,
        {"experiment": exp_dir, "out": out_dir}, out_dir,
    )
    manifest.write_initial()
    if args.dry_run:
        manifest.finalize([], status="dry-run")
        return 0

    frac = 0.3
    fig7 = ["variant,run,wall_seconds,loss_smooth"]
    fig8 = ["variant,run,wall_seconds,reward_smooth"]
    best_rows: dict[str, list[tuple[float, float]]] = {}
    run_dirs = sorted(glob.glob(os.path.join(exp_dir, "*", "run*")))
    if not run_dirs:
        raise MissingInputError(exp_dir, f"no runs found under {exp_dir}")
    for run_dir in run_dirs:
        variant = os.path.basename(os.path.dirname(run_dir))
        run = os.path.basename(run_dir)
        t, loss_s, rew_s = _smooth_curves(run_dir, frac)
        for ti, li, ri in zip(t, loss_s, rew_s):
            fig7.append(f"{variant},{run},{ti:.3f},{li:.6f}")
            fig8.append(f"{variant},{run},{ti:.3f},{ri:.6f}")
        ev = np.genfromtxt(
            os.path.join(run_dir, "eval.csv"), delimiter=",", names=True
        )
        succ = np.atleast_1d(ev["success_rate"])
        steps = np.atleast_1d(ev["mean_steps"])
        best = int(np.argmax(succ))
        best_rows.setdefault(variant, []).append((float(succ[best]), float(steps[best])))

    fig9 = ["variant,runs,mean_best_success,median_best_success"]
    fig10 = ["variant,runs,mean_best_steps,median_best_steps"]
    for variant, rows in sorted(best_rows.items()):
        succ = [r[0] for r in rows]
        steps = [r[1] for r in rows]
        fig9.append(
            f"{variant},{len(rows)},{np.mean(succ):.4f},{np.median(succ):.4f}"
        )
        fig10.append(
            f"{variant},{len(rows)},{np.mean(steps):.4f},{np.median(steps):.4f}"
        )

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, lines in (
        ("fig7_loss.csv", fig7),
        ("fig8_reward.csv", fig8),
        ("fig9_success.csv", fig9),
        ("fig10_steps.csv", fig10),
    ):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        written.append(path)
    manifest.finalize(written)
    print(f"wrote report CSVs to {out_dir}")
    return 0


# ---- score-frame -----------------------------------------------------------------


def cmd_score_frame(cfg: WorkbenchConfig, args) -> int:
    if not os.path.isfile(args.frame):
        raise MissingInputError(args.frame)
    if not os.path.isfile(args.pose):
        raise MissingInputError(args.pose)
    img = read_image(args.frame)
    with open(args.pose, "r", encoding="utf-8") as fh:
        nums = [float(v) for v in fh.read().split()]
    if len(nums) != 15:
        raise ContractError(
            "pose file must hold 9 gripper coordinates then 6 endpoint coordinates"
        )
    grips = (np.array(nums[0:3]), np.array(nums[3:6]), np.array(nums[6:9]))
    ends = (np.array(nums[9:12]), np.array(nums[12:15]))
    reward_cfg = cfg.reward_config(resolution=(img.width, img.height))
    report = evaluate_reward(img, ends, grips, reward_cfg)
    print(report.csv_row())
    return 0


# ---- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog=PROG, description="tissue-triangulation sim-to-real workbench"
    )
    ap.add_argument("--config", default=None, help="workbench config file (INI)")
    ap.add_argument("--seed", type=int, default=0, help="master seed")
    ap.add_argument("--scale", type=float, default=1.0, help="protocol scale factor")
    ap.add_argument("--dry-run", action="store_true", help="validate and plan only")
    ap.add_argument("--force", action="store_true", help="overwrite existing outputs")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="render source/target image datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--count-source", type=int, default=None)
    g.add_argument("--count-target", type=int, default=None)

    t = sub.add_parser("train-translator", help="train the image translator")
    t.add_argument("--data", required=True, help="dataset dir with source/ and target/")
    t.add_argument("--out", required=True)

    s = sub.add_parser("select-translator", help="score checkpoints and pick the top set")
    s.add_argument("--ckpts", required=True, help="translator checkpoint dir")
    s.add_argument("--data", required=True)

    p = sub.add_parser("train-policy", help="run the observation-variant experiment")
    p.add_argument("--variants", default="original,translated,embedded")
    p.add_argument("--translator", default=None)
    p.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="evaluate a saved policy checkpoint")
    e.add_argument("--policy", required=True)
    e.add_argument("--variant", default="original")
    e.add_argument("--translator", default=None)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--out", default=None)

    r = sub.add_parser("report", help="emit smoothed curves and aggregate tables")
    r.add_argument("--experiment", required=True)
    r.add_argument("--out", default=None)

    f = sub.add_parser("score-frame", help="score one frame against a pose file")
    f.add_argument("frame", help="PPM frame")
    f.add_argument("pose", help="9 gripper coords + 6 endpoint coords, whitespace-separated")
    return ap


_COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train-translator": cmd_train_translator,
    "select-translator": cmd_select_translator,
    "train-policy": cmd_train_policy,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "score-frame": cmd_score_frame,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = (
            WorkbenchConfig.load(args.config)
            if args.config
            else WorkbenchConfig.defaults().validate()
        )
        return _COMMANDS[args.command](cfg, args) or 0
    except (ConfigError, ContractError, MissingInputError) as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2
    except TrisimError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
