"""Command-line entry point.

Subcommands: genscan | synth | train | eval | gradcheck. Common flags:
--config PATH (JSON run config), --seed N (override), --force (overwrite
existing outputs), --jobs N (scene-level parallelism; OODLAB_JOBS is the
default). Exit codes: 0 success, 2 config error, 3 output collision,
4 numeric failure.

All randomness flows from the single top-level seed through per-scene
stream ids; each stage uses its own stream-id namespace so streams are
never reused across stages. Output files are written atomically (temp file
+ rename) and every command records a RunManifest.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .core import LabelSpace, RngStream, Scene
from .io import generate_scan, load_asset_dir, read_scene, write_scene
from .losses import run_gradient_checks, softmax_head
from .metrics import (
    ScoredPoints,
    UndefinedMetricError,
    aupr,
    auroc,
    coverage_curves,
    miou_old,
    po_histogram,
    write_curves_csv,
    write_histogram_csv,
)
from .model import (
    TrainingDiverged,
    forward,
    load_checkpoint,
    save_checkpoint,
    score_maxlogit,
    score_msp,
    score_outlier_prob,
    train,
)
from .synthesis import resize_existing, synthesize_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COLLISION = 3
EXIT_NUMERIC = 4

# stream-id namespaces, one per stage, so (seed, stream) pairs never repeat
STREAM_SYNTH = 1 << 32
STREAM_TRAIN = 1 << 33


class OutputCollision(RuntimeError):
    pass


def _scene_name(i: int) -> str:
    return f"{i:06d}"


def _parallel(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _check_collisions(paths, force: bool):
    if force:
        return
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing:
        raise OutputCollision(
            f"output exists (use --force to overwrite): {existing[0]}"
        )


def _write_scene_atomic(scene: Scene, path_points: Path, path_labels: Path):
    tmp_p, tmp_l = f"{path_points}.tmp", f"{path_labels}.tmp"
    write_scene(scene, tmp_p, tmp_l)
    os.replace(tmp_p, path_points)
    os.replace(tmp_l, path_labels)


def _scene_pairs(directory: Path) -> list[tuple[Path, Path]]:
    pairs = []
    for bin_path in sorted(directory.glob("*.bin")):
        label_path = bin_path.with_suffix(".label")
        if not label_path.exists():
            raise ConfigError(f"missing label file for {bin_path}")
        pairs.append((bin_path, label_path))
    if not pairs:
        raise ConfigError(f"no scene files in {directory}")
    return pairs


def cmd_genscan(cfg: RunConfig, force: bool, jobs: int) -> int:
    scan_cfg = cfg.scan.build()
    if cfg.scan_count < 1:
        raise ConfigError("scan_count: must be >= 1")
    out_dir = Path(cfg.scan_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [_scene_name(i) for i in range(cfg.scan_count)]
    targets = [out_dir / f"{n}{ext}" for n in names for ext in (".bin", ".label")]
    _check_collisions(targets, force)

    def make(i: int) -> Scene:
        return generate_scan(scan_cfg, RngStream(cfg.seed, i))

    scenes = _parallel(make, range(cfg.scan_count), jobs)
    outputs = []
    for name, scene in zip(names, scenes):
        p, l = out_dir / f"{name}.bin", out_dir / f"{name}.label"
        _write_scene_atomic(scene, p, l)
        outputs += [p.name, l.name]
    cfgmod.write_manifest(out_dir / "manifest.json", "genscan", cfg, {}, outputs)
    return EXIT_OK


def cmd_synth(cfg: RunConfig, force: bool, jobs: int) -> int:
    mode = cfg.synthesis.mode
    synth_cfg = cfg.synthesis.build()
    space = LabelSpace(cfg.num_classes)
    in_dir = Path(cfg.scan_dir)
    if not in_dir.is_dir():
        raise ConfigError(f"scan_dir does not exist: {in_dir}")
    pairs = _scene_pairs(in_dir)

    assets = []
    if mode in ("asset", "both"):
        asset_dir = Path(cfg.asset_dir)
        if not asset_dir.is_dir():
            raise ConfigError(f"asset_dir does not exist: {asset_dir}")
        assets = load_asset_dir(
            asset_dir, count=cfg.synthesis.asset_sample_count,
            rng=RngStream(cfg.seed, STREAM_SYNTH - 1),
        )
        if not assets:
            raise ConfigError(f"asset_dir is empty: {asset_dir}")

    out_dir = Path(cfg.synth_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [out_dir / p.name for p, _ in pairs]
    targets += [out_dir / l.name for _, l in pairs]
    targets.append(out_dir / "merge_reports.json")
    _check_collisions(targets, force)

    def process(item):
        i, (bin_path, label_path) = item
        scene = read_scene(bin_path, label_path)
        rng = RngStream(cfg.seed, STREAM_SYNTH + i).generator()
        reports = []
        if mode in ("resize", "both"):
            scene, _ = resize_existing(
                scene, cfg.synthesis.resize_target_class, space,
                (cfg.synthesis.resize_scale_min, cfg.synthesis.resize_scale_max),
                rng, cluster_threshold=cfg.synthesis.cluster_threshold,
            )
        if mode in ("asset", "both"):
            scene, reports = synthesize_scene(scene, assets, space, synth_cfg, rng)
        return scene, reports

    results = _parallel(process, list(enumerate(pairs)), jobs)
    outputs = []
    all_reports = {}
    inputs = {}
    for (bin_path, label_path), (scene, reports) in zip(pairs, results):
        inputs[bin_path.name] = cfgmod.file_digest(bin_path)
        inputs[label_path.name] = cfgmod.file_digest(label_path)
        _write_scene_atomic(scene, out_dir / bin_path.name, out_dir / label_path.name)
        outputs += [bin_path.name, label_path.name]
        all_reports[bin_path.stem] = [
            {
                "object_id": r.object_id,
                "indices": r.indices.tolist(),
                "old_radii": [repr(v) for v in r.old_radii.tolist()],
                "new_radii": [repr(v) for v in r.new_radii.tolist()],
            }
            for r in reports
        ]
    cfgmod.atomic_write_text(
        out_dir / "merge_reports.json",
        json.dumps(all_reports, indent=2, sort_keys=True) + "\n",
    )
    outputs.append("merge_reports.json")
    cfgmod.write_manifest(out_dir / "manifest.json", "synth", cfg, inputs, outputs)
    return EXIT_OK


def cmd_train(cfg: RunConfig, force: bool, jobs: int) -> int:
    train_cfg = cfg.train.build(cfg.seed)
    loss_cfg = cfg.loss.build()
    feature_cfg = cfg.features.build()
    space = LabelSpace(cfg.num_classes)
    in_dir = Path(cfg.resolved_train_dir())
    if not in_dir.is_dir():
        raise ConfigError(f"training scene dir does not exist: {in_dir}")
    pairs = _scene_pairs(in_dir)
    scenes = [read_scene(p, l) for p, l in pairs]
    if train_cfg.loss_mode != "ce":
        if not any(space.is_outlier(s.labels).any() for s in scenes):
            raise ConfigError(
                f"train.loss_mode: {train_cfg.loss_mode!r} requires outlier "
                "labels in the training scenes"
            )

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(cfg.resolved_checkpoint())
    log_path = out_dir / "train_log.csv"
    _check_collisions([ckpt_path, log_path], force)

    try:
        params, beta, log = train(
            scenes, space, feature_cfg, train_cfg, loss_cfg,
            rng=RngStream(cfg.seed, STREAM_TRAIN),
        )
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    save_checkpoint(ckpt_path, params, beta)
    lines = ["epoch,loss"]
    lines += [f"{e},{repr(v)}" for e, v in enumerate(log.epoch_losses)]
    cfgmod.atomic_write_text(log_path, "\n".join(lines) + "\n")
    inputs = {}
    for p, l in pairs:
        inputs[p.name] = cfgmod.file_digest(p)
        inputs[l.name] = cfgmod.file_digest(l)
    cfgmod.write_manifest(
        out_dir / "manifest.json", "train", cfg, inputs,
        [ckpt_path.name, log_path.name],
    )
    return EXIT_OK


def cmd_eval(cfg: RunConfig, force: bool, jobs: int) -> int:
    space = LabelSpace(cfg.num_classes)
    feature_cfg = cfg.features.build()
    grid = cfg.metrics.build_grid()
    ckpt_path = Path(cfg.resolved_checkpoint())
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint does not exist: {ckpt_path}")
    in_dir = Path(cfg.resolved_eval_dir())
    if not in_dir.is_dir():
        raise ConfigError(f"eval scene dir does not exist: {in_dir}")
    pairs = _scene_pairs(in_dir)
    params, _beta = load_checkpoint(ckpt_path)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / f"{name}.csv" for name in ("summary", "curves", "histogram")}
    _check_collisions(list(paths.values()), force)

    from .model import extract_features  # local import keeps module load light

    def process(pair):
        scene = read_scene(*pair)
        head = forward(extract_features(scene, feature_cfg), params)
        probs = softmax_head(head)
        pred = np.argmax(probs.full, axis=1) + 1
        return (
            score_outlier_prob(probs),
            score_msp(probs),
            score_maxlogit(head.inlier_logits),
            pred,
            scene.labels,
        )

    results = _parallel(process, pairs, jobs)
    p_o = np.concatenate([r[0] for r in results])
    msp = np.concatenate([r[1] for r in results])
    maxlogit = np.concatenate([r[2] for r in results])
    pred = np.concatenate([r[3] for r in results])
    truth = np.concatenate([r[4] for r in results])
    is_outlier = truth > space.num_classes
    if not is_outlier.any():
        print("warning: eval set contains no outlier points; AUPR/AUROC are NA",
              file=sys.stderr)

    miou = miou_old(pred, truth, space.num_classes)
    lines = ["score,aupr,auroc,miou_old"]
    for name, scores in (("p_o", p_o), ("msp", msp), ("maxlogit", maxlogit)):
        try:
            pr = repr(aupr(scores, is_outlier))
            roc = repr(auroc(scores, is_outlier))
        except UndefinedMetricError:
            pr, roc = "NA", "NA"
        lines.append(f"{name},{pr},{roc},{repr(miou)}")
    cfgmod.atomic_write_text(paths["summary"], "\n".join(lines) + "\n")

    points = ScoredPoints(p_o, is_outlier, pred, truth)
    curves = coverage_curves(points, space.num_classes, grid=grid)
    write_curves_csv(paths["curves"], curves)
    write_histogram_csv(paths["histogram"], po_histogram(p_o, is_outlier))

    inputs = {ckpt_path.name: cfgmod.file_digest(ckpt_path)}
    for p, l in pairs:
        inputs[p.name] = cfgmod.file_digest(p)
        inputs[l.name] = cfgmod.file_digest(l)
    cfgmod.write_manifest(
        out_dir / "manifest.json", "eval", cfg, inputs,
        [p.name for p in paths.values()],
    )
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, force: bool, jobs: int) -> int:
    gc = cfg.gradcheck
    results = run_gradient_checks(
        num_instances=gc.instances,
        max_points=gc.max_points,
        num_classes=gc.num_classes,
        sigma=gc.sigma,
        seed=cfg.seed,
        step=gc.step,
        probes=gc.probes,
    )
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "gradcheck.csv"
    _check_collisions([report_path], force)

    all_pass = True
    lines = ["loss,max_rel_error,worst_seed,tolerance,pass"]
    print(f"{'loss':<16} {'max rel error':>14} {'worst seed':>11} result")
    for name, (err, worst) in results.items():
        ok = err <= gc.tolerance
        all_pass &= ok
        verdict = "pass" if ok else "FAIL"
        print(f"{name:<16} {err:>14.3e} {worst:>11d} {verdict}")
        lines.append(f"{name},{repr(err)},{worst},{repr(gc.tolerance)},{verdict}")
    cfgmod.atomic_write_text(report_path, "\n".join(lines) + "\n")
    cfgmod.write_manifest(
        out_dir / "manifest.json", "gradcheck", cfg, {}, [report_path.name]
    )
    return EXIT_OK if all_pass else EXIT_NUMERIC


COMMANDS = {
    "genscan": cmd_genscan,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodlab",
        description="Desk-scale abstaining-penalty anomaly detection pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run config path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel scene workers (default: $OODLAB_JOBS or 1)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    jobs = args.jobs
    if jobs is None:
        jobs = int(os.environ.get("OODLAB_JOBS", "1"))
    try:
        overrides = {} if args.seed is None else {"seed": args.seed}
        cfg = cfgmod.load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args.force, jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputCollision as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COLLISION


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
