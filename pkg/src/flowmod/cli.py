"""Command-line surface for the full pipeline.

Subcommands: gen-data, compute-flow, train, detect, link, eval, ablate.
Every command takes --config/--seed/--out/--force, writes its artifact plus
a ``<command>.log`` with the seed, config hash and wall time, and stamps a
``.meta`` sidecar onto artifacts so downstream commands can refuse
mismatched inputs. Exit codes: 0 success, 1 usage error, 2 input error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import (ConfigError, RunConfig, config_hash, load_config,
                     save_config, with_overrides)
from .detector import Detection
from .pipeline import (RUN_MODES, Streams, build_streams, evaluate_streams,
                       evaluate_tubes, frame_detections, gt_tubes_of,
                       link_dataset, split_samples, train_streams)
from .synthdata import DatasetError, generate, read_dataset, write_dataset
from .tubes import read_tubes, write_tubes

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_RUNTIME = 3


class InputError(Exception):
    """Missing or inconsistent inputs; maps to exit code 2."""


def _read_meta(path: Path) -> dict[str, str]:
    meta: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def _write_meta(path: Path, **entries: str) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()), encoding="utf-8")


def _write_log(out: Path, command: str, cfg: RunConfig, t0: float, **extra: str) -> None:
    lines = {"command": command, "seed": str(cfg.seed),
             "config_hash": config_hash(cfg),
             "wall_time_s": f"{time.perf_counter() - t0:.3f}", **extra}
    (out / f"{command}.log").write_text(
        "".join(f"{k}={v}\n" for k, v in lines.items()), encoding="utf-8")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"{what} not found at {path}; run the producing command first")
    return path


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise InputError(f"{path} already exists; pass --force to overwrite")


def _dataset_hash(root: Path) -> str:
    h = hashlib.sha256()
    manifest = root / "manifest.txt"
    h.update(manifest.read_bytes())
    for gt in sorted(root.glob("videos/*/gt.txt")):
        h.update(gt.read_bytes())
    return h.hexdigest()[:16]


def _dataset_dir(cfg: RunConfig) -> Path:
    return Path(cfg.data_dir)


def _load_samples(cfg: RunConfig):
    root = _dataset_dir(cfg)
    _require(root / "manifest.txt", "dataset manifest")
    samples, classes = read_dataset(root)
    if not samples:
        raise InputError(f"{root}: dataset is empty")
    return samples, classes, _dataset_hash(root)


# ----- commands ---------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Path, force: bool) -> None:
    t0 = time.perf_counter()
    root = _dataset_dir(cfg)
    if (root / "manifest.txt").exists() and not force:
        raise InputError(f"{root} already holds a dataset; pass --force to regenerate")
    gen_cfg = replace(cfg.gen, texture_seed=cfg.seed)
    samples = generate(gen_cfg)
    write_dataset(samples, root, gen_cfg.classes, force=True,
                  extra_manifest={"config_hash": config_hash(cfg),
                                  "flow_quality": gen_cfg.flow_quality})
    out.mkdir(parents=True, exist_ok=True)
    _write_log(out, "gen-data", cfg, t0, videos=str(len(samples)),
               dataset_hash=_dataset_hash(root))
    print(f"wrote {len(samples)} videos to {root}")


def cmd_compute_flow(cfg: RunConfig, out: Path, force: bool) -> None:
    from .flow import estimate_flow, write_flow
    t0 = time.perf_counter()
    samples, _, _ = _load_samples(cfg)
    root = _dataset_dir(cfg)
    quality = cfg.gen.flow_quality
    first_flow = root / "videos" / samples[0].video_id / "flow_000.flo"
    if first_flow.exists() and not force:
        raise InputError(f"{root} already holds flow fields; pass --force to recompute")
    count = 0
    for s in samples:
        vdir = root / "videos" / s.video_id
        t = len(s.frames)
        flows = np.empty((t,) + s.frames.shape[1:3] + (2,))
        for i in range(t - 1):
            flows[i] = estimate_flow(s.frames[i], s.frames[i + 1], quality)
        flows[t - 1] = flows[t - 2]
        for i in range(t):
            write_flow(flows[i], vdir / f"flow_{i:03d}.flo")
            count += 1
    out.mkdir(parents=True, exist_ok=True)
    _write_log(out, "compute-flow", cfg, t0, fields=str(count), quality=quality)
    print(f"recomputed {count} flow fields ({quality}) in {root}")


def _build_for_config(cfg: RunConfig) -> Streams:
    return build_streams(cfg.mode, cfg.detector, cfg.condition, seed=cfg.seed)


def cmd_train(cfg: RunConfig, out: Path, force: bool) -> None:
    t0 = time.perf_counter()
    samples, _, data_hash = _load_samples(cfg)
    ckpt_path = out / "checkpoint.fmw"
    _refuse_overwrite(ckpt_path, force)
    out.mkdir(parents=True, exist_ok=True)
    streams = _build_for_config(cfg)
    train_streams(streams, split_samples(samples, "train"), cfg.schedule, cfg.seed)
    ckpt.save_checkpoint(streams.primary.parameters(), ckpt_path)
    meta = {"config_hash": config_hash(cfg), "dataset_hash": data_hash,
            "seed": str(cfg.seed), "mode": cfg.mode,
            "diverged": str(streams.logs["primary"].diverged).lower()}
    if streams.flow is not None:
        ckpt.save_checkpoint(streams.flow.parameters(), out / "checkpoint_flow.fmw")
        meta["flow_checkpoint"] = "checkpoint_flow.fmw"
    _write_meta(ckpt_path.with_suffix(".fmw.meta"), **meta)
    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr", "eval_map"])
        for stats in streams.logs["primary"].epochs:
            writer.writerow([stats.epoch, f"{stats.loss:.9g}", f"{stats.lr:.9g}",
                             f"{stats.eval_map:.9g}"])
    _write_log(out, "train", cfg, t0, dataset_hash=data_hash,
               parameters=str(streams.parameter_count()))
    if streams.logs["primary"].diverged:
        raise RuntimeError("training diverged; checkpoint holds the last clean epoch")
    print(f"trained {cfg.mode} ({streams.parameter_count()} parameters) -> {ckpt_path}")


def _load_streams(cfg: RunConfig, out: Path) -> tuple[Streams, dict[str, str]]:
    ckpt_path = _require(out / "checkpoint.fmw", "checkpoint")
    meta = _read_meta(_require(ckpt_path.with_suffix(".fmw.meta"), "checkpoint meta"))
    streams = _build_for_config(cfg)
    ckpt.restore_parameters(streams.primary.parameters(),
                            ckpt.load_checkpoint(ckpt_path))
    if streams.flow is not None:
        flow_path = _require(out / "checkpoint_flow.fmw", "flow-stream checkpoint")
        ckpt.restore_parameters(streams.flow.parameters(),
                                ckpt.load_checkpoint(flow_path))
    return streams, meta


def cmd_detect(cfg: RunConfig, out: Path, force: bool) -> None:
    t0 = time.perf_counter()
    samples, _, data_hash = _load_samples(cfg)
    streams, meta = _load_streams(cfg, out)
    if meta.get("dataset_hash") not in (None, data_hash) and not force:
        raise InputError(
            f"checkpoint was trained on dataset {meta.get('dataset_hash')} but "
            f"{_dataset_dir(cfg)} hashes to {data_hash}; pass --force to override")
    det_path = out / "detections.txt"
    _refuse_overwrite(det_path, force)
    test = split_samples(samples, "test")
    per_video = frame_detections(streams, test)
    n = 0
    with open(det_path, "w", encoding="utf-8") as fh:
        for video_id in sorted(per_video):
            for dets in per_video[video_id]:
                for d in dets:
                    coords = ",".join(f"{v:.9g}" for v in d.box)
                    fh.write(f"{d.video_id},{d.frame_index},{d.class_id},"
                             f"{d.score:.9g},{coords}\n")
                    n += 1
    _write_meta(det_path.with_suffix(".txt.meta"), config_hash=config_hash(cfg),
                dataset_hash=data_hash, checkpoint=str(out / "checkpoint.fmw"))
    _write_log(out, "detect", cfg, t0, detections=str(n),
               frames=str(sum(len(s.frames) for s in test)))
    print(f"wrote {n} detections for {len(test)} test videos -> {det_path}")


def read_detections(path: str | Path) -> dict[str, dict[int, list[Detection]]]:
    """Parse the line format back into per-video, per-frame detections."""
    out: dict[str, dict[int, list[Detection]]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        vid, frame, class_id, score, x0, y0, x1, y1 = line.split(",")
        det = Detection(box=np.array([float(x0), float(y0), float(x1), float(y1)]),
                        class_id=int(class_id), score=float(score),
                        frame_index=int(frame), video_id=vid)
        out.setdefault(vid, {}).setdefault(int(frame), []).append(det)
    return out


def cmd_link(cfg: RunConfig, out: Path, force: bool) -> None:
    t0 = time.perf_counter()
    det_path = _require(out / "detections.txt", "detections file")
    tubes_path = out / "tubes.txt"
    _refuse_overwrite(tubes_path, force)
    per_video_frames = read_detections(det_path)
    per_video = {}
    for vid, frames in per_video_frames.items():
        n_frames = max(frames) + 1 if frames else 0
        per_video[vid] = [frames.get(t, []) for t in range(n_frames)]
    tubes = link_dataset(per_video, cfg.detector.num_classes, cfg.link)
    write_tubes(tubes, tubes_path)
    det_meta = _read_meta(det_path.with_suffix(".txt.meta"))
    _write_meta(tubes_path.with_suffix(".txt.meta"), config_hash=config_hash(cfg),
                dataset_hash=det_meta.get("dataset_hash", ""))
    _write_log(out, "link", cfg, t0, tubes=str(len(tubes)))
    print(f"linked {len(tubes)} tubes -> {tubes_path}")


def cmd_eval(cfg: RunConfig, out: Path, force: bool) -> None:
    t0 = time.perf_counter()
    samples, _, data_hash = _load_samples(cfg)
    tubes_path = _require(out / "tubes.txt", "tubes file")
    meta_path = tubes_path.with_suffix(".txt.meta")
    if meta_path.exists():
        meta = _read_meta(meta_path)
        if meta.get("dataset_hash") not in ("", None, data_hash) and not force:
            raise InputError(
                f"tubes were produced against dataset {meta.get('dataset_hash')} but "
                f"{_dataset_dir(cfg)} hashes to {data_hash}; pass --force to override")
    metrics_path = out / "metrics.csv"
    _refuse_overwrite(metrics_path, force)
    tubes = read_tubes(tubes_path)
    gt = gt_tubes_of(split_samples(samples, "test"))
    report = evaluate_tubes(tubes, gt)
    _write_metrics(metrics_path, report, cfg)
    summary = [f"{k}={report[k]:.6f}" for k in sorted(report) if k.startswith("map")]
    (out / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    _write_log(out, "eval", cfg, t0, dataset_hash=data_hash)
    print("\n".join(summary))


def _write_metrics(path: Path, report: dict, cfg: RunConfig) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["config_hash", config_hash(cfg)])
        for key in sorted(k for k in report if k.startswith("map")):
            writer.writerow([key, f"{report[key]:.9g}"])
        for class_id, ap in sorted(report.get("ap@0.5", {}).items()):
            writer.writerow([f"ap@0.5/class{class_id}", f"{ap:.9g}"])


AXES = ("site", "kernel", "flow_quality", "mode")


def _ablation_values(cfg: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    if axis == "site":
        return [(site, replace(cfg, mode="two_in_one",
                               condition=replace(cfg.condition, modulate_at=(site,))))
                for site in ("conv1", "conv2", "conv3", "conv4")]
    if axis == "kernel":
        return [(kernel, replace(cfg, mode="two_in_one",
                                 condition=replace(cfg.condition, last_kernel=kernel)))
                for kernel in ("1x1", "3x3")]
    if axis == "flow_quality":
        return [(quality, replace(cfg, mode="two_in_one",
                                  gen=replace(cfg.gen, flow_quality=quality)))
                for quality in ("fast", "iterative")]
    if axis == "mode":
        return [(mode, replace(cfg, mode=mode)) for mode in RUN_MODES]
    raise InputError(f"unknown ablation axis {axis!r} (expected one of {AXES})")


def cmd_ablate(cfg: RunConfig, out: Path, force: bool, axis: str) -> None:
    t0 = time.perf_counter()
    table_path = out / f"ablation_{axis}.csv"
    _refuse_overwrite(table_path, force)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[list[str]] = []

    def flush() -> None:
        with open(table_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([axis, "map@0.5", "map@0.5:0.95", "parameters",
                             "seconds_per_frame"])
            writer.writerows(rows)

    try:
        for value, run_cfg in _ablation_values(cfg, axis):
            gen_cfg = replace(run_cfg.gen, texture_seed=run_cfg.seed)
            samples = generate(gen_cfg)
            streams = build_streams(run_cfg.mode, run_cfg.detector,
                                    run_cfg.condition, seed=run_cfg.seed)
            train_streams(streams, split_samples(samples, "train"),
                          run_cfg.schedule, run_cfg.seed)
            report = evaluate_streams(streams, split_samples(samples, "test"),
                                      run_cfg.link)
            rows.append([value, f"{report['map@0.5']:.9g}",
                         f"{report['map@0.5:0.95']:.9g}",
                         str(report["parameters"]),
                         f"{report['seconds_per_frame']:.6f}"])
            flush()
            print(f"{axis}={value}: map@0.5={report['map@0.5']:.3f} "
                  f"params={report['parameters']}")
    except Exception:
        flush()
        print(f"ablation aborted; partial results kept at {table_path}",
              file=sys.stderr)
        raise
    _write_log(out, f"ablate_{axis}", cfg, t0, rows=str(len(rows)))
    print(f"wrote {table_path}")


# ----- entry point --------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowmod",
        description="Flow-conditioned action detection pipeline on synthetic videos")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": "render the synthetic dataset and its flow fields",
        "compute-flow": "recompute flow fields for an existing dataset",
        "train": "train the configured mode on the train split",
        "detect": "run the trained detector over the test split",
        "link": "link detections into action tubes",
        "eval": "score tubes against ground truth with video-mAP",
        "ablate": "sweep one axis and tabulate accuracy/size/speed",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help="key=value config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", type=Path, default=None, help="artifact directory")
        p.add_argument("--force", action="store_true",
                       help="allow overwriting existing artifacts")
        if name == "ablate":
            p.add_argument("--axis", choices=AXES, required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cfg = with_overrides(cfg, seed=args.seed,
                         out_dir=str(args.out) if args.out else None)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "run_config.txt")
    handlers = {
        "gen-data": cmd_gen_data,
        "compute-flow": cmd_compute_flow,
        "train": cmd_train,
        "detect": cmd_detect,
        "link": cmd_link,
        "eval": cmd_eval,
    }
    try:
        if args.command == "ablate":
            cmd_ablate(cfg, out, args.force, args.axis)
        else:
            handlers[args.command](cfg, out, args.force)
    except (InputError, DatasetError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
