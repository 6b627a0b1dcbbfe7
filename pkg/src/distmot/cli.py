"""Command-line entry point for the distillation toolkit.

Subcommands:
    synth    generate a synthetic dataset (images, ground truth, seqinfo)
    prepare  split ground truth into per-frame label files and build the index
    train    run one distillation training cell from a config file
    ablate   run the staged ablation grid from a base config file
    track    associate detections into tracks with the greedy IoU tracker
    eval     score prediction files against ground truth
    report   merge training-run reports into one CSV + JSON pair

Config files are flat ``key = value`` text; '#' starts a comment. Recognized
keys: loss, head, alpha, teacher.size, teacher.hidden_dim, teacher.patch,
teacher.seed, epochs, steps_per_epoch, lr, batch_size, seed, student_channels,
student_hidden, data.root, data.sequence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import (
    DatasetLayout,
    generate_synthetic_sequence,
    load_frames,
    load_sequence,
    parse_gt,
    serialize_gt,
    write_path_index,
    write_per_frame_labels,
    write_sequence,
)
from .experiment import (
    AblationGrid,
    DistillConfig,
    emit_report,
    greedy_iou_tracker,
    merge_reports,
    run_ablation,
    run_training,
)
from .metrics import MOTP_MODES, evaluate
from .models import TeacherConfig

_CONFIG_KEYS = frozenset({
    "loss", "head", "alpha", "teacher.size", "teacher.hidden_dim",
    "teacher.patch", "teacher.seed", "epochs", "steps_per_epoch", "lr",
    "batch_size", "seed", "student_channels", "student_hidden",
    "data.root", "data.sequence",
})


def parse_config_file(path: Path) -> dict[str, str]:
    """Read a flat key=value config file; later duplicate keys are errors."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in _CONFIG_KEYS:
            raise ValueError(
                f"{path}:{lineno}: unknown key {key!r}; known keys: "
                + ", ".join(sorted(_CONFIG_KEYS))
            )
        if key in values:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def distill_config_from_mapping(values: dict[str, str]) -> DistillConfig:
    """Build a DistillConfig from parsed config keys (data.* keys ignored)."""
    if "teacher.size" in values and "teacher.hidden_dim" in values:
        raise ValueError("give either teacher.size or teacher.hidden_dim, not both")
    patch = int(values.get("teacher.patch", 14))
    tseed = int(values.get("teacher.seed", 0))
    if "teacher.hidden_dim" in values:
        teacher = TeacherConfig(hidden_dim=int(values["teacher.hidden_dim"]),
                                patch=patch, seed=tseed)
    else:
        teacher = TeacherConfig.from_preset(values.get("teacher.size", "base"),
                                            patch=patch, seed=tseed)
    kwargs: dict = {"teacher": teacher}
    for key, field, cast in (
        ("loss", "loss", str),
        ("head", "head", str),
        ("alpha", "alpha", float),
        ("epochs", "epochs", int),
        ("steps_per_epoch", "steps_per_epoch", int),
        ("lr", "learning_rate", float),
        ("batch_size", "batch_size", int),
        ("seed", "seed", int),
        ("student_channels", "student_channels", int),
        ("student_hidden", "student_hidden", int),
    ):
        if key in values:
            kwargs[field] = cast(values[key])
    return DistillConfig(**kwargs)


def _load_training_data(args, values: dict[str, str]):
    root = args.data or values.get("data.root")
    name = args.seq or values.get("data.sequence")
    if not root:
        raise ValueError("no dataset root: pass --data or set data.root in the config")
    if not name:
        raise ValueError("no sequence name: pass --seq or set data.sequence in the config")
    layout = DatasetLayout(root=Path(root))
    seq = load_sequence(layout, name)
    return seq, load_frames(layout, seq)


def cmd_synth(args) -> int:
    seq, frames = generate_synthetic_sequence(
        n_objects=args.objects, n_frames=args.frames,
        image_w=args.width, image_h=args.height, seed=args.seed,
        min_size=args.min_size, max_size=args.max_size,
        max_speed=args.max_speed, name=args.name, fps=args.fps)
    layout = DatasetLayout(root=Path(args.out))
    write_sequence(layout, seq, frames)
    print(f"wrote sequence {seq.name!r} ({len(seq.frames)} frames, "
          f"{len(seq.track_ids)} tracks) under {layout.sequence_dir(seq.name)}")
    return 0


def cmd_prepare(args) -> int:
    layout = DatasetLayout(root=Path(args.root))
    names = args.seq or layout.sequence_names()
    if not names:
        raise ValueError(f"no sequences found under {layout.sequences_dir}")
    for name in names:
        seq = load_sequence(layout, name)
        count = write_per_frame_labels(layout, seq)
        print(f"{name}: {count} label files")
    index = write_path_index(layout)
    print(f"index: {index}")
    return 0


def cmd_train(args) -> int:
    values = parse_config_file(Path(args.config))
    cfg = distill_config_from_mapping(values)
    seq, frames = _load_training_data(args, values)
    log = run_training(cfg, seq, frames)
    paths = emit_report([log], Path(args.out), stem=args.stem)
    print(f"trained {log.steps} steps in {log.wall_time:.2f}s: "
          f"task {log.task[-1]:.6f} distill {log.distill[-1]:.6f} "
          f"combined {log.combined[-1]:.6f}")
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    values = parse_config_file(Path(args.config))
    base = distill_config_from_mapping(values)
    seq, frames = _load_training_data(args, values)
    report = run_ablation(AblationGrid(), base, seq, frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(report.to_json(), encoding="utf-8")
    (out / "ablation.csv").write_text(report.to_csv(), encoding="utf-8")
    w = report.winner
    print(f"winner: loss={w.loss} head={w.head} alpha={w.alpha} "
          f"size={w.teacher.size_preset}")
    print(f"wrote {out / 'ablation.json'}")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_track(args) -> int:
    layout = DatasetLayout(root=Path(args.data))
    seq = load_sequence(layout, args.seq)
    if args.dets:
        source = parse_gt(Path(args.dets).read_bytes(), name=args.seq,
                          image_w=seq.image_w, image_h=seq.image_h, fps=seq.fps)
    else:
        source = seq  # detector stand-in: ground-truth boxes, ids dropped
    detections = {f: [b.xywh for b in source.boxes_in_frame(f)] for f in seq.frames}
    pred = greedy_iou_tracker(detections, seq.image_w, seq.image_h,
                              name=seq.name, fps=seq.fps,
                              iou_threshold=args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(serialize_gt(pred), encoding="utf-8")
    print(f"tracked {len(pred.boxes)} boxes into {len(pred.track_ids)} tracks: {out}")
    return 0


def cmd_eval(args) -> int:
    if len(args.gt) != len(args.pred):
        raise ValueError(
            f"got {len(args.gt)} gt files but {len(args.pred)} prediction files")
    gt_seqs, pred_seqs = [], []
    for gt_path, pred_path in zip(args.gt, args.pred):
        name = Path(gt_path).stem
        gt_seqs.append(parse_gt(Path(gt_path).read_bytes(), name=name))
        pred_seqs.append(parse_gt(Path(pred_path).read_bytes(), name=name))
    report = evaluate(gt_seqs, pred_seqs, iou_threshold=args.threshold,
                      motp_mode=args.motp_mode)
    text = report.to_json() if args.json else report.to_csv()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        print(f"wrote {out}")
    else:
        print(text, end="")
    return 0


def cmd_report(args) -> int:
    paths = merge_reports([Path(p) for p in args.inputs], Path(args.out),
                          stem=args.stem)
    for path in paths:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distmot",
        description="Feature distillation and tracking-metric toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--objects", type=int, default=5)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--width", type=int, default=56)
    p.add_argument("--height", type=int, default=56)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-size", type=int, default=8)
    p.add_argument("--max-size", type=int, default=16)
    p.add_argument("--max-speed", type=float, default=3.0)
    p.add_argument("--name", default=None)
    p.add_argument("--fps", type=float, default=30.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="split gt into per-frame labels + index")
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--seq", nargs="*", default=None,
                   help="sequence names (default: all present)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--data", default=None, help="dataset root (overrides data.root)")
    p.add_argument("--seq", default=None, help="sequence name (overrides data.sequence)")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--stem", default="runs", help="report file stem")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the staged ablation grid")
    p.add_argument("--config", required=True, help="base key=value config file")
    p.add_argument("--data", default=None)
    p.add_argument("--seq", default=None)
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("track", help="run the greedy IoU tracker")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--seq", required=True, help="sequence name")
    p.add_argument("--dets", default=None,
                   help="detections file (default: the sequence's own gt boxes)")
    p.add_argument("--out", required=True, help="prediction file to write")
    p.add_argument("--threshold", type=float, default=0.3)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--gt", nargs="+", required=True, help="ground-truth files")
    p.add_argument("--pred", nargs="+", required=True, help="prediction files")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--motp-mode", choices=sorted(MOTP_MODES), default="distance")
    p.add_argument("--json", action="store_true", help="emit JSON instead of CSV")
    p.add_argument("--out", default=None, help="write here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge run reports")
    p.add_argument("--inputs", nargs="+", required=True, help="report JSON files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stem", default="merged")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
