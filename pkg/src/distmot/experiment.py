"""Training loop, staged ablation runner, greedy tracker, and run reports.

The trainer wires the whole pipeline together per step: frozen teacher
embedding -> spatial map, student conv stack -> adapter head -> distillation
loss, proxy task loss, alpha blend, backward, plain gradient-descent update.
Everything is seeded and bit-reproducible on the same build.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import (
    HeadParams,
    apply_head,
    flatten_per_sample,
    init_multi_head,
    init_single_head,
    patch_to_spatial,
)
from .data import BBox, Sequence, half_split
from .losses import (
    combined_loss,
    cosine_embedding_loss,
    mse_loss,
    validate_loss_kind,
)
from .metrics import iou
from .models import (
    StudentParams,
    SyntheticFrame,
    TeacherConfig,
    init_student,
    proxy_task_loss,
    render_center_heatmap,
    student_forward,
    teacher_forward,
)
from .tensor import Tensor

REPORT_SCHEMA_VERSION = 1
TRACKER_IOU_THRESHOLD = 0.3


class TrainingDiverged(RuntimeError):
    """The combined loss left the finite range; the run is unusable."""


@dataclass(frozen=True)
class DistillConfig:
    """One training cell: losses, head, blend weight, teacher, and budget.

    ``steps_per_epoch=0`` means one pass over the training frames per epoch.
    """

    loss: str = "cosine"
    head: str = "single"
    alpha: float = 0.5
    teacher: TeacherConfig = field(default_factory=lambda: TeacherConfig.from_preset("base"))
    epochs: int = 10
    steps_per_epoch: int = 0
    learning_rate: float = 0.05
    batch_size: int = 1
    seed: int = 0
    student_channels: int = 8
    student_hidden: int = 8

    def __post_init__(self):
        validate_loss_kind(self.loss)
        if self.head not in ("single", "multi"):
            raise ValueError(f"head must be 'single' or 'multi', got {self.head!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.steps_per_epoch < 0:
            raise ValueError(f"steps_per_epoch must be >= 0, got {self.steps_per_epoch}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.student_channels < 1 or self.student_hidden < 1:
            raise ValueError("student widths must be >= 1")

    def total_steps(self, n_frames: int) -> int:
        per_epoch = self.steps_per_epoch if self.steps_per_epoch else n_frames
        return self.epochs * per_epoch


@dataclass
class TrainingLog:
    """Per-step loss curves plus the trained parameters."""

    config: DistillConfig
    task: list[float] = field(default_factory=list)
    distill: list[float] = field(default_factory=list)
    combined: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    student: StudentParams | None = None
    head: HeadParams | None = None

    @property
    def steps(self) -> int:
        return len(self.combined)


def _teacher_target(seq: Sequence, cfg: DistillConfig) -> tuple[int, int, int]:
    gh = seq.image_h // cfg.teacher.patch
    gw = seq.image_w // cfg.teacher.patch
    return (cfg.teacher.hidden_dim, gh, gw)


def _init_head(cfg: DistillConfig, rng: np.random.Generator) -> HeadParams:
    if cfg.head == "single":
        return init_single_head(cfg.student_channels, cfg.teacher.hidden_dim, rng)
    return init_multi_head(cfg.student_channels, cfg.teacher.hidden_dim, rng)


def _distill_loss(kind: str, aligned: Tensor, teacher_map: Tensor) -> Tensor:
    # cosine compares flattened per-sample embeddings, MSE the raw 4-d maps
    if kind == "cosine":
        return cosine_embedding_loss(flatten_per_sample(aligned),
                                     flatten_per_sample(teacher_map))
    return mse_loss(aligned, teacher_map)


def _frame_losses(cfg: DistillConfig, frame: SyntheticFrame, heatmap: Tensor,
                  student: StudentParams, head: HeadParams,
                  target: tuple[int, int, int]) -> tuple[Tensor, Tensor]:
    teacher_map = patch_to_spatial(teacher_forward(frame, cfg.teacher))
    student_map = student_forward(frame, student)
    aligned = apply_head(student_map, head, target)
    return (proxy_task_loss(student_map, heatmap),
            _distill_loss(cfg.loss, aligned, teacher_map))


def _mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms)) if len(terms) > 1 else total


def _heatmaps(seq: Sequence, frames: list[SyntheticFrame],
              cfg: DistillConfig) -> dict[int, Tensor]:
    # ground-truth center heatmaps at the student map resolution
    sh, sw = seq.image_h // 4, seq.image_w // 4
    out = {}
    for frame in frames:
        boxes = [b.xywh for b in seq.boxes_in_frame(frame.frame_id)]
        out[frame.frame_id] = Tensor(
            render_center_heatmap(boxes, seq.image_h, seq.image_w, sh, sw))
    return out


def run_training(cfg: DistillConfig, seq: Sequence,
                 frames: list[SyntheticFrame]) -> TrainingLog:
    """Train student and head on one sequence; the teacher stays frozen.

    Frames are consumed round-robin, ``batch_size`` per step with losses
    averaged across the batch. Aborts with TrainingDiverged if the combined
    loss stops being finite.
    """
    if not frames:
        raise ValueError("run_training needs at least one frame")
    if seq.image_h % cfg.teacher.patch or seq.image_w % cfg.teacher.patch:
        raise ValueError(
            f"sequence {seq.image_w}x{seq.image_h} is not divisible by "
            f"teacher patch {cfg.teacher.patch}"
        )
    rng = np.random.default_rng(cfg.seed)
    student = init_student(cfg.student_channels, rng, cfg.student_hidden)
    head = _init_head(cfg, rng)
    target = _teacher_target(seq, cfg)
    heatmaps = _heatmaps(seq, frames, cfg)

    log = TrainingLog(config=cfg)
    params = student.parameters() + head.parameters()
    started = time.perf_counter()
    cursor = 0
    for _ in range(cfg.total_steps(len(frames))):
        task_terms, distill_terms = [], []
        for _ in range(cfg.batch_size):
            frame = frames[cursor % len(frames)]
            cursor += 1
            task, distill = _frame_losses(cfg, frame, heatmaps[frame.frame_id],
                                          student, head, target)
            task_terms.append(task)
            distill_terms.append(distill)
        task = _mean(task_terms)
        distill = _mean(distill_terms)
        combined = combined_loss(task, distill, cfg.alpha)
        value = combined.item()
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"combined loss became {value} at step {log.steps}"
            )
        log.task.append(task.item())
        log.distill.append(distill.item())
        log.combined.append(value)
        combined.backward()
        for p in params:
            if p.grad is not None:
                p.data = p.data - cfg.learning_rate * p.grad
                p.grad = None
    log.wall_time = time.perf_counter() - started
    log.student = student
    log.head = head
    return log


def evaluate_losses(cfg: DistillConfig, student: StudentParams, head: HeadParams,
                    seq: Sequence, frames: list[SyntheticFrame]) -> tuple[float, float, float]:
    """Mean (task, distill, combined) over the given frames, no updates."""
    if not frames:
        raise ValueError("evaluate_losses needs at least one frame")
    target = _teacher_target(seq, cfg)
    heatmaps = _heatmaps(seq, frames, cfg)
    task_sum = distill_sum = 0.0
    for frame in frames:
        task, distill = _frame_losses(cfg, frame, heatmaps[frame.frame_id],
                                      student, head, target)
        task_sum += task.item()
        distill_sum += distill.item()
    task_mean = task_sum / len(frames)
    distill_mean = distill_sum / len(frames)
    combined = (1.0 - cfg.alpha) * task_mean + cfg.alpha * distill_mean
    return task_mean, distill_mean, combined


# -- ablation -----------------------------------------------------------------------


@dataclass(frozen=True)
class AblationGrid:
    """The staged option grid; later stages inherit earlier winners."""

    losses: tuple[str, ...] = ("cosine", "mse")
    heads: tuple[str, ...] = ("single", "multi")
    alphas: tuple[float, ...] = (0.25, 0.5, 0.75)
    sizes: tuple[str, ...] = ("small", "base", "large")

    def __post_init__(self):
        if not (self.losses and self.heads and self.alphas and self.sizes):
            raise ValueError("every ablation stage needs at least one option")


@dataclass
class CellResult:
    label: str
    config: DistillConfig
    train_combined: float | None
    val_combined: float | None
    error: str | None = None


@dataclass
class StageResult:
    name: str
    rows: list[CellResult]
    winner: int

    @property
    def winner_row(self) -> CellResult:
        return self.rows[self.winner]


@dataclass
class AblationReport:
    stages: list[StageResult]
    winner: DistillConfig

    def to_json(self) -> str:
        def cell(c: CellResult) -> dict:
            return {
                "label": c.label,
                "loss": c.config.loss, "head": c.config.head,
                "alpha": c.config.alpha, "size": c.config.teacher.size_preset,
                "hidden_dim": c.config.teacher.hidden_dim,
                "train_combined": c.train_combined,
                "val_combined": c.val_combined,
                "error": c.error,
            }

        return json.dumps({
            "schema_version": REPORT_SCHEMA_VERSION,
            "stages": [
                {"name": s.name, "winner": s.winner, "rows": [cell(c) for c in s.rows]}
                for s in self.stages
            ],
            "winner": {
                "loss": self.winner.loss, "head": self.winner.head,
                "alpha": self.winner.alpha, "size": self.winner.teacher.size_preset,
            },
        }, indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["stage,option,loss,head,alpha,size,train_combined,val_combined,winner,error"]
        for stage in self.stages:
            for i, c in enumerate(stage.rows):
                lines.append(",".join([
                    stage.name, c.label, c.config.loss, c.config.head,
                    str(c.config.alpha), c.config.teacher.size_preset,
                    "" if c.train_combined is None else f"{c.train_combined:.6f}",
                    "" if c.val_combined is None else f"{c.val_combined:.6f}",
                    "1" if i == stage.winner else "0",
                    c.error or "",
                ]))
        return "\n".join(lines) + "\n"


def _run_cell(label: str, cfg: DistillConfig, train_seq: Sequence,
              train_frames: list[SyntheticFrame], val_seq: Sequence,
              val_frames: list[SyntheticFrame]) -> CellResult:
    try:
        log = run_training(cfg, train_seq, train_frames)
        _, _, val_combined = evaluate_losses(cfg, log.student, log.head, val_seq, val_frames)
        return CellResult(label=label, config=cfg,
                          train_combined=log.combined[-1], val_combined=val_combined)
    except (TrainingDiverged, ValueError) as exc:
        return CellResult(label=label, config=cfg, train_combined=None,
                          val_combined=None, error=str(exc))


def _pick_winner(rows: list[CellResult], stage: str) -> int:
    best = None
    for i, row in enumerate(rows):
        if row.error is not None:
            continue
        if best is None or row.val_combined < rows[best].val_combined:
            best = i  # strict <: ties keep the first listed option
    if best is None:
        raise TrainingDiverged(f"every cell of stage {stage!r} failed")
    return best


def run_ablation(grid: AblationGrid, base: DistillConfig, seq: Sequence,
                 frames: list[SyntheticFrame]) -> AblationReport:
    """Execute the staged grid: loss, then head, then alpha, then teacher size.

    Each stage varies one column, holding earlier winners (and the base
    config's defaults for later columns) fixed; the winner is the lowest
    final combined loss on the validation half of the data.
    """
    train_seq, val_seq = half_split(seq)
    train_ids = set(train_seq.frames)
    train_frames = [f for f in frames if f.frame_id in train_ids]
    val_frames = [f for f in frames if f.frame_id not in train_ids]
    if not train_frames or not val_frames:
        raise ValueError("both halves of the split need frames")

    def run_stage(name: str, configs: list[tuple[str, DistillConfig]]) -> StageResult:
        rows = [_run_cell(label, cfg, train_seq, train_frames, val_seq, val_frames)
                for label, cfg in configs]
        return StageResult(name=name, rows=rows, winner=_pick_winner(rows, name))

    current = base
    stages: list[StageResult] = []

    stage = run_stage("loss", [
        (loss, dataclasses.replace(current, loss=loss)) for loss in grid.losses])
    current = stage.winner_row.config
    stages.append(stage)

    stage = run_stage("head", [
        (head, dataclasses.replace(current, head=head)) for head in grid.heads])
    current = stage.winner_row.config
    stages.append(stage)

    stage = run_stage("alpha", [
        (str(alpha), dataclasses.replace(current, alpha=alpha)) for alpha in grid.alphas])
    current = stage.winner_row.config
    stages.append(stage)

    def with_size(size: str) -> DistillConfig:
        teacher = TeacherConfig.from_preset(size, patch=current.teacher.patch,
                                            seed=current.teacher.seed)
        return dataclasses.replace(current, teacher=teacher)

    stage = run_stage("size", [(size, with_size(size)) for size in grid.sizes])
    current = stage.winner_row.config
    stages.append(stage)

    return AblationReport(stages=stages, winner=current)


# -- tracking ------------------------------------------------------------------------


def greedy_iou_tracker(detections: dict[int, list[tuple[float, float, float, float]]],
                       image_w: int, image_h: int, name: str = "pred",
                       fps: float = 30.0,
                       iou_threshold: float = TRACKER_IOU_THRESHOLD) -> Sequence:
    """Associate per-frame detections to tracks by highest IoU, greedily.

    Each frame's detections are matched against every live track's last box,
    best overlap first (ties: older track, then earlier detection); leftovers
    open new tracks. Tracks never retire, so a reappearing object can reclaim
    its id if it still overlaps.
    """
    track_last: dict[int, tuple[float, float, float, float]] = {}
    next_id = 1
    boxes: list[BBox] = []
    for frame in sorted(detections):
        dets = sorted(detections[frame])
        candidates = []
        for tid, last_box in track_last.items():
            for d, det in enumerate(dets):
                overlap = iou(last_box, det)
                if overlap >= iou_threshold:
                    candidates.append((-overlap, tid, d))
        assigned: dict[int, int] = {}
        used_tracks: set[int] = set()
        for neg_overlap, tid, d in sorted(candidates):
            if tid in used_tracks or d in assigned:
                continue
            assigned[d] = tid
            used_tracks.add(tid)
        for d, det in enumerate(dets):
            tid = assigned.get(d)
            if tid is None:
                tid = next_id
                next_id += 1
            track_last[tid] = det
            left, top, width, height = det
            boxes.append(BBox(frame=frame, track_id=tid, left=left, top=top,
                              width=width, height=height))
    n_frames = max(detections) if detections else 0
    return Sequence(name=name, image_w=image_w, image_h=image_h, fps=fps,
                    frames=list(range(1, n_frames + 1)), boxes=boxes)


# -- run reports ----------------------------------------------------------------------


def training_summary(log: TrainingLog) -> dict:
    cfg = log.config
    return {
        "loss": cfg.loss,
        "head": cfg.head,
        "alpha": cfg.alpha,
        "teacher_size": cfg.teacher.size_preset,
        "teacher_hidden": cfg.teacher.hidden_dim,
        "seed": cfg.seed,
        "steps": log.steps,
        "final_task": log.task[-1] if log.task else None,
        "final_distill": log.distill[-1] if log.distill else None,
        "final_combined": log.combined[-1] if log.combined else None,
        "wall_time_s": log.wall_time,
    }


_RUN_CSV_COLUMNS = ("loss", "head", "alpha", "teacher_size", "teacher_hidden",
                    "seed", "steps", "final_task", "final_distill",
                    "final_combined", "wall_time_s")


def emit_report(logs: list[TrainingLog], out_dir: Path,
                stem: str = "runs") -> list[Path]:
    """Write run summaries as CSV and JSON (with per-step curves) files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_lines = [",".join(_RUN_CSV_COLUMNS)]
    payload = {"schema_version": REPORT_SCHEMA_VERSION, "runs": []}
    for log in logs:
        summary = training_summary(log)
        csv_lines.append(",".join(
            "" if summary[c] is None else str(summary[c]) for c in _RUN_CSV_COLUMNS))
        payload["runs"].append({
            **summary,
            "curves": {"task": log.task, "distill": log.distill, "combined": log.combined},
        })
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    json_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return [csv_path, json_path]


def load_report(path: Path) -> dict:
    """Read back an emit_report JSON file, checking the schema version."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    version = payload.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported report schema {version!r}, expected {REPORT_SCHEMA_VERSION}"
        )
    return payload


def merge_reports(paths: list[Path], out_dir: Path,
                  stem: str = "merged") -> list[Path]:
    """Concatenate several run reports into one CSV + JSON pair."""
    runs = []
    for path in paths:
        runs.extend(load_report(path)["runs"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_lines = [",".join(_RUN_CSV_COLUMNS)]
    for run in runs:
        csv_lines.append(",".join(
            "" if run.get(c) is None else str(run[c]) for c in _RUN_CSV_COLUMNS))
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    json_path.write_text(
        json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "runs": runs}, indent=2) + "\n",
        encoding="utf-8")
    return [csv_path, json_path]
