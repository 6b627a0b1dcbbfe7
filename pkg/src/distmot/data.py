"""MOT data handling: annotation parsing, per-frame label preprocessing, the
half-split protocol, path-index generation, and a synthetic sequence source.

External formats
----------------
Ground truth is the MOTChallenge CSV convention, one box per line:

    frame,id,left,top,width,height,conf,class,visibility

Per-frame label files carry one record per box, six space-separated fields,
center/size normalized by the image dimensions:

    class id cx/W cy/H w/W h/H

The directory layout under a dataset root is::

    root/
      sequences/<name>/seqinfo.ini
      sequences/<name>/gt/gt.txt
      sequences/<name>/images/000001.png ...
      sequences/<name>/labels_with_ids/000001.txt ...
      paths.txt

Numbers in serialized ground truth use a canonical minimal form (integral
values print without a decimal point, everything else as the shortest
round-tripping decimal), so parse -> serialize is byte-stable.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .models import SyntheticFrame

IMAGES_DIR = "images"
LABELS_DIR = "labels_with_ids"
INDEX_FILE = "paths.txt"
# single class of interest; label records always carry class 0
LABEL_CLASS = 0


class GtParseError(ValueError):
    """A ground-truth file violated the line format; carries the line number."""


@dataclass(frozen=True)
class BBox:
    """One annotated box: pixel geometry plus identity and frame."""

    frame: int
    track_id: int
    left: float
    top: float
    width: float
    height: float
    conf: float = 1.0
    class_id: int = 1
    visibility: float = 1.0

    def __post_init__(self):
        if self.frame < 1:
            raise ValueError(f"frame must be positive, got {self.frame}")
        if self.track_id < 1:
            raise ValueError(f"track_id must be positive, got {self.track_id}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"box extents must be positive, got width={self.width} height={self.height}"
            )

    @property
    def xywh(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.width, self.height)

    @property
    def center(self) -> tuple[float, float]:
        return (self.left + self.width / 2.0, self.top + self.height / 2.0)


@dataclass
class Sequence:
    """An ordered run of frames with its boxes, grouped for per-frame access."""

    name: str
    image_w: int
    image_h: int
    fps: float
    frames: list[int]
    boxes: list[BBox]
    _by_frame: dict[int, list[BBox]] = field(init=False, repr=False)
    _by_track: dict[int, list[BBox]] = field(init=False, repr=False)

    def __post_init__(self):
        if any(f < 1 for f in self.frames):
            raise ValueError("frame numbers must be strictly positive")
        if sorted(self.frames) != self.frames or len(set(self.frames)) != len(self.frames):
            raise ValueError("frame list must be strictly increasing")
        frame_set = set(self.frames)
        by_frame: dict[int, list[BBox]] = {f: [] for f in self.frames}
        by_track: dict[int, list[BBox]] = {}
        seen: set[tuple[int, int]] = set()
        for box in self.boxes:
            if box.frame not in frame_set:
                raise ValueError(f"box references frame {box.frame} outside the sequence")
            key = (box.frame, box.track_id)
            if key in seen:
                raise ValueError(f"duplicate annotation for track {box.track_id} in frame {box.frame}")
            seen.add(key)
            by_frame[box.frame].append(box)
            by_track.setdefault(box.track_id, []).append(box)
        self._by_frame = by_frame
        self._by_track = {t: sorted(bs, key=lambda b: b.frame) for t, bs in by_track.items()}

    def boxes_in_frame(self, frame: int) -> list[BBox]:
        return self._by_frame.get(frame, [])

    def track(self, track_id: int) -> list[BBox]:
        return self._by_track.get(track_id, [])

    @property
    def track_ids(self) -> list[int]:
        return sorted(self._by_track)


def _fmt(value: float) -> str:
    """Canonical minimal decimal: '30' for 30.0, '0.25' for 0.25."""
    value = float(value)
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def parse_gt(data: bytes | str, name: str = "seq", image_w: int = 0, image_h: int = 0,
             fps: float = 30.0, n_frames: int | None = None) -> Sequence:
    """Parse a MOTChallenge annotation file into a Sequence.

    Lines need at least nine comma-separated fields; extras are ignored.
    Malformed lines and duplicate (frame, id) pairs raise GtParseError with
    the offending line number. The frame list runs from 1 to n_frames
    (default: the highest frame seen).
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    boxes: list[BBox] = []
    seen: set[tuple[int, int]] = set()
    for lineno, raw in enumerate(data.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) < 9:
            raise GtParseError(f"line {lineno}: expected 9 fields, got {len(parts)}")
        try:
            box = BBox(
                frame=int(parts[0]), track_id=int(parts[1]),
                left=float(parts[2]), top=float(parts[3]),
                width=float(parts[4]), height=float(parts[5]),
                conf=float(parts[6]), class_id=int(parts[7]),
                visibility=float(parts[8]),
            )
        except ValueError as exc:
            raise GtParseError(f"line {lineno}: {exc}") from exc
        key = (box.frame, box.track_id)
        if key in seen:
            raise GtParseError(
                f"line {lineno}: duplicate annotation for track {box.track_id} "
                f"in frame {box.frame}"
            )
        seen.add(key)
        boxes.append(box)
    last = max((b.frame for b in boxes), default=0)
    total = last if n_frames is None else int(n_frames)
    if total < last:
        raise GtParseError(f"n_frames={total} is below the highest annotated frame {last}")
    return Sequence(name=name, image_w=image_w, image_h=image_h, fps=fps,
                    frames=list(range(1, total + 1)), boxes=boxes)


def serialize_gt(seq: Sequence) -> str:
    """Canonical annotation text: boxes sorted by (frame, id), minimal decimals."""
    lines = []
    for box in sorted(seq.boxes, key=lambda b: (b.frame, b.track_id)):
        lines.append(",".join([
            str(box.frame), str(box.track_id),
            _fmt(box.left), _fmt(box.top), _fmt(box.width), _fmt(box.height),
            _fmt(box.conf), str(box.class_id), _fmt(box.visibility),
        ]))
    return "\n".join(lines) + ("\n" if lines else "")


def split_per_frame_labels(seq: Sequence) -> dict[int, list[str]]:
    """Per-frame label records: class id cx/W cy/H w/W h/H, all normalized.

    Every frame of the sequence gets an entry, empty when it has no boxes.
    """
    if seq.image_w <= 0 or seq.image_h <= 0:
        raise ValueError(
            f"sequence {seq.name!r} has image dims {seq.image_w}x{seq.image_h}; "
            "labels need positive dimensions"
        )
    records: dict[int, list[str]] = {}
    for frame in seq.frames:
        lines = []
        for box in seq.boxes_in_frame(frame):
            cx, cy = box.center
            lines.append("%d %d %.6f %.6f %.6f %.6f" % (
                LABEL_CLASS, box.track_id,
                cx / seq.image_w, cy / seq.image_h,
                box.width / seq.image_w, box.height / seq.image_h,
            ))
        records[frame] = lines
    return records


def label_record_to_box(record: str, frame: int, image_w: int, image_h: int) -> BBox:
    """Invert one label record back to pixel space (up to rounding)."""
    parts = record.split()
    if len(parts) != 6:
        raise ValueError(f"label record must have 6 fields, got {len(parts)}")
    track_id = int(parts[1])
    cx, cy, w, h = (float(p) for p in parts[2:])
    return BBox(frame=frame, track_id=track_id,
                left=cx * image_w - w * image_w / 2.0,
                top=cy * image_h - h * image_h / 2.0,
                width=w * image_w, height=h * image_h)


def half_split(seq: Sequence) -> tuple[Sequence, Sequence]:
    """First ceil(F/2) frames for training, the rest for validation.

    Frame numbers are kept as they are; boxes follow their frames.
    """
    if len(seq.frames) < 2:
        raise ValueError(f"sequence {seq.name!r} has {len(seq.frames)} frame(s); need >= 2 to split")
    cut = math.ceil(len(seq.frames) / 2)
    head, tail = seq.frames[:cut], seq.frames[cut:]
    head_set = set(head)

    def subset(frames: list[int], boxes: list[BBox]) -> Sequence:
        return Sequence(name=seq.name, image_w=seq.image_w, image_h=seq.image_h,
                        fps=seq.fps, frames=frames, boxes=boxes)

    return (subset(head, [b for b in seq.boxes if b.frame in head_set]),
            subset(tail, [b for b in seq.boxes if b.frame not in head_set]))


# -- dataset layout and filesystem I/O ------------------------------------------


@dataclass(frozen=True)
class DatasetLayout:
    """Filesystem contract for one dataset root."""

    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def sequences_dir(self) -> Path:
        return self.root / "sequences"

    def sequence_dir(self, name: str) -> Path:
        return self.sequences_dir / name

    def images_dir(self, name: str) -> Path:
        return self.sequence_dir(name) / IMAGES_DIR

    def labels_dir(self, name: str) -> Path:
        return self.sequence_dir(name) / LABELS_DIR

    def gt_path(self, name: str) -> Path:
        return self.sequence_dir(name) / "gt" / "gt.txt"

    def seqinfo_path(self, name: str) -> Path:
        return self.sequence_dir(name) / "seqinfo.ini"

    @property
    def index_path(self) -> Path:
        return self.root / INDEX_FILE

    def sequence_names(self) -> list[str]:
        if not self.sequences_dir.is_dir():
            return []
        return sorted(p.name for p in self.sequences_dir.iterdir() if p.is_dir())


def frame_image_name(frame: int) -> str:
    return f"{frame:06d}.png"


def frame_label_name(frame: int) -> str:
    return f"{frame:06d}.txt"


def generate_path_index(layout: DatasetLayout) -> list[str]:
    """Image paths (relative to the root, POSIX separators), sequence-major,
    lexicographically sorted; every image must have its label file."""
    lines: list[str] = []
    orphans: list[str] = []
    for name in layout.sequence_names():
        images = sorted(layout.images_dir(name).glob("*.png"))
        for img in images:
            label = layout.labels_dir(name) / (img.stem + ".txt")
            if not label.is_file():
                orphans.append(str(img.relative_to(layout.root).as_posix()))
                continue
            lines.append(str(img.relative_to(layout.root).as_posix()))
    if orphans:
        raise FileNotFoundError(
            "images without label files: " + ", ".join(orphans)
        )
    return lines


def write_path_index(layout: DatasetLayout) -> Path:
    lines = generate_path_index(layout)
    layout.index_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return layout.index_path


def write_per_frame_labels(layout: DatasetLayout, seq: Sequence) -> int:
    """Materialize one label file per frame; returns the file count."""
    records = split_per_frame_labels(seq)
    out_dir = layout.labels_dir(seq.name)
    out_dir.mkdir(parents=True, exist_ok=True)
    for frame, lines in records.items():
        path = out_dir / frame_label_name(frame)
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return len(records)


def write_sequence(layout: DatasetLayout, seq: Sequence,
                   frames: list[SyntheticFrame] | None = None) -> None:
    """Write seqinfo, ground truth, and (when given) the rendered frames."""
    sdir = layout.sequence_dir(seq.name)
    (sdir / "gt").mkdir(parents=True, exist_ok=True)
    layout.gt_path(seq.name).write_text(serialize_gt(seq), encoding="utf-8")

    info = configparser.ConfigParser()
    info["Sequence"] = {
        "name": seq.name,
        "imDir": IMAGES_DIR,
        "frameRate": _fmt(seq.fps),
        "seqLength": str(len(seq.frames)),
        "imWidth": str(seq.image_w),
        "imHeight": str(seq.image_h),
        "imExt": ".png",
    }
    with open(layout.seqinfo_path(seq.name), "w", encoding="utf-8") as fh:
        info.write(fh)

    if frames is not None:
        img_dir = layout.images_dir(seq.name)
        img_dir.mkdir(parents=True, exist_ok=True)
        for frame in frames:
            arr = np.clip(np.rint(frame.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(img_dir / frame_image_name(frame.frame_id))


def load_sequence(layout: DatasetLayout, name: str) -> Sequence:
    """Read seqinfo.ini + gt/gt.txt back into a Sequence."""
    info = configparser.ConfigParser()
    read = info.read(layout.seqinfo_path(name), encoding="utf-8")
    if not read:
        raise FileNotFoundError(f"no seqinfo.ini for sequence {name!r} under {layout.root}")
    sec = info["Sequence"]
    return parse_gt(
        layout.gt_path(name).read_bytes(), name=name,
        image_w=sec.getint("imWidth"), image_h=sec.getint("imHeight"),
        fps=sec.getfloat("frameRate"), n_frames=sec.getint("seqLength"),
    )


def load_frames(layout: DatasetLayout, seq: Sequence) -> list[SyntheticFrame]:
    return [
        SyntheticFrame(
            image=np.asarray(
                Image.open(layout.images_dir(seq.name) / frame_image_name(f)),
                dtype=np.float64) / 255.0,
            frame_id=f,
        )
        for f in seq.frames
    ]


# -- synthetic sequences ----------------------------------------------------------


def generate_synthetic_sequence(n_objects: int, n_frames: int, image_w: int, image_h: int,
                                seed: int, min_size: int = 8, max_size: int = 16,
                                max_speed: float = 3.0, name: str | None = None,
                                fps: float = 30.0) -> tuple[Sequence, list[SyntheticFrame]]:
    """Rectangles bouncing around a dark frame, with exact ground truth.

    Each object is a filled intensity-1 block of fixed integer size moving at
    constant velocity, reflecting off the borders. Positions are rounded to
    integer pixels for rendering, and the ground-truth box is exactly the
    rendered rectangle, so a tracker that reads the rendering can in
    principle score perfectly.
    """
    if n_objects < 1 or n_frames < 1:
        raise ValueError("n_objects and n_frames must be >= 1")
    if min_size < 1 or max_size < min_size:
        raise ValueError(f"bad size range [{min_size}, {max_size}]")
    if max_size > image_w or max_size > image_h:
        raise ValueError(
            f"objects up to {max_size}px do not fit a {image_w}x{image_h} image"
        )
    rng = np.random.default_rng(seed)
    sizes = rng.integers(min_size, max_size + 1, size=(n_objects, 2))  # (w, h)
    pos = np.empty((n_objects, 2))
    for i in range(n_objects):
        pos[i, 0] = rng.uniform(0, image_w - sizes[i, 0])
        pos[i, 1] = rng.uniform(0, image_h - sizes[i, 1])
    vel = rng.uniform(-max_speed, max_speed, size=(n_objects, 2))

    boxes: list[BBox] = []
    frames: list[SyntheticFrame] = []
    for frame_no in range(1, n_frames + 1):
        image = np.zeros((image_h, image_w))
        for i in range(n_objects):
            w, h = int(sizes[i, 0]), int(sizes[i, 1])
            left = int(round(pos[i, 0]))
            top = int(round(pos[i, 1]))
            image[top:top + h, left:left + w] = 1.0
            boxes.append(BBox(frame=frame_no, track_id=i + 1,
                              left=left, top=top, width=w, height=h))
        frames.append(SyntheticFrame(image=image, frame_id=frame_no))
        # advance with reflection; positions stay in [0, limit]
        for i in range(n_objects):
            for axis, limit in ((0, image_w - sizes[i, 0]), (1, image_h - sizes[i, 1])):
                nxt = pos[i, axis] + vel[i, axis]
                if limit == 0:
                    nxt = 0.0
                else:
                    while nxt < 0 or nxt > limit:
                        if nxt < 0:
                            nxt = -nxt
                            vel[i, axis] = -vel[i, axis]
                        else:
                            nxt = 2 * limit - nxt
                            vel[i, axis] = -vel[i, axis]
                pos[i, axis] = nxt
    seq = Sequence(name=name or f"synth-{seed:04d}", image_w=image_w, image_h=image_h,
                   fps=fps, frames=list(range(1, n_frames + 1)), boxes=boxes)
    return seq, frames
