import numpy as np
import pytest

from distmot.data import (
    BBox,
    DatasetLayout,
    GtParseError,
    Sequence,
    generate_path_index,
    generate_synthetic_sequence,
    half_split,
    label_record_to_box,
    load_frames,
    load_sequence,
    parse_gt,
    serialize_gt,
    split_per_frame_labels,
    write_path_index,
    write_per_frame_labels,
    write_sequence,
)


def make_sequence(n_frames=4):
    boxes = [
        BBox(frame=1, track_id=1, left=10, top=20, width=30, height=40),
        BBox(frame=2, track_id=1, left=12, top=22, width=30, height=40),
        BBox(frame=2, track_id=2, left=50, top=60, width=10, height=10),
    ]
    return Sequence(name="toy", image_w=100, image_h=200, fps=30.0,
                    frames=list(range(1, n_frames + 1)), boxes=boxes)


# -- parsing -----------------------------------------------------------------


def test_parse_single_line():
    seq = parse_gt(b"1,1,10,20,30,40,1,1,1.0")
    assert len(seq.boxes) == 1
    box = seq.boxes[0]
    assert (box.frame, box.track_id) == (1, 1)
    assert box.xywh == (10.0, 20.0, 30.0, 40.0)


def test_parse_reports_line_number_for_garbage():
    with pytest.raises(GtParseError, match="line 2"):
        parse_gt(b"1,1,10,20,30,40,1,1,1.0\n1,2,oops,20,30,40,1,1,1.0")


def test_parse_rejects_short_lines():
    with pytest.raises(GtParseError, match="9 fields"):
        parse_gt(b"1,1,10,20\n")


def test_parse_rejects_duplicate_frame_id_pairs():
    data = b"1,7,10,20,30,40,1,1,1.0\n1,7,11,21,30,40,1,1,1.0"
    with pytest.raises(GtParseError, match="duplicate"):
        parse_gt(data)


def test_parse_rejects_non_positive_extent():
    with pytest.raises(GtParseError, match="line 1"):
        parse_gt(b"1,1,10,20,0,40,1,1,1.0")


def test_parse_ignores_trailing_fields_and_blank_lines():
    seq = parse_gt(b"1,1,10,20,30,40,1,1,1.0,junk,junk\n\n")
    assert len(seq.boxes) == 1


def test_parse_serialize_round_trip_is_byte_stable():
    canonical = serialize_gt(make_sequence())
    assert serialize_gt(parse_gt(canonical.encode())) == canonical
    # fractional geometry survives too
    seq = Sequence(name="f", image_w=10, image_h=10, fps=30.0, frames=[1],
                   boxes=[BBox(frame=1, track_id=1, left=1.25, top=2.5,
                               width=3.125, height=4.75, conf=0.5, visibility=0.25)])
    canonical = serialize_gt(seq)
    assert serialize_gt(parse_gt(canonical.encode())) == canonical


def test_sequence_rejects_box_outside_frame_range():
    with pytest.raises(ValueError, match="outside"):
        Sequence(name="x", image_w=10, image_h=10, fps=30.0, frames=[1],
                 boxes=[BBox(frame=2, track_id=1, left=0, top=0, width=1, height=1)])


# -- per-frame labels -----------------------------------------------------------


def test_label_record_matches_hand_computation():
    seq = make_sequence()
    records = split_per_frame_labels(seq)
    assert records[1] == ["0 1 0.250000 0.200000 0.300000 0.200000"]


def test_every_frame_gets_records_even_when_empty():
    boxes = [BBox(frame=2, track_id=1, left=0, top=0, width=5, height=5)]
    seq = Sequence(name="gap", image_w=10, image_h=10, fps=30.0,
                   frames=[1, 2, 3], boxes=boxes)
    records = split_per_frame_labels(seq)
    assert sorted(records) == [1, 2, 3]
    assert records[1] == [] and records[3] == []
    assert len(records[2]) == 1


def test_labels_require_positive_image_dims():
    seq = parse_gt(b"1,1,1,1,2,2,1,1,1")
    with pytest.raises(ValueError, match="dims"):
        split_per_frame_labels(seq)


def test_label_union_reconstructs_the_box_multiset():
    rng = np.random.default_rng(0)
    boxes = []
    for frame in range(1, 6):
        for tid in range(1, int(rng.integers(1, 5)) + 1):
            boxes.append(BBox(frame=frame, track_id=tid,
                              left=float(rng.integers(0, 50)), top=float(rng.integers(0, 50)),
                              width=float(rng.integers(1, 30)), height=float(rng.integers(1, 30))))
    seq = Sequence(name="r", image_w=128, image_h=64, fps=30.0,
                   frames=list(range(1, 6)), boxes=boxes)
    rebuilt = []
    for frame, records in split_per_frame_labels(seq).items():
        for rec in records:
            rebuilt.append(label_record_to_box(rec, frame, seq.image_w, seq.image_h))
    assert len(rebuilt) == len(boxes)
    key = lambda b: (b.frame, b.track_id)
    for got, want in zip(sorted(rebuilt, key=key), sorted(boxes, key=key)):
        assert got.frame == want.frame and got.track_id == want.track_id
        assert got.left == pytest.approx(want.left, abs=1e-3)
        assert got.top == pytest.approx(want.top, abs=1e-3)
        assert got.width == pytest.approx(want.width, abs=1e-3)
        assert got.height == pytest.approx(want.height, abs=1e-3)


def test_normalized_fields_stay_in_unit_range_for_in_image_boxes():
    seq, _ = generate_synthetic_sequence(4, 6, 64, 48, seed=5)
    for records in split_per_frame_labels(seq).values():
        for rec in records:
            values = [float(v) for v in rec.split()[2:]]
            assert all(0.0 <= v <= 1.0 for v in values)


# -- half split -------------------------------------------------------------------


def test_half_split_even_count():
    seq, _ = generate_synthetic_sequence(2, 10, 64, 64, seed=1)
    train, val = half_split(seq)
    assert train.frames == list(range(1, 6))
    assert val.frames == list(range(6, 11))


def test_half_split_odd_count_gives_extra_frame_to_train():
    seq, _ = generate_synthetic_sequence(1, 11, 64, 64, seed=2)
    train, val = half_split(seq)
    assert train.frames == list(range(1, 7))
    assert val.frames == list(range(7, 12))


def test_half_split_partitions_boxes_exactly():
    seq, _ = generate_synthetic_sequence(3, 9, 64, 64, seed=3)
    train, val = half_split(seq)
    merged = sorted(train.boxes + val.boxes, key=lambda b: (b.frame, b.track_id))
    original = sorted(seq.boxes, key=lambda b: (b.frame, b.track_id))
    assert merged == original
    assert not set(train.frames) & set(val.frames)


def test_half_split_needs_two_frames():
    seq = Sequence(name="one", image_w=8, image_h=8, fps=30.0, frames=[1], boxes=[])
    with pytest.raises(ValueError, match=">= 2"):
        half_split(seq)


# -- synthetic sequences ------------------------------------------------------------


def test_synthetic_generation_is_deterministic_per_seed():
    a, frames_a = generate_synthetic_sequence(3, 8, 56, 56, seed=42)
    b, frames_b = generate_synthetic_sequence(3, 8, 56, 56, seed=42)
    assert serialize_gt(a) == serialize_gt(b)
    for fa, fb in zip(frames_a, frames_b):
        assert np.array_equal(fa.image, fb.image)
    c, _ = generate_synthetic_sequence(3, 8, 56, 56, seed=43)
    assert serialize_gt(a) != serialize_gt(c)


def test_zero_velocity_keeps_the_box_still():
    seq, _ = generate_synthetic_sequence(1, 5, 32, 32, seed=0, max_speed=0.0)
    first = seq.boxes_in_frame(1)[0]
    for frame in range(2, 6):
        assert seq.boxes_in_frame(frame)[0].xywh == first.xywh


def test_rendering_matches_ground_truth_geometry():
    seq, frames = generate_synthetic_sequence(1, 6, 48, 40, seed=7)
    for frame in frames:
        (box,) = seq.boxes_in_frame(frame.frame_id)
        left, top = int(box.left), int(box.top)
        w, h = int(box.width), int(box.height)
        assert np.all(frame.image[top:top + h, left:left + w] == 1.0)
        outside = frame.image.sum() - h * w
        assert outside == 0.0


def test_boxes_stay_inside_the_image():
    seq, _ = generate_synthetic_sequence(5, 30, 40, 30, seed=11, max_speed=4.0)
    for box in seq.boxes:
        assert box.left >= 0 and box.top >= 0
        assert box.left + box.width <= 40
        assert box.top + box.height <= 30


def test_oversized_objects_are_rejected():
    with pytest.raises(ValueError, match="fit"):
        generate_synthetic_sequence(1, 2, 10, 10, seed=0, min_size=12, max_size=16)


# -- filesystem layout ---------------------------------------------------------------


def test_sequence_files_round_trip(tmp_path):
    layout = DatasetLayout(root=tmp_path)
    seq, frames = generate_synthetic_sequence(2, 6, 56, 56, seed=9)
    write_sequence(layout, seq, frames)
    loaded = load_sequence(layout, seq.name)
    assert serialize_gt(loaded) == serialize_gt(seq)
    assert loaded.image_w == 56 and loaded.image_h == 56
    assert loaded.frames == seq.frames
    reloaded = load_frames(layout, loaded)
    for orig, back in zip(frames, reloaded):
        assert np.array_equal(orig.image, back.image)


def test_path_index_orders_and_pairs(tmp_path):
    layout = DatasetLayout(root=tmp_path)
    for seed, name in ((1, "b-seq"), (2, "a-seq")):
        seq, frames = generate_synthetic_sequence(1, 3, 32, 32, seed=seed, name=name)
        write_sequence(layout, seq, frames)
        write_per_frame_labels(layout, seq)
    lines = generate_path_index(layout)
    assert len(lines) == 6
    assert lines[0].startswith("sequences/a-seq/")
    assert lines == sorted(lines)
    # byte-identical on regeneration
    first = write_path_index(layout).read_text()
    second = write_path_index(layout).read_text()
    assert first == second


def test_path_index_reports_orphan_images(tmp_path):
    layout = DatasetLayout(root=tmp_path)
    seq, frames = generate_synthetic_sequence(1, 2, 32, 32, seed=3, name="s")
    write_sequence(layout, seq, frames)
    write_per_frame_labels(layout, seq)
    (layout.labels_dir("s") / "000002.txt").unlink()
    with pytest.raises(FileNotFoundError, match="000002"):
        generate_path_index(layout)
