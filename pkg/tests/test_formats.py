import numpy as np
import pytest

from conftest import random_mask, square
from mots_refine.features import EmbeddingStore
from mots_refine.formats import (
    FlowDirectory,
    FormatError,
    GtLabel,
    MotsResultLine,
    decode_embeddings,
    decode_flow,
    encode_embeddings,
    encode_flow,
    flow_filename,
    format_mots,
    read_assignments,
    read_detections,
    read_embeddings,
    read_gt_labels,
    read_mots,
    read_tracklets,
    write_assignments,
    write_detections,
    write_embeddings,
    write_embeddings_text,
    write_flow,
    write_gt_labels,
    write_mots,
    write_tracklets,
)
from mots_refine.fusion import Detection
from mots_refine.masks import FlowField, encode_rle
from mots_refine.short_tracker import Tracklet


def test_mots_line_layout():
    rle = encode_rle(square(1080, 1920, 100, 200, 50))
    line = MotsResultLine(1, 2001, 2, 1080, 1920, rle.counts)
    assert line.format() == f"1 2001 2 1080 1920 {rle.counts}"
    assert line.mask().sum() == 2500


def test_mots_round_trip_sorted(tmp_path, rng):
    lines = []
    for f in (3, 1, 2):
        for tid in (2002, 2001):
            lines.append(MotsResultLine(f, tid, 2, 12, 9, encode_rle(random_mask(rng, 12, 9)).counts))
    p = tmp_path / "res.txt"
    write_mots(p, lines)
    back = read_mots(p)
    assert [(r.frame_id, r.track_id) for r in back] == sorted((r.frame_id, r.track_id) for r in lines)
    assert format_mots(back) == p.read_text()


def test_mots_duplicate_rejected(tmp_path):
    p = tmp_path / "res.txt"
    p.write_text("1 2001 2 2 2 4\n1 2001 2 2 2 4\n")
    with pytest.raises(FormatError, match="first on line 1") as exc:
        read_mots(p)
    assert exc.value.line == 2
    with pytest.raises(FormatError, match="duplicate"):
        format_mots([MotsResultLine(1, 2001, 2, 2, 2, "4")] * 2)


def test_detections_round_trip(tmp_path, rng):
    dets = [Detection(f, k, random_mask(rng, 10, 14), float(rng.random()), 0, 2) for f in (1, 2) for k in (1, 2, 3)]
    p = tmp_path / "d.txt"
    write_detections(p, dets)
    back = read_detections(p, source_id=1)
    assert len(back) == 6 and all(d.source_id == 1 for d in back)
    for a, b in zip(dets, back):
        assert np.array_equal(a.mask, b.mask) and a.score == b.score


def test_detections_bad_rle_reports_line(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("# comment\n1 1 2 0.5 2 2 4\n1 2 2 0.5 2 2 9\n")
    with pytest.raises(FormatError, match=r"d\.txt:3"):
        read_detections(p)


def test_embeddings_binary_and_text(tmp_path, rng):
    keys = [(f, k) for f in range(1, 4) for k in range(1, 3)]
    store = EmbeddingStore(keys, rng.standard_normal((6, 5)).astype(np.float32))
    back = decode_embeddings(encode_embeddings(store))
    assert back.dim == 5 and np.array_equal(back.vectors, store.vectors)
    write_embeddings(tmp_path / "e.bin", store)
    write_embeddings_text(tmp_path / "e.txt", store)
    for name in ("e.bin", "e.txt"):
        s = read_embeddings(tmp_path / name)
        assert np.allclose(s.vector((2, 1)), store.vector((2, 1)))


def test_embeddings_truncated(rng):
    store = EmbeddingStore([(1, 1)], np.ones((1, 4)))
    with pytest.raises(FormatError):
        decode_embeddings(encode_embeddings(store)[:-3])


def test_flow_round_trip(tmp_path, rng):
    flow = FlowField(rng.standard_normal((7, 5)).astype(np.float32), rng.standard_normal((7, 5)).astype(np.float32))
    back = decode_flow(encode_flow(flow))
    assert np.array_equal(back.dx, flow.dx) and np.array_equal(back.dy, flow.dy)
    assert flow_filename(3) == "000003_000004.flo"
    write_flow(tmp_path / flow_filename(3), flow)
    fd = FlowDirectory(tmp_path)
    assert fd(4) is None
    assert np.array_equal(fd(3).dx, flow.dx)
    assert FlowDirectory(None)(1) is None
    with pytest.raises(FormatError):
        decode_flow(b"XXXX" + encode_flow(flow)[4:])


def test_tracklets_labels_assignments(tmp_path):
    ts = [Tracklet(1, 0, [(1, 1), (2, 1)]), Tracklet(2, 0, [(1, 2)]), Tracklet(1, 1, [(5, 3)])]
    write_tracklets(tmp_path / "t.txt", ts)
    back = read_tracklets(tmp_path / "t.txt")
    assert sorted((t.video_id, t.tracklet_id, tuple(t.observations)) for t in back) == sorted(
        (t.video_id, t.tracklet_id, tuple(t.observations)) for t in ts)

    labels = [GtLabel(1, 1, 3, False), GtLabel(1, 2, -1, True)]
    write_gt_labels(tmp_path / "g.txt", labels)
    assert read_gt_labels(tmp_path / "g.txt") == labels

    asg = {(1, 1): 2001, (2, 1): 2001, (1, 2): 2002}
    write_assignments(tmp_path / "a.txt", asg)
    assert read_assignments(tmp_path / "a.txt") == asg
    (tmp_path / "a2.txt").write_text("1 1 2001\n1 1 2002\n")
    with pytest.raises(FormatError, match="twice"):
        read_assignments(tmp_path / "a2.txt")


def test_field_count_errors(tmp_path):
    p = tmp_path / "g.txt"
    p.write_text("1 1 3\n")
    with pytest.raises(FormatError, match="expected 4 fields"):
        read_gt_labels(p)
    p.write_text("1 1 3 7\n")
    with pytest.raises(FormatError, match="0 or 1"):
        read_gt_labels(p)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    write_assignments(tmp_path / "sub" / "a.txt", {(1, 1): 1})
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.txt"]


def test_empty_mots_file(tmp_path):
    p = tmp_path / "r.txt"
    p.write_text("")
    assert read_mots(p) == []
