from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from oracles import ORIGINS, parse_ref, recheck_triplet
from mots_refine.short_tracker import Tracklet
from mots_refine.triplets import (
    TARGET_INTER,
    TARGET_INTRA,
    TRAIN_GT,
    Augment,
    ManifestParseError,
    Ref,
    SamplingError,
    TripletSample,
    co_occurrence,
    format_manifest,
    parse_manifest,
    plan_batches,
    sample_inter_tracklet,
    sample_intra_frame,
    sample_train_gt,
    validate_manifest,
)


def target_frames(n_frames=40, max_obs=4, seed=0):
    r = np.random.default_rng(seed)
    return {f: [(f, k) for k in range(1, int(r.integers(0, max_obs + 1)) + 1)] for f in range(1, n_frames + 1)}


def gt_identities(n_ids=4, n_frames=30):
    return {i: [(f, i) for f in range(1, n_frames + 1)] for i in range(1, n_ids + 1)}


def staggered_tracklets(video_id=0):
    """Five tracklets of length >= 2 with varied overlaps."""
    spans = [(1, 20), (5, 12), (10, 30), (25, 40), (28, 29)]
    return [Tracklet(i + 1, video_id, [(f, i + 1) for f in range(a, b + 1)]) for i, (a, b) in enumerate(spans)]


def test_intra_frame_triplets_valid():
    out = sample_intra_frame(target_frames(), gt_identities(), 1000, seed=1)
    assert len(out) == 2000
    assert Counter(t.origin for t in out) == {TARGET_INTRA: 1000, TRAIN_GT: 1000}
    assert validate_manifest(out) == []


def test_inter_tracklet_triplets_valid():
    ts = staggered_tracklets()
    out = sample_inter_tracklet(ts, 1000, seed=2)
    assert len(out) == 1000
    assert validate_manifest(out, ts) == []
    text = format_manifest(out, 2)
    assert validate_manifest(text, ts) == []


def test_train_gt_triplets_valid(rng):
    out = sample_train_gt(gt_identities(), 1000, rng)
    assert validate_manifest(out) == []


def test_intra_anchor_frames_uniform():
    frames = target_frames(20, seed=3)
    eligible = [f for f, v in frames.items() if len(v) >= 2]
    out = sample_intra_frame(frames, None, 6000, seed=4)
    counts = Counter(t.anchor.frame for t in out)
    observed = [counts.get(f, 0) for f in eligible]
    assert sum(observed) == 6000
    assert chisquare(observed).pvalue > 0.01


def test_inter_anchor_frames_uniform_over_cooccurrence():
    ts = staggered_tracklets()
    shared = list(co_occurrence(ts))
    out = sample_inter_tracklet(ts, 8000, seed=5)
    counts = Counter((t.video_id, t.anchor.frame) for t in out)
    observed = [counts.get(k, 0) for k in shared]
    assert sum(observed) == 8000
    assert chisquare(observed).pvalue > 0.01


def test_same_seed_same_bytes():
    a = format_manifest(sample_intra_frame(target_frames(), gt_identities(), 200, seed=7), 7)
    b = format_manifest(sample_intra_frame(target_frames(), gt_identities(), 200, seed=7), 7)
    assert a == b
    c = format_manifest(sample_intra_frame(target_frames(), gt_identities(), 200, seed=8), 8)
    assert a != c
    ts = staggered_tracklets()
    assert format_manifest(sample_inter_tracklet(ts, 300, 9), 9) == format_manifest(
        sample_inter_tracklet(ts, 300, 9), 9)


def test_sampling_errors():
    with pytest.raises(SamplingError):
        sample_intra_frame({1: [(1, 1)], 2: [(2, 1)]}, None, 5, seed=0)
    # two tracklets never in the same frame
    ts = [Tracklet(1, 0, [(1, 1), (2, 1)]), Tracklet(2, 0, [(5, 2), (6, 2)])]
    with pytest.raises(SamplingError):
        sample_inter_tracklet(ts, 5, seed=0)
    # co-occur, but neither has a second frame
    ts = [Tracklet(1, 0, [(1, 1)]), Tracklet(2, 0, [(1, 2)])]
    with pytest.raises(SamplingError, match="second frame"):
        sample_inter_tracklet(ts, 5, seed=0, max_retries=50)
    with pytest.raises(SamplingError):
        sample_train_gt({1: [(1, 1), (2, 1)]}, 3, np.random.default_rng(0))


def test_manifest_round_trip():
    out = sample_intra_frame(target_frames(), gt_identities(), 50, seed=1)
    out += sample_inter_tracklet(staggered_tracklets(), 50, seed=1)
    header, back = parse_manifest(format_manifest(out, 1, {"videos": 1}))
    assert back == out
    assert header["seed"] == "1" and header["videos"] == "1" and "tool_version" in header


@pytest.mark.parametrize(
    "line,needle",
    [
        ("train_gt 0 1,1@1 2,1@1", "expected 5 fields"),
        ("bogus 0 1,1 AUG:3 1,2", "unknown origin"),
        ("target_intra x 1,1 AUG:3 1,2", "bad video id"),
        ("target_intra 0 1;1 AUG:3 1,2", "bad observation reference"),
    ],
)
def test_parse_errors_report_line(line, needle):
    text = "# header\n\ntarget_intra 0 1,1 AUG:3 1,2\n" + line + "\n"
    with pytest.raises(ManifestParseError, match=needle) as exc:
        parse_manifest(text)
    assert exc.value.line == 4
    assert str(exc.value).startswith("line 4:")


def test_validator_flags_each_violation_kind():
    bad = [
        TripletSample(TARGET_INTRA, 0, Ref(1, 1), Augment(1), Ref(1, 1)),
        TripletSample(TARGET_INTRA, 0, Ref(1, 1), Ref(2, 1), Ref(2, 2)),
        TripletSample(TRAIN_GT, 0, Ref(1, 1, 1), Ref(1, 1, 1), Ref(1, 2, 2)),
        TripletSample(TRAIN_GT, 0, Ref(1, 1, 1), Ref(2, 1, 3), Ref(1, 2, 1)),
        TripletSample(TARGET_INTER, 0, Ref(3, 1, 1), Ref(3, 5, 1), Ref(4, 2, 2)),
        TripletSample(TRAIN_GT, 0, Ref(1, 1), Ref(2, 1), Ref(1, 2)),
    ]
    v = validate_manifest(bad)
    by_index = Counter(x.index for x in v)
    assert by_index == {0: 1, 1: 2, 2: 1, 3: 2, 4: 2, 5: 1}
    assert "anchor equals negative" in str(v[0])


def test_validator_against_tracklets_catches_bad_membership():
    ts = staggered_tracklets()
    t = TripletSample(TARGET_INTER, 0, Ref(6, 1, 1), Ref(7, 1, 1), Ref(6, 4, 4))
    msgs = [x.message for x in validate_manifest([t], ts)]
    assert any("not a member" in m for m in msgs)
    assert any("do not overlap" in m for m in msgs)


ref_st = st.tuples(st.integers(1, 4), st.integers(1, 3), st.one_of(st.none(), st.integers(1, 3)))


def ref_text(r):
    return f"{r[0]},{r[1]}" + ("" if r[2] is None else f"@{r[2]}")


@settings(max_examples=400, deadline=None)
@given(st.sampled_from(ORIGINS), ref_st, st.one_of(st.just("AUG"), ref_st), ref_st)
def test_validator_agrees_with_independent_recheck(origin, a, p, n):
    line = " ".join([origin, "0", ref_text(a), "AUG:5" if p == "AUG" else ref_text(p), ref_text(n)])
    got = len(validate_manifest(line + "\n"))
    parts = line.split()
    expected = recheck_triplet(origin, parse_ref(parts[2]), parse_ref(parts[3]), parse_ref(parts[4]))
    assert got == expected


def test_plan_batches_halves():
    train = sample_train_gt(gt_identities(), 40, np.random.default_rng(0))
    target = sample_intra_frame(target_frames(), None, 30, seed=0)
    plan = plan_batches(train, target, 8, seed=1)
    assert len(plan.batches) == 30 // 4
    for b in plan.batches:
        assert len(b) == 8
        assert Counter(t.origin for t in b) == {TRAIN_GT: 4, TARGET_INTRA: 4}
    assert plan.format() == plan_batches(train, target, 8, seed=1).format()


def test_plan_batches_short_pool():
    train = sample_train_gt(gt_identities(), 10, np.random.default_rng(0))
    target = sample_intra_frame(target_frames(), None, 3, seed=0)
    assert len(plan_batches(train, target, 4, seed=0).batches) == 1
    plan = plan_batches(train, target, 4, seed=0, with_replacement=True)
    assert len(plan.batches) == 3
    for b in plan.batches:
        assert Counter(t.origin for t in b) == {TRAIN_GT: 2, TARGET_INTRA: 2}


@pytest.mark.parametrize("bs", [0, 3, 7])
def test_plan_batches_rejects_odd_sizes(bs):
    t = sample_intra_frame(target_frames(), None, 3, seed=0)
    with pytest.raises(ValueError):
        plan_batches(t, t, bs, seed=0)


def test_plan_batches_rejects_empty_pool():
    t = sample_intra_frame(target_frames(), None, 3, seed=0)
    with pytest.raises(ValueError):
        plan_batches([], t, 4, seed=0)


def test_inter_sampling_frames_are_the_range_intersection():
    ts = [Tracklet(1, 0, [(f, 1) for f in range(1, 11)]), Tracklet(2, 0, [(f, 2) for f in range(5, 16)])]
    assert {f for _, f in co_occurrence(ts)} == set(range(5, 11))
    out = sample_inter_tracklet(ts, 500, seed=0)
    assert {t.anchor.frame for t in out} == set(range(5, 11))


def test_plan_batches_equal_pools():
    train = sample_train_gt(gt_identities(), 10, np.random.default_rng(0))
    target = sample_intra_frame(target_frames(), None, 10, seed=0)
    plan = plan_batches(train, target, 4, seed=0)
    assert len(plan.batches) == 5
