"""Triplet manifests for external re-training of the appearance encoder.

Three triplet origins are produced:

``train_gt``
    anchor/positive of one labelled identity, negative of another.
``target_intra``
    anchor and negative are two masks of one target frame; the positive is an
    augmentation directive ``AUG:<seed>`` applied to the anchor by the trainer.
``target_inter``
    anchor and negative come from two short-term tracklets active in the same
    frame; the positive is another frame of the anchor's tracklet.

Manifest lines are ``origin video_id anchor positive negative`` where each
reference is ``frame,key`` optionally followed by ``@label`` (identity for
``train_gt``, tracklet id for ``target_inter``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .features import ObsKey
from .short_tracker import Tracklet

TRAIN_GT = "train_gt"
TARGET_INTRA = "target_intra"
TARGET_INTER = "target_inter"
ORIGINS = (TRAIN_GT, TARGET_INTRA, TARGET_INTER)

MANIFEST_MAGIC = "# mots-refine triplet manifest v1"


class SamplingError(ValueError):
    pass


class ManifestParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Ref:
    frame: int
    key: int
    label: int | None = None

    @property
    def obs(self) -> ObsKey:
        return self.frame, self.key

    def format(self) -> str:
        s = f"{self.frame},{self.key}"
        return s if self.label is None else f"{s}@{self.label}"


@dataclass(frozen=True)
class Augment:
    seed: int

    def format(self) -> str:
        return f"AUG:{self.seed}"


@dataclass(frozen=True)
class TripletSample:
    origin: str
    video_id: int
    anchor: Ref
    positive: Ref | Augment
    negative: Ref

    def format(self) -> str:
        return " ".join(
            [self.origin, str(self.video_id), self.anchor.format(), self.positive.format(), self.negative.format()]
        )


def _pick_pair(rng: np.random.Generator, n: int) -> tuple[int, int]:
    a = int(rng.integers(n))
    b = int(rng.integers(n - 1))
    return a, b + (b >= a)


def sample_train_gt(
    gt_tracklets: Mapping[int, Sequence[ObsKey]], count: int, rng: np.random.Generator, video_id: int = 0
) -> list[TripletSample]:
    """Triplets from labelled identities (identity id -> observation keys)."""
    ids = sorted(i for i, obs in gt_tracklets.items() if len(obs) > 0)
    anchors = [i for i in ids if len(gt_tracklets[i]) >= 2]
    if not anchors or len(ids) < 2:
        raise SamplingError("ground truth needs an identity with >=2 observations and >=2 identities")
    out = []
    for _ in range(count):
        ident = anchors[int(rng.integers(len(anchors)))]
        obs = sorted(gt_tracklets[ident])
        ia, ip = _pick_pair(rng, len(obs))
        others = [i for i in ids if i != ident]
        neg_id = others[int(rng.integers(len(others)))]
        neg_obs = sorted(gt_tracklets[neg_id])
        n = neg_obs[int(rng.integers(len(neg_obs)))]
        out.append(
            TripletSample(
                TRAIN_GT, video_id, Ref(*obs[ia], ident), Ref(*obs[ip], ident), Ref(*n, neg_id)
            )
        )
    return out


def sample_intra_frame(
    target_frames: Mapping[int, Sequence[ObsKey]],
    gt_tracklets: Mapping[int, Sequence[ObsKey]] | None,
    count: int,
    seed: int,
    video_id: int = 0,
) -> list[TripletSample]:
    """``count`` target intra-frame triplets, plus ``count`` ground-truth ones if given."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    eligible = [f for f in sorted(target_frames) if len(target_frames[f]) >= 2]
    if not eligible:
        raise SamplingError("no frame holds two observations; cannot form intra-frame negatives")
    out = []
    for _ in range(count):
        f = eligible[int(rng.integers(len(eligible)))]
        keys = sorted(target_frames[f])
        ia, ineg = _pick_pair(rng, len(keys))
        aug_seed = int(rng.integers(2**31))
        out.append(
            TripletSample(TARGET_INTRA, video_id, Ref(*keys[ia]), Augment(aug_seed), Ref(*keys[ineg]))
        )
    if gt_tracklets:
        out.extend(sample_train_gt(gt_tracklets, count, rng, video_id))
    return out


def co_occurrence(tracklets: Sequence[Tracklet]) -> dict[tuple[int, int], list[Tracklet]]:
    """(video_id, frame) -> tracklets with an observation there, for frames shared by >=2."""
    active: dict[tuple[int, int], list[Tracklet]] = {}
    for t in sorted(tracklets, key=lambda t: (t.video_id, t.tracklet_id)):
        for f in t.frames:
            active.setdefault((t.video_id, f), []).append(t)
    return {k: v for k, v in sorted(active.items()) if len(v) >= 2}


def sample_inter_tracklet(
    tracklets: Sequence[Tracklet], count: int, seed: int, max_retries: int = 1000
) -> list[TripletSample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    shared = co_occurrence(tracklets)
    if not shared:
        raise SamplingError("no two tracklets co-occur in any frame")
    frames = list(shared)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        for _attempt in range(max_retries):
            video_id, f = frames[int(rng.integers(len(frames)))]
            ts = shared[(video_id, f)]
            ia, ineg = _pick_pair(rng, len(ts))
            anchor_t, neg_t = ts[ia], ts[ineg]
            others = [k for k in anchor_t.observations if k[0] != f]
            if others:
                break
        else:
            raise SamplingError(f"no anchor tracklet with a second frame after {max_retries} draws")
        pos = others[int(rng.integers(len(others)))]
        out.append(
            TripletSample(
                TARGET_INTER,
                video_id,
                Ref(*anchor_t.key_at(f), anchor_t.tracklet_id),
                Ref(*pos, anchor_t.tracklet_id),
                Ref(*neg_t.key_at(f), neg_t.tracklet_id),
            )
        )
    return out


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    batches: list[list[TripletSample]]

    def format(self) -> str:
        lines = [f"# batch_size={self.batch_size} batches={len(self.batches)}"]
        for i, batch in enumerate(self.batches):
            lines.extend(f"{i} {t.format()}" for t in batch)
        return "\n".join(lines) + "\n"


def plan_batches(
    train_triplets: Sequence[TripletSample],
    target_triplets: Sequence[TripletSample],
    batch_size: int,
    seed: int,
    with_replacement: bool = False,
) -> BatchPlan:
    """Mini-batches holding exactly half training and half target triplets.

    By default batching stops when either pool runs out. With
    ``with_replacement`` the plan covers ``(len(train) + len(target)) //
    batch_size`` batches and the short pool is topped up by resampling.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be a positive even number, got {batch_size}")
    if not train_triplets or not target_triplets:
        raise ValueError("both triplet pools must be non-empty")
    half = batch_size // 2
    rng = np.random.default_rng(seed)
    pools = []
    if with_replacement:
        n_batches = (len(train_triplets) + len(target_triplets)) // batch_size
    else:
        n_batches = min(len(train_triplets), len(target_triplets)) // half
    need = n_batches * half
    for pool in (train_triplets, target_triplets):
        order = list(rng.permutation(len(pool)))
        while len(order) < need:
            order.extend(int(i) for i in rng.integers(len(pool), size=min(len(pool), need - len(order))))
        pools.append([pool[i] for i in order[:need]])
    batches = [
        pools[0][b * half:(b + 1) * half] + pools[1][b * half:(b + 1) * half] for b in range(n_batches)
    ]
    return BatchPlan(batch_size, batches)


def format_manifest(triplets: Sequence[TripletSample], seed: int, extra: Mapping[str, object] | None = None) -> str:
    lines = [MANIFEST_MAGIC, f"# tool_version={__version__}", f"# seed={seed}"]
    for k, v in (extra or {}).items():
        lines.append(f"# {k}={v}")
    lines.extend(t.format() for t in triplets)
    return "\n".join(lines) + "\n"


_REF = re.compile(r"^(-?\d+),(-?\d+)(?:@(-?\d+))?$")
_AUG = re.compile(r"^AUG:(\d+)$")


def _parse_ref(text: str, line: int) -> Ref:
    m = _REF.match(text)
    if not m:
        raise ManifestParseError(f"bad observation reference {text!r}", line)
    label = None if m.group(3) is None else int(m.group(3))
    return Ref(int(m.group(1)), int(m.group(2)), label)


def parse_manifest(text: str) -> tuple[dict[str, str], list[TripletSample]]:
    header: dict[str, str] = {}
    triplets = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                header[k.strip()] = v.strip()
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ManifestParseError(f"expected 5 fields, got {len(parts)}", lineno)
        origin, video, a, p, n = parts
        if origin not in ORIGINS:
            raise ManifestParseError(f"unknown origin {origin!r}", lineno)
        try:
            video_id = int(video)
        except ValueError:
            raise ManifestParseError(f"bad video id {video!r}", lineno) from None
        m = _AUG.match(p)
        positive = Augment(int(m.group(1))) if m else _parse_ref(p, lineno)
        triplets.append(
            TripletSample(origin, video_id, _parse_ref(a, lineno), positive, _parse_ref(n, lineno))
        )
    return header, triplets


@dataclass(frozen=True)
class Violation:
    index: int
    message: str

    def __str__(self) -> str:
        return f"triplet {self.index}: {self.message}"


def check_triplet(t: TripletSample) -> list[str]:
    """Invariant violations of a single triplet, independent of any context."""
    problems = []
    a, p, n = t.anchor, t.positive, t.negative
    same_an = a.obs == n.obs
    if same_an:
        problems.append("anchor equals negative")
    if t.origin == TARGET_INTRA:
        if not isinstance(p, Augment):
            problems.append("positive must be an augmentation of the anchor")
        if a.frame != n.frame:
            problems.append("anchor and negative are in different frames")
        return problems
    if isinstance(p, Augment):
        problems.append("positive must be an observation reference")
        return problems
    if a.label is None or p.label is None or n.label is None:
        problems.append("missing identity/tracklet label")
        return problems
    if p.obs == a.obs:
        problems.append("positive equals anchor")
    if p.label != a.label:
        problems.append("positive label differs from anchor")
    if not same_an and n.label == a.label:
        problems.append("negative shares the anchor label")
    if t.origin == TARGET_INTER:
        if p.obs != a.obs and p.frame == a.frame:
            problems.append("positive in the anchor frame")
        if not same_an and a.frame != n.frame:
            problems.append("anchor and negative tracklets do not co-occur in the anchor frame")
    return problems


def validate_manifest(
    triplets: Sequence[TripletSample] | str, tracklets: Sequence[Tracklet] | None = None
) -> list[Violation]:
    """All invariant violations; empty iff the manifest is valid.

    With ``tracklets`` the inter-tracklet references are also checked against
    the actual tracklet membership, video and temporal ranges.
    """
    if isinstance(triplets, str):
        _, triplets = parse_manifest(triplets)
    by_id = {(t.video_id, t.tracklet_id): t for t in tracklets} if tracklets is not None else None
    out = []
    for i, t in enumerate(triplets):
        msgs = check_triplet(t)
        if by_id is not None and t.origin == TARGET_INTER and not msgs:
            msgs.extend(_check_against_tracklets(t, by_id))
        out.extend(Violation(i, m) for m in msgs)
    return out


def _check_against_tracklets(t: TripletSample, by_id: dict[tuple[int, int], Tracklet]) -> list[str]:
    problems = []
    ta = by_id.get((t.video_id, t.anchor.label))
    tn = by_id.get((t.video_id, t.negative.label))
    if ta is None or tn is None:
        return ["referenced tracklet not found in this video"]
    members = set(ta.observations)
    if t.anchor.obs not in members or t.positive.obs not in members:
        problems.append("anchor/positive not members of the anchor tracklet")
    if t.negative.obs not in set(tn.observations):
        problems.append("negative not a member of its tracklet")
    (a0, a1), (n0, n1) = ta.temporal_range, tn.temporal_range
    if a0 > n1 or n0 > a1:
        problems.append("anchor and negative tracklets do not overlap in time")
    return problems
