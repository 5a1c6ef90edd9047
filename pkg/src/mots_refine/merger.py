"""Merge short-term tracklets into long-term tracks.

Pairwise tracklet distances are the mean cosine distance over all
observation pairs, forbidden for the same tracklet, for temporally overlapping
tracklets, and for tracklets further apart than ``theta_t`` frames. Clusters
are then grown greedily by centroid linkage, keeping the temporal constraints
at cluster level, until the closest permitted pair is no longer below the cut.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import EmbeddingStore, ObsKey
from .short_tracker import INFEASIBLE, Tracklet

logger = logging.getLogger(__name__)

Interval = tuple[int, int]


def ranges_overlap(a: Interval, b: Interval) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def frame_gap(a: Interval, b: Interval) -> int:
    """Frames between two ranges; 0 when they touch or overlap."""
    return max(b[0] - a[1], a[0] - b[1], 0)


def tracklet_distance(a: Tracklet, b: Tracklet, theta_t: int, store: EmbeddingStore) -> float:
    if a.tracklet_id == b.tracklet_id:
        return INFEASIBLE
    ra, rb = a.temporal_range, b.temporal_range
    if frame_gap(ra, rb) > theta_t:
        return INFEASIBLE
    if ranges_overlap(ra, rb):
        return INFEASIBLE
    if a.tracklet_id > b.tracklet_id:
        # fixed summation order keeps the value bit-symmetric
        a, b = b, a
    ua = store.unit_rows(a.observations)
    ub = store.unit_rows(b.observations)
    sims = np.clip(ua @ ub.T, -1.0, 1.0)
    return float(np.mean(1.0 - sims))


@dataclass(frozen=True)
class LongDistanceMatrix:
    keys: list[int]
    entries: np.ndarray

    def get(self, a: int, b: int) -> float:
        return float(self.entries[self.keys.index(a), self.keys.index(b)])


def build_long_matrix(
    tracklets: Sequence[Tracklet], theta_t: int, store: EmbeddingStore
) -> LongDistanceMatrix:
    n = len(tracklets)
    entries = np.full((n, n), INFEASIBLE)
    for i in range(n):
        for j in range(i + 1, n):
            d = tracklet_distance(tracklets[i], tracklets[j], theta_t, store)
            entries[i, j] = entries[j, i] = d
    return LongDistanceMatrix([t.tracklet_id for t in tracklets], entries)


@dataclass
class TrackCluster:
    member_ids: list[int]
    ranges: list[Interval]
    centroid: np.ndarray = field(repr=False)

    @property
    def key(self) -> int:
        return self.member_ids[0]


def clusters_compatible(a: Sequence[Interval], b: Sequence[Interval], theta_t: int) -> bool:
    """No member ranges overlap and the closest ranges are within ``theta_t``."""
    closest = None
    for ra in a:
        for rb in b:
            if ranges_overlap(ra, rb):
                return False
            g = frame_gap(ra, rb)
            closest = g if closest is None else min(closest, g)
    return closest is not None and closest <= theta_t


def centroid_distance(ca: np.ndarray, cb: np.ndarray) -> float:
    sim = float(np.dot(ca, cb) / (np.linalg.norm(ca) * np.linalg.norm(cb)))
    return 1.0 - min(max(sim, -1.0), 1.0)


@dataclass(frozen=True)
class MergeStep:
    step: int
    left: int
    right: int
    distance: float
    ranges: tuple[Interval, ...]

    def format(self) -> str:
        rs = " ".join(f"{a}-{b}" for a, b in self.ranges)
        return f"{self.step} {self.left} {self.right} {self.distance:.9f} {rs}"


def _centroid(
    member_ids: Sequence[int], by_id: dict[int, Tracklet], store: EmbeddingStore, normalize: bool
) -> np.ndarray:
    keys: list[ObsKey] = []
    for tid in sorted(member_ids):
        keys.extend(by_id[tid].observations)
    rows = store.unit_rows(keys) if normalize else store.raw_rows(keys)
    return rows.mean(axis=0)


def cluster(
    matrix: LongDistanceMatrix,
    tracklets: Sequence[Tracklet],
    cut: float,
    theta_t: int,
    store: EmbeddingStore,
    normalize_centroids: bool = False,
    log: list[MergeStep] | None = None,
) -> list[TrackCluster]:
    """Constrained agglomerative clustering with centroid linkage.

    Pairs of untouched tracklets keep their initial matrix distance; any pair
    involving a merged cluster is scored by the cosine distance between
    centroids. Ties go to the pair with the smallest (first key, second key),
    keys being the minimum member tracklet id.
    """
    by_id = {t.tracklet_id: t for t in tracklets}
    if set(by_id) != set(matrix.keys):
        raise ValueError("matrix keys do not match the tracklets")
    index = {k: i for i, k in enumerate(matrix.keys)}

    clusters: dict[int, TrackCluster] = {}
    for tid in sorted(by_id):
        t = by_id[tid]
        clusters[tid] = TrackCluster([tid], [t.temporal_range], _centroid([tid], by_id, store, normalize_centroids))

    # pair distances keyed by (smaller key, larger key)
    dist: dict[tuple[int, int], float] = {}
    keys = sorted(clusters)
    for i, ka in enumerate(keys):
        for kb in keys[i + 1:]:
            d = float(matrix.entries[index[ka], index[kb]])
            if math.isfinite(d):
                dist[(ka, kb)] = d

    step = 0
    while True:
        best = None
        for pair, d in dist.items():
            if d < cut and (best is None or (d, pair) < best):
                best = (d, pair)
        if best is None:
            break
        d, (ka, kb) = best
        a, b = clusters.pop(ka), clusters.pop(kb)
        members = sorted(a.member_ids + b.member_ids)
        merged = TrackCluster(
            members,
            sorted(a.ranges + b.ranges),
            _centroid(members, by_id, store, normalize_centroids),
        )
        step += 1
        if log is not None:
            log.append(MergeStep(step, ka, kb, d, tuple(merged.ranges)))
        dist = {p: v for p, v in dist.items() if ka not in p and kb not in p}
        for kc, c in clusters.items():
            if clusters_compatible(merged.ranges, c.ranges, theta_t):
                dist[tuple(sorted((merged.key, kc)))] = centroid_distance(merged.centroid, c.centroid)
        clusters[merged.key] = merged

    return [clusters[k] for k in sorted(clusters)]


@dataclass(frozen=True)
class FinalTrack:
    track_id: int
    tracklet_ids: tuple[int, ...]
    observations: tuple[ObsKey, ...]


def relabel(
    tracklets: Sequence[Tracklet], clusters: Sequence[TrackCluster], class_id: int = 2
) -> list[FinalTrack]:
    """Assign final track ids (``class_id * 1000 + 1`` onwards) by first appearance."""
    by_id = {t.tracklet_id: t for t in tracklets}
    seen: set[int] = set()
    built = []
    for c in clusters:
        obs: list[ObsKey] = []
        for tid in c.member_ids:
            if tid in seen:
                raise ValueError(f"tracklet {tid} appears in two clusters")
            seen.add(tid)
            obs.extend(by_id[tid].observations)
        obs.sort()
        frames = [f for f, _ in obs]
        if len(set(frames)) != len(frames):
            raise RuntimeError(f"cluster {c.member_ids} holds two observations in one frame")
        built.append((frames[0], c.member_ids[0], tuple(c.member_ids), tuple(obs)))
    if seen != set(by_id):
        raise ValueError(f"clusters miss tracklets {sorted(set(by_id) - seen)}")
    built.sort()
    base = class_id * 1000 + 1
    return [FinalTrack(base + i, mids, obs) for i, (_, _, mids, obs) in enumerate(built)]


def merge_tracklets(
    tracklets: Sequence[Tracklet],
    theta_long: float,
    theta_t: int,
    store: EmbeddingStore,
    normalize_centroids: bool = False,
    class_id: int = 2,
    log: list[MergeStep] | None = None,
) -> list[FinalTrack]:
    matrix = build_long_matrix(tracklets, theta_t, store)
    clusters = cluster(matrix, tracklets, 1.0 - theta_long, theta_t, store, normalize_centroids, log)
    logger.info("merged %d tracklets into %d tracks", len(tracklets), len(clusters))
    return relabel(tracklets, clusters, class_id)
