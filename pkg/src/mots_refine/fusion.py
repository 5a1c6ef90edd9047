"""Cross-source mask fusion: IoM-based NMS followed by per-pixel overlap resolution."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .masks import iom

DEFAULT_IOM_THRESHOLD = 0.5


@dataclass(frozen=True)
class Detection:
    frame_id: int
    object_key: int
    mask: np.ndarray
    score: float
    source_id: int = 0
    class_id: int = 2

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True)
class FusionConfig:
    iom_threshold: float = DEFAULT_IOM_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.iom_threshold <= 1.0:
            raise ValueError(f"iom_threshold must be in (0, 1], got {self.iom_threshold}")


def priority_order(detections: Sequence[Detection]) -> list[int]:
    """Indices by descending score; ties go to lower source id, then input order."""
    return sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].score, detections[i].source_id, i),
    )


def _check_single_frame(detections: Sequence[Detection]) -> None:
    frames = {d.frame_id for d in detections}
    if len(frames) > 1:
        raise ValueError(f"detections span several frames: {sorted(frames)}")


def nms_iom(detections: Sequence[Detection], config: FusionConfig | None = None) -> list[Detection]:
    config = config or FusionConfig()
    _check_single_frame(detections)
    kept: list[Detection] = []
    for i in priority_order(detections):
        det = detections[i]
        if det.area == 0:
            continue
        if any(iom(det.mask, k.mask) >= config.iom_threshold for k in kept):
            continue
        kept.append(det)
    return kept


def resolve_overlaps(detections: Sequence[Detection]) -> list[Detection]:
    """Give every contested pixel to its highest-priority claimant.

    Masks that lose all their pixels are dropped. The result is pairwise
    disjoint and ordered by priority.
    """
    _check_single_frame(detections)
    if not detections:
        return []
    claimed = np.zeros_like(detections[0].mask, dtype=bool)
    out = []
    for i in priority_order(detections):
        det = detections[i]
        own = det.mask & ~claimed
        if not own.any():
            continue
        claimed |= own
        out.append(det if np.array_equal(own, det.mask) else replace(det, mask=own))
    return out


def fuse_frame(detections: Sequence[Detection], config: FusionConfig | None = None) -> list[Detection]:
    return resolve_overlaps(nms_iom(detections, config))


def fuse(detections: Sequence[Detection], config: FusionConfig | None = None) -> list[Detection]:
    """Fuse pooled detections from all sources, frame by frame."""
    by_frame: dict[int, list[Detection]] = {}
    for det in detections:
        by_frame.setdefault(det.frame_id, []).append(det)
    out = []
    for frame_id in sorted(by_frame):
        out.extend(fuse_frame(by_frame[frame_id], config))
    return out
