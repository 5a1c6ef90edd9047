"""Two-frame association into short-term tracklets.

Adjacent frames are linked by a distance matrix whose entries are forbidden
when the flow-warped previous mask does not touch the current mask, or when
the appearance distance exceeds ``1 - theta_short``. A linear assignment over
the permitted entries extends tracklets; everything else starts a new one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .features import EmbeddingStore, ObsKey
from .masks import FlowField, iou, warp_mask

logger = logging.getLogger(__name__)

INFEASIBLE = math.inf


@dataclass(frozen=True)
class Observation:
    frame_id: int
    object_key: int
    mask: np.ndarray
    score: float = 1.0

    @property
    def key(self) -> ObsKey:
        return self.frame_id, self.object_key


@dataclass
class Tracklet:
    tracklet_id: int
    video_id: int = 0
    observations: list[ObsKey] = field(default_factory=list)

    def __post_init__(self):
        frames = [f for f, _ in self.observations]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"tracklet {self.tracklet_id}: frames must strictly increase")

    @property
    def frames(self) -> list[int]:
        return [f for f, _ in self.observations]

    @property
    def first_frame(self) -> int:
        return self.observations[0][0]

    @property
    def last_frame(self) -> int:
        return self.observations[-1][0]

    @property
    def temporal_range(self) -> tuple[int, int]:
        return self.first_frame, self.last_frame

    def __len__(self) -> int:
        return len(self.observations)

    def append(self, key: ObsKey) -> None:
        if self.observations and key[0] <= self.last_frame:
            raise ValueError(f"tracklet {self.tracklet_id}: frame {key[0]} not after {self.last_frame}")
        self.observations.append(key)

    def key_at(self, frame_id: int) -> ObsKey | None:
        for key in self.observations:
            if key[0] == frame_id:
                return key
        return None


@dataclass(frozen=True)
class ShortDistanceMatrix:
    rows: list[ObsKey]
    cols: list[ObsKey]
    entries: np.ndarray

    def feasible(self) -> np.ndarray:
        return np.isfinite(self.entries)


def build_short_matrix(
    prev: Sequence[Observation],
    curr: Sequence[Observation],
    flow: FlowField,
    theta_short: float,
    store: EmbeddingStore,
) -> ShortDistanceMatrix:
    entries = np.full((len(prev), len(curr)), INFEASIBLE)
    if prev and curr:
        warped = [warp_mask(o.mask, flow) for o in prev]
        up = store.unit_rows([o.key for o in prev])
        uc = store.unit_rows([o.key for o in curr])
        sims = np.clip(up @ uc.T, -1.0, 1.0)
        limit = 1.0 - theta_short
        for i, wm in enumerate(warped):
            for j, o in enumerate(curr):
                if iou(wm, o.mask) == 0:
                    continue
                d = 1.0 - sims[i, j]
                if d > limit:
                    continue
                entries[i, j] = d
    return ShortDistanceMatrix([o.key for o in prev], [o.key for o in curr], entries)


def solve_assignment(matrix: ShortDistanceMatrix | np.ndarray) -> list[tuple[int, int]]:
    """Largest one-to-one matching over feasible entries, cheapest among those.

    Returns ``(row, col)`` index pairs sorted by row. Forbidden entries are
    never selected: they are priced above the sum of every feasible cost, so
    the solver first maximises the number of feasible matches, then
    minimises their total; any forbidden pair it is forced to emit is dropped.
    """
    cost = matrix.entries if isinstance(matrix, ShortDistanceMatrix) else np.asarray(matrix, float)
    if cost.size == 0:
        return []
    feasible = np.isfinite(cost)
    if not feasible.any():
        return []
    # drop rows/cols without any feasible entry so the penalty stays small
    rows = np.flatnonzero(feasible.any(axis=1))
    cols = np.flatnonzero(feasible.any(axis=0))
    sub = cost[np.ix_(rows, cols)]
    sub_feasible = feasible[np.ix_(rows, cols)]
    penalty = 1.0 + float(np.abs(sub[sub_feasible]).sum()) * 2.0
    priced = np.where(sub_feasible, sub, penalty)
    r, c = linear_sum_assignment(priced)
    pairs = [(int(rows[i]), int(cols[j])) for i, j in zip(r, c) if sub_feasible[i, j]]
    return sorted(pairs)


def matched_cost(cost: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    return math.fsum(float(cost[i, j]) for i, j in pairs)


FlowProvider = Callable[[int], FlowField | None]


def track_video(
    frames: Sequence[tuple[int, Sequence[Observation]]],
    flows: Mapping[int, FlowField] | FlowProvider,
    theta_short: float,
    store: EmbeddingStore,
    video_id: int = 0,
    identity_flow_fallback: bool = False,
    first_id: int = 1,
) -> list[Tracklet]:
    """Associate frame ``t`` to frame ``t+1`` observations into tracklets.

    ``frames`` is a list of ``(frame_id, observations)`` in strictly increasing
    frame order. ``flows[t]`` maps frame ``t`` onto ``t+1``. Frames that are not
    consecutive integers are never linked.
    """
    get_flow = flows.get if isinstance(flows, Mapping) else flows
    tracklets: list[Tracklet] = []
    owner: dict[ObsKey, Tracklet] = {}
    prev_id: int | None = None
    prev_obs: Sequence[Observation] = ()
    next_id = first_id

    for frame_id, obs in frames:
        if prev_id is not None and frame_id <= prev_id:
            raise ValueError(f"frame {frame_id} follows frame {prev_id}: frames must increase")
        for o in obs:
            if o.frame_id != frame_id:
                raise ValueError(f"observation {o.key} listed under frame {frame_id}")
        matches: list[tuple[int, int]] = []
        if prev_id is not None and frame_id == prev_id + 1 and prev_obs and obs:
            flow = get_flow(prev_id)
            if flow is None:
                if not identity_flow_fallback:
                    raise KeyError(f"no flow for frames {prev_id}->{frame_id}")
                h, w = obs[0].mask.shape
                flow = FlowField.zeros(h, w)
            matrix = build_short_matrix(prev_obs, obs, flow, theta_short, store)
            matches = solve_assignment(matrix)
        linked = {j: i for i, j in matches}
        for j, o in enumerate(obs):
            if j in linked:
                t = owner[prev_obs[linked[j]].key]
            else:
                t = Tracklet(next_id, video_id)
                next_id += 1
                tracklets.append(t)
            t.append(o.key)
            owner[o.key] = t
        prev_id, prev_obs = frame_id, obs
    logger.debug("video %d: %d tracklets", video_id, len(tracklets))
    return tracklets
