"""Association quality of a tracking result against synthetic ground truth.

Only the observations present in the result are scored: the evaluator judges
how they were linked, not how many objects the detector found.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment

from .features import ObsKey
from .formats import GtLabel

FALSE_POSITIVE = -1


@dataclass(frozen=True)
class AssociationReport:
    id_switches: int
    identity_f1: float
    track_purity: float
    constraint_violations: int
    num_observations: int
    num_tracks: int
    num_identities: int

    def as_dict(self) -> dict:
        return asdict(self)


def identity_tp(pairs: Mapping[tuple[int, int], int]) -> int:
    """Largest total overlap of a one-to-one track-to-identity matching."""
    if not pairs:
        return 0
    tracks = sorted({t for t, _ in pairs})
    ids = sorted({i for _, i in pairs})
    w = np.zeros((len(tracks), len(ids)))
    ti = {t: n for n, t in enumerate(tracks)}
    ii = {i: n for n, i in enumerate(ids)}
    for (t, i), c in pairs.items():
        w[ti[t], ii[i]] = c
    r, c = linear_sum_assignment(w, maximize=True)
    return int(w[r, c].sum())


def evaluate_association(
    assignments: Mapping[ObsKey, int], gt_labels: Iterable[GtLabel]
) -> AssociationReport:
    labels = {(g.frame_id, g.object_key): (FALSE_POSITIVE if g.is_false_positive else g.identity_id) for g in gt_labels}
    missing = [k for k in assignments if k not in labels]
    if missing:
        raise ValueError(f"{len(missing)} result observations have no ground-truth label, e.g. {missing[0]}")

    per_frame = Counter((f, tid) for (f, _), tid in assignments.items())
    violations = sum(c - 1 for c in per_frame.values() if c > 1)

    by_identity: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for (f, k), tid in assignments.items():
        ident = labels[(f, k)]
        if ident != FALSE_POSITIVE:
            by_identity[ident].append((f, tid))
    switches = 0
    for obs in by_identity.values():
        obs.sort()
        switches += sum(1 for (_, a), (_, b) in zip(obs, obs[1:]) if a != b)

    overlap: Counter = Counter()
    track_sizes: Counter = Counter()
    for key, tid in assignments.items():
        track_sizes[tid] += 1
        ident = labels[key]
        if ident != FALSE_POSITIVE:
            overlap[(tid, ident)] += 1

    n_pred = len(assignments)
    n_gt = sum(len(v) for v in by_identity.values())
    idtp = identity_tp(overlap)
    f1 = 2.0 * idtp / (n_pred + n_gt) if n_pred + n_gt else 1.0

    majority: dict[int, int] = defaultdict(int)
    for (tid, _), c in overlap.items():
        majority[tid] = max(majority[tid], c)
    purity = sum(majority.values()) / n_pred if n_pred else 1.0

    return AssociationReport(
        id_switches=switches,
        identity_f1=f1,
        track_purity=purity,
        constraint_violations=violations,
        num_observations=n_pred,
        num_tracks=len(track_sizes),
        num_identities=len(by_identity),
    )
