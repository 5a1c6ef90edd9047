"""Appearance embeddings, cosine similarity and data-driven similarity thresholds."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

INTRA_FRAME_NEGATIVE = "intra_frame_negative"
INTRA_TRACKLET_POSITIVE = "intra_tracklet_positive"

MIN_SAMPLES = 30
FALLBACK_THETA_SHORT = 0.5
FALLBACK_THETA_LONG = 0.6
DEFAULT_THETA_T = 15

ObsKey = tuple[int, int]


class EstimationError(ValueError):
    """The sample set cannot support a threshold estimate."""


class SeparationError(EstimationError):
    """Positive similarities are not above negative ones."""


@dataclass(frozen=True)
class Thresholds:
    theta_app_short: float
    theta_app_long: float
    theta_t: int = DEFAULT_THETA_T

    def __post_init__(self):
        if self.theta_t < 1:
            raise ValueError(f"theta_t must be >= 1, got {self.theta_t}")
        for name in ("theta_app_short", "theta_app_long"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [-1, 1]")


@dataclass(frozen=True)
class SimilaritySampleSet:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in (INTRA_FRAME_NEGATIVE, INTRA_TRACKLET_POSITIVE):
            raise ValueError(f"unknown sample kind {self.kind!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.size and (v.min() < -1.0 or v.max() > 1.0):
            raise ValueError("similarities must lie in [-1, 1]")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        # population convention (ddof=0)
        return float(np.std(self.values))


class EmbeddingStore:
    """Read-only lookup of embeddings keyed by ``(frame_id, object_key)``."""

    def __init__(self, keys: Sequence[ObsKey], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(keys) != vectors.shape[0]:
            raise ValueError("keys and vectors disagree in length")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embeddings contain non-finite values")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            bad = keys[int(np.flatnonzero(norms == 0)[0])]
            raise ValueError(f"zero-norm embedding for observation {bad}")
        self._index = {tuple(map(int, k)): i for i, k in enumerate(keys)}
        if len(self._index) != len(keys):
            raise ValueError("duplicate embedding keys")
        self.keys = [tuple(map(int, k)) for k in keys]
        self.vectors = vectors
        self.unit = vectors / norms[:, None]
        self.vectors.setflags(write=False)
        self.unit.setflags(write=False)

    @classmethod
    def from_mapping(cls, mapping: Mapping[ObsKey, np.ndarray]) -> EmbeddingStore:
        keys = list(mapping)
        if not keys:
            return cls([], np.zeros((0, 1)))
        return cls(keys, np.stack([np.asarray(mapping[k], dtype=np.float64) for k in keys]))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._index

    def _row(self, key: ObsKey) -> int:
        try:
            return self._index[tuple(key)]
        except KeyError:
            raise KeyError(f"no embedding for observation {tuple(key)}") from None

    def vector(self, key: ObsKey) -> np.ndarray:
        return self.vectors[self._row(key)]

    def unit_rows(self, keys: Iterable[ObsKey]) -> np.ndarray:
        rows = [self._row(k) for k in keys]
        return self.unit[rows]

    def raw_rows(self, keys: Iterable[ObsKey]) -> np.ndarray:
        rows = [self._row(k) for k in keys]
        return self.vectors[rows]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def collect_intra_frame_similarities(
    frames: Mapping[int, Sequence[ObsKey]] | Iterable[Sequence[ObsKey]],
    store: EmbeddingStore,
) -> SimilaritySampleSet:
    """Cosine similarity of every unordered pair of observations sharing a frame."""
    groups = frames.values() if isinstance(frames, Mapping) else frames
    chunks = []
    for keys in groups:
        if len(keys) < 2:
            continue
        u = store.unit_rows(keys)
        sims = u @ u.T
        iu = np.triu_indices(len(keys), k=1)
        chunks.append(sims[iu])
    values = np.clip(np.concatenate(chunks), -1.0, 1.0) if chunks else np.zeros(0)
    return SimilaritySampleSet(values, INTRA_FRAME_NEGATIVE)


def collect_intra_tracklet_similarities(
    tracklets: Iterable[Sequence[ObsKey]], store: EmbeddingStore
) -> SimilaritySampleSet:
    """Cosine similarity of every cross-frame observation pair inside each tracklet."""
    chunks = []
    for keys in tracklets:
        if len(keys) < 2:
            continue
        u = store.unit_rows(keys)
        iu = np.triu_indices(len(keys), k=1)
        chunks.append((u @ u.T)[iu])
    values = np.clip(np.concatenate(chunks), -1.0, 1.0) if chunks else np.zeros(0)
    return SimilaritySampleSet(values, INTRA_TRACKLET_POSITIVE)


def _require(samples: SimilaritySampleSet, kind: str, min_samples: int) -> None:
    if samples.kind != kind:
        raise ValueError(f"expected {kind} samples, got {samples.kind}")
    if len(samples) < min_samples:
        raise EstimationError(
            f"only {len(samples)} {kind} samples (< {min_samples}); "
            "use the configured fallback threshold"
        )


def estimate_theta_short(samples: SimilaritySampleSet, min_samples: int = MIN_SAMPLES) -> float:
    """Mean plus three standard deviations of intra-frame (negative) similarities."""
    _require(samples, INTRA_FRAME_NEGATIVE, min_samples)
    return min(samples.mean + 3.0 * samples.std, 1.0)


def gaussian_crossing(mu_n: float, sd_n: float, mu_p: float, sd_p: float) -> float:
    """Point between the means where two normal densities are equal.

    Falls back to the equal-error point ``(mu_n*sd_p + mu_p*sd_n)/(sd_n + sd_p)``
    when no root lies strictly between the means.
    """
    if mu_p <= mu_n:
        raise SeparationError(f"positive mean {mu_p:.4f} <= negative mean {mu_n:.4f}")
    if math.isclose(sd_n, sd_p, rel_tol=1e-9, abs_tol=1e-15):
        return (mu_n + mu_p) / 2.0
    if sd_n == 0 or sd_p == 0:
        return _equal_error(mu_n, sd_n, mu_p, sd_p)
    # (x-mu_n)^2/sd_n^2 - (x-mu_p)^2/sd_p^2 + 2 ln(sd_n/sd_p) = 0
    vn, vp = sd_n * sd_n, sd_p * sd_p
    a = 1.0 / vn - 1.0 / vp
    b = 2.0 * (mu_p / vp - mu_n / vn)
    c = mu_n * mu_n / vn - mu_p * mu_p / vp + 2.0 * math.log(sd_n / sd_p)
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return _equal_error(mu_n, sd_n, mu_p, sd_p)
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    roots = []
    if q != 0:
        roots.append(c / q)
    if a != 0:
        roots.append(q / a)
    inside = [r for r in roots if mu_n < r < mu_p]
    if not inside:
        return _equal_error(mu_n, sd_n, mu_p, sd_p)
    # two roots inside can only happen with a very wide distribution; take the
    # one nearer the equal-error point
    ref = _equal_error(mu_n, sd_n, mu_p, sd_p)
    return min(inside, key=lambda r: abs(r - ref))


def _equal_error(mu_n: float, sd_n: float, mu_p: float, sd_p: float) -> float:
    if sd_n + sd_p == 0:
        return (mu_n + mu_p) / 2.0
    return (mu_n * sd_p + mu_p * sd_n) / (sd_n + sd_p)


def otsu_threshold(negatives: np.ndarray, positives: np.ndarray, bins: int = 256) -> float:
    """Histogram valley between pooled samples by maximising between-class variance."""
    pooled = np.concatenate([negatives, positives])
    counts, edges = np.histogram(pooled, bins=bins, range=(-1.0, 1.0))
    centers = (edges[:-1] + edges[1:]) / 2.0
    w = counts.astype(np.float64)
    w0 = np.cumsum(w)
    w1 = w0[-1] - w0
    m0 = np.cumsum(w * centers)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 / w0[-1] - m0) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between))
    return float(edges[k + 1])


def estimate_theta_long(
    negatives: SimilaritySampleSet,
    positives: SimilaritySampleSet,
    min_samples: int = MIN_SAMPLES,
    method: str = "gaussian",
) -> float:
    """Similarity separating intra-frame negatives from intra-tracklet positives."""
    _require(negatives, INTRA_FRAME_NEGATIVE, min_samples)
    _require(positives, INTRA_TRACKLET_POSITIVE, min_samples)
    if positives.mean <= negatives.mean:
        raise SeparationError(
            f"positive mean {positives.mean:.4f} <= negative mean {negatives.mean:.4f}"
        )
    if method == "gaussian":
        return gaussian_crossing(negatives.mean, negatives.std, positives.mean, positives.std)
    if method == "otsu":
        return otsu_threshold(negatives.values, positives.values)
    raise ValueError(f"unknown threshold method {method!r}")


def histogram(samples: SimilaritySampleSet, bins: int = 50) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(samples.values, bins=bins, range=(-1.0, 1.0))
    return edges, counts
