"""Deterministic synthetic tracking scenes with full ground truth.

Each identity owns a horizontal lane and bounces left/right with a small
vertical wobble, so masks of different identities never touch unless an
occlusion event drags one object over its neighbour. Identity appearance
means are built with an exact pairwise cosine similarity and every detection
gets ``mean + noise``. Flows are the ground-truth integer displacements.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import EmbeddingStore
from .formats import (
    GtLabel,
    MotsResultLine,
    atomic_write_text,
    flow_filename,
    write_detections,
    write_embeddings,
    write_flow,
    write_gt_labels,
    write_mots,
)
from .fusion import Detection
from .masks import FlowField, encode_rle

logger = logging.getLogger(__name__)

LANE_MARGIN = 2


@dataclass(frozen=True)
class ScenarioConfig:
    num_identities: int = 5
    num_frames: int = 200
    frame_height: int = 96
    frame_width: int = 160
    object_height: int = 12
    object_width: int = 10
    embedding_dim: int = 32
    sigma_within: float = 0.05
    sigma_between: float = 3.0
    misdetection_rate: float = 0.1
    occlusion_events: int = 3
    occlusion_length: int = 16
    false_positive_rate: float = 0.0
    num_sources: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("misdetection_rate", "false_positive_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("num_frames", "frame_height", "frame_width", "object_height", "object_width",
                     "embedding_dim", "num_sources"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_identities < 0 or self.occlusion_events < 0:
            raise ValueError("num_identities and occlusion_events must be >= 0")
        if self.sigma_within < 0 or self.sigma_between < 0:
            raise ValueError("similarity spreads must be >= 0")
        if self.num_identities * self.lane_height > self.frame_height:
            raise ValueError(
                f"{self.num_identities} lanes of {self.lane_height}px do not fit a {self.frame_height}px frame"
            )
        if self.object_width + 4 > self.frame_width:
            raise ValueError("frame too narrow for the objects")
        if self.embedding_dim < self.num_identities + 1:
            raise ValueError("embedding_dim must exceed num_identities")
        if self.occlusion_events and (self.num_identities < 2 or self.occlusion_length + 2 > self.num_frames):
            raise ValueError("occlusion events need two identities and enough frames")

    @property
    def lane_height(self) -> int:
        return self.object_height + 2 * LANE_MARGIN

    def target_within_similarity(self) -> float:
        """Expected cosine similarity of two observations of one identity."""
        return 1.0 / (1.0 + self.sigma_within**2)

    def target_between_similarity(self) -> float:
        """Expected cosine similarity of observations of two different identities."""
        return 1.0 / (1.0 + self.sigma_between**2) / (1.0 + self.sigma_within**2)


@dataclass(frozen=True)
class OcclusionEvent:
    front: int
    back: int
    start: int
    end: int


@dataclass
class Scenario:
    config: ScenarioConfig
    # identity -> (num_frames, 2) integer top-left (row, col); frames are 1-based
    positions: dict[int, np.ndarray]
    shapes: dict[int, np.ndarray]
    occlusions: list[OcclusionEvent]
    detections: list[Detection]
    embeddings: EmbeddingStore
    labels: list[GtLabel]
    flows: dict[int, FlowField] = field(repr=False)
    identity_means: np.ndarray = field(repr=False)

    @property
    def frame_ids(self) -> list[int]:
        return list(range(1, self.config.num_frames + 1))

    def gt_mask(self, identity: int, frame_id: int) -> np.ndarray:
        c = self.config
        r, col = self.positions[identity][frame_id - 1]
        m = np.zeros((c.frame_height, c.frame_width), dtype=bool)
        shape = self.shapes[identity]
        m[r:r + shape.shape[0], col:col + shape.shape[1]] = shape
        return m

    def label_map(self) -> dict[tuple[int, int], int]:
        return {(g.frame_id, g.object_key): (-1 if g.is_false_positive else g.identity_id) for g in self.labels}

    def detections_by_source(self) -> dict[int, list[Detection]]:
        out: dict[int, list[Detection]] = {s: [] for s in range(self.config.num_sources)}
        for d in self.detections:
            out[d.source_id].append(d)
        return out

    def occluded(self, identity: int, frame_id: int) -> bool:
        return any(
            identity in (e.front, e.back) and e.start <= frame_id <= e.end for e in self.occlusions
        )


def _identity_means(rng: np.random.Generator, n: int, dim: int, sigma_between: float) -> np.ndarray:
    # orthonormal base + spokes give pairwise cosine exactly 1/(1+sigma^2)
    q, _ = np.linalg.qr(rng.standard_normal((dim, n + 1)))
    base, spokes = q[:, 0], q[:, 1:].T
    means = base[None, :] + sigma_between * spokes
    return means / np.sqrt(1.0 + sigma_between**2)


def _shape(kind: int, h: int, w: int) -> np.ndarray:
    if kind == 0:
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0


def _trajectories(c: ScenarioConfig, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Real-valued top-left (row, col) per identity and frame."""
    out = {}
    max_col = c.frame_width - c.object_width
    t = np.arange(c.num_frames)
    for i in range(c.num_identities):
        lane_top = i * c.lane_height + LANE_MARGIN
        speed = rng.uniform(0.8, 2.5) * rng.choice([-1.0, 1.0])
        x0 = rng.uniform(0, max_col)
        # reflect an unbounded walk into [0, max_col]
        raw = np.mod(x0 + speed * t, 2 * max_col)
        cols = np.where(raw > max_col, 2 * max_col - raw, raw)
        phase = rng.uniform(0, 2 * np.pi)
        period = rng.uniform(20, 60)
        rows = lane_top + 1.5 * np.sin(2 * np.pi * t / period + phase)
        out[i] = np.stack([rows, cols], axis=1)
    return out


def _occlusions(c: ScenarioConfig, rng: np.random.Generator) -> list[OcclusionEvent]:
    events: list[OcclusionEvent] = []
    busy: dict[int, list[tuple[int, int]]] = {}
    attempts = 0
    while len(events) < c.occlusion_events:
        attempts += 1
        if attempts > 1000:
            raise ValueError("cannot place the requested occlusion events")
        lane = int(rng.integers(c.num_identities - 1))
        front, back = (lane, lane + 1) if rng.random() < 0.5 else (lane + 1, lane)
        start = int(rng.integers(1, c.num_frames - c.occlusion_length + 1))
        end = start + c.occlusion_length - 1
        clash = any(
            s <= end + 2 and start <= e + 2 for ident in (front, back) for s, e in busy.get(ident, [])
        )
        if clash:
            continue
        events.append(OcclusionEvent(front, back, start, end))
        for ident in (front, back):
            busy.setdefault(ident, []).append((start, end))
    return sorted(events, key=lambda e: (e.start, e.front))


def _apply_occlusions(c: ScenarioConfig, traj: dict[int, np.ndarray], events: list[OcclusionEvent]) -> None:
    offset = np.array([0.6 * c.object_height, 0.3 * c.object_width])
    for e in events:
        for f in range(e.start, e.end + 1):
            # ramp in, hold full overlap, ramp out
            w = min(1.0, 2.0 * np.sin(np.pi * (f - e.start + 1) / (c.occlusion_length + 1)))
            own = traj[e.back][f - 1]
            target = traj[e.front][f - 1] + offset * np.sign(own - traj[e.front][f - 1] + 1e-9)
            traj[e.back][f - 1] = (1 - w) * own + w * target


def generate(config: ScenarioConfig) -> Scenario:
    c = config
    rng = np.random.default_rng(c.seed)
    means = _identity_means(rng, c.num_identities, c.embedding_dim, c.sigma_between)
    shapes = {i: _shape(i % 2, c.object_height, c.object_width) for i in range(c.num_identities)}
    traj = _trajectories(c, rng)
    events = _occlusions(c, rng) if c.num_identities >= 2 else []
    _apply_occlusions(c, traj, events)
    positions = {}
    for i, tr in traj.items():
        pos = np.floor(tr + 0.5).astype(np.int64)
        pos[:, 0] = np.clip(pos[:, 0], 0, c.frame_height - c.object_height)
        pos[:, 1] = np.clip(pos[:, 1], 0, c.frame_width - c.object_width)
        positions[i] = pos

    scenario = Scenario(c, positions, shapes, events, [], EmbeddingStore([], np.zeros((0, 1))), [], {}, means)
    scenario.flows = _flows(scenario)

    noise_scale = c.sigma_within / np.sqrt(c.embedding_dim)
    detections: list[Detection] = []
    labels: list[GtLabel] = []
    keys: list[tuple[int, int]] = []
    vectors: list[np.ndarray] = []
    per_frame: dict[int, int] = {}

    def add(frame, mask, score, source, identity, is_fp, vec):
        key = per_frame[frame] = per_frame.get(frame, 0) + 1
        detections.append(Detection(frame, key, mask, round(float(score), 4), source))
        labels.append(GtLabel(frame, key, identity, is_fp))
        keys.append((frame, key))
        vectors.append(vec.astype(np.float32).astype(np.float64))

    h, w = c.frame_height, c.frame_width
    for f in scenario.frame_ids:
        for i in range(c.num_identities):
            detected = rng.random() >= c.misdetection_rate
            # draws happen regardless of the outcome so configs share a random stream
            scores = rng.uniform(0.6, 1.0), rng.uniform(0.3, 0.9)
            shift = rng.integers(-1, 2, size=2)
            dup = rng.random() < 0.8
            noise = rng.standard_normal((2, c.embedding_dim)) * noise_scale
            if not detected:
                continue
            mask = scenario.gt_mask(i, f)
            add(f, mask, scores[0], 0, i, False, means[i] + noise[0])
            if c.num_sources > 1 and dup:
                shifted = np.zeros_like(mask)
                ys, xs = np.nonzero(mask)
                ys = np.clip(ys + shift[0], 0, h - 1)
                xs = np.clip(xs + shift[1], 0, w - 1)
                shifted[ys, xs] = True
                add(f, shifted, scores[1], 1, i, False, means[i] + noise[1])
        if c.false_positive_rate and rng.random() < c.false_positive_rate:
            size = max(2, c.object_height // 3)
            r = int(rng.integers(0, h - size))
            col = int(rng.integers(0, w - size))
            m = np.zeros((h, w), dtype=bool)
            m[r:r + size, col:col + size] = True
            vec = rng.standard_normal(c.embedding_dim)
            add(f, m, rng.uniform(0.3, 0.7), int(rng.integers(c.num_sources)), -1, True, vec / np.linalg.norm(vec))

    scenario.detections = detections
    scenario.labels = labels
    scenario.embeddings = EmbeddingStore(keys, np.array(vectors) if vectors else np.zeros((0, c.embedding_dim)))
    return scenario


def _flows(s: Scenario) -> dict[int, FlowField]:
    c = s.config
    flows = {}
    for f in s.frame_ids[:-1]:
        # paint back-to-front so the front object's motion wins on shared pixels
        fronts = {e.front for e in s.occlusions if e.start <= f <= e.end}
        order = sorted(range(c.num_identities), key=lambda i: (i in fronts, i))
        dx = np.zeros((c.frame_height, c.frame_width), dtype=np.float32)
        dy = np.zeros_like(dx)
        for i in order:
            m = s.gt_mask(i, f)
            d = s.positions[i][f] - s.positions[i][f - 1]
            dy[m] = d[0]
            dx[m] = d[1]
        flows[f] = FlowField(dx, dy)
    return flows


def gt_tracks(s: Scenario, class_id: int = 2) -> list[MotsResultLine]:
    rows = []
    for i in range(s.config.num_identities):
        for f in s.frame_ids:
            rle = encode_rle(s.gt_mask(i, f))
            rows.append(MotsResultLine(f, class_id * 1000 + i + 1, class_id, rle.height, rle.width, rle.counts))
    return rows


def export(s: Scenario, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write detections per source, embeddings, flows, labels and a pipeline config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    det_paths = []
    for src, dets in s.detections_by_source().items():
        p = out / f"detections_src{src}.txt"
        write_detections(p, dets)
        det_paths.append(p)
    paths["embeddings"] = out / "embeddings.bin"
    write_embeddings(paths["embeddings"], s.embeddings)
    flow_dir = out / "flows"
    for f, flow in s.flows.items():
        write_flow(flow_dir / flow_filename(f), flow)
    paths["flows"] = flow_dir
    paths["gt_labels"] = out / "gt_labels.txt"
    write_gt_labels(paths["gt_labels"], s.labels)
    paths["gt_tracks"] = out / "gt_tracks.txt"
    write_mots(paths["gt_tracks"], gt_tracks(s))
    paths["scenario"] = out / "scenario.json"
    meta = {"config": asdict(s.config), "occlusions": [asdict(e) for e in s.occlusions]}
    atomic_write_text(paths["scenario"], json.dumps(meta, indent=2, sort_keys=True) + "\n")
    paths["pipeline"] = out / "pipeline.json"
    pipeline_cfg = {
        "output_dir": "result",
        "seed": s.config.seed,
        "videos": [
            {
                "name": "synth",
                "detections": [p.name for p in det_paths],
                "embeddings": paths["embeddings"].name,
                "flows": "flows",
                "gt_labels": paths["gt_labels"].name,
            }
        ],
    }
    atomic_write_text(paths["pipeline"], json.dumps(pipeline_cfg, indent=2) + "\n")
    for i, p in enumerate(det_paths):
        paths[f"detections_src{i}"] = p
    return paths
