"""End-to-end refinement: fuse, estimate thresholds, track, sample triplets, merge.

Each stage runs for every video before the next stage starts, so thresholds
can be estimated either per video (default) or pooled over all videos.
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import PipelineConfig
from .evaluate import AssociationReport, evaluate_association
from .features import (
    EmbeddingStore,
    EstimationError,
    SimilaritySampleSet,
    Thresholds,
    collect_intra_frame_similarities,
    collect_intra_tracklet_similarities,
    estimate_theta_long,
    estimate_theta_short,
    histogram,
)
from .formats import (
    FlowDirectory,
    MotsResultLine,
    atomic_write_text,
    format_assignments,
    format_detections,
    format_mots,
    format_tracklets,
    read_detections,
    read_embeddings,
    read_gt_labels,
)
from .fusion import Detection, FusionConfig, fuse
from .masks import FlowField, encode_rle
from .merger import FinalTrack, MergeStep, build_long_matrix, cluster, relabel
from .short_tracker import Observation, Tracklet, track_video
from .triplets import (
    SamplingError,
    TripletSample,
    format_manifest,
    plan_batches,
    sample_inter_tracklet,
    sample_intra_frame,
    sample_train_gt,
)

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class VideoInputs:
    """In-memory inputs of one video."""

    name: str
    detections: list[Detection]
    embeddings: EmbeddingStore
    flows: Mapping[int, FlowField] | Callable[[int], FlowField | None]
    embeddings_long: EmbeddingStore | None = None
    gt_labels: list | None = None
    train_gt: dict[int, list[tuple[int, int]]] | None = None


@dataclass
class ThresholdReport:
    value: float
    source: str
    samples: int
    note: str = ""


@dataclass
class VideoResult:
    name: str
    video_id: int
    fused: list[Detection] = field(default_factory=list)
    negatives: SimilaritySampleSet | None = None
    # intra-frame samples under the merging embeddings (same as negatives unless those differ)
    negatives_long: SimilaritySampleSet | None = None
    positives: SimilaritySampleSet | None = None
    theta_short: ThresholdReport | None = None
    theta_long: ThresholdReport | None = None
    theta_t: int = 15
    tracklets: list[Tracklet] = field(default_factory=list)
    intra_triplets: list[TripletSample] = field(default_factory=list)
    inter_triplets: list[TripletSample] = field(default_factory=list)
    batch_plan: object | None = None
    merge_log: list[MergeStep] = field(default_factory=list)
    tracks: list[FinalTrack] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    evaluation: AssociationReport | None = None

    @property
    def thresholds(self) -> Thresholds:
        return Thresholds(self.theta_short.value, self.theta_long.value, self.theta_t)

    def assignments(self) -> dict[tuple[int, int], int]:
        return {key: t.track_id for t in self.tracks for key in t.observations}

    def mots_lines(self) -> list[MotsResultLine]:
        by_key = {(d.frame_id, d.object_key): d for d in self.fused}
        rows = []
        for t in self.tracks:
            for key in t.observations:
                d = by_key[key]
                rle = encode_rle(d.mask)
                rows.append(MotsResultLine(d.frame_id, t.track_id, d.class_id, rle.height, rle.width, rle.counts))
        return rows


@contextmanager
def _stage(name: str, video: str, timings: dict[str, float]):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        dt = time.perf_counter() - t0
        timings[name] = timings.get(name, 0.0) + dt
        logger.info("[%s] %s took %.3fs", video, name, dt)


def _warn(result: VideoResult, message: str) -> None:
    logger.warning("[%s] %s", result.name, message)
    result.warnings.append(message)


def _frames(fused: Sequence[Detection]) -> dict[int, list[tuple[int, int]]]:
    frames: dict[int, list[tuple[int, int]]] = {}
    for d in fused:
        frames.setdefault(d.frame_id, []).append((d.frame_id, d.object_key))
    return frames


def _estimate_short(samples: SimilaritySampleSet, cfg: PipelineConfig) -> ThresholdReport:
    th = cfg.thresholds
    if th.theta_short is not None:
        return ThresholdReport(th.theta_short, "config", len(samples))
    try:
        return ThresholdReport(estimate_theta_short(samples, th.min_samples), "estimated", len(samples))
    except EstimationError as exc:
        return ThresholdReport(th.fallback_theta_short, "fallback", len(samples), str(exc))


def _estimate_long(neg: SimilaritySampleSet, pos: SimilaritySampleSet, cfg: PipelineConfig) -> ThresholdReport:
    th = cfg.thresholds
    n = len(neg) + len(pos)
    if th.theta_long is not None:
        return ThresholdReport(th.theta_long, "config", n)
    try:
        return ThresholdReport(estimate_theta_long(neg, pos, th.min_samples, th.long_method), "estimated", n)
    except EstimationError as exc:
        return ThresholdReport(th.fallback_theta_long, "fallback", n, str(exc))


def _pool(sets: Sequence[SimilaritySampleSet], kind: str) -> SimilaritySampleSet:
    vals = [s.values for s in sets if len(s)]
    return SimilaritySampleSet(np.concatenate(vals) if vals else np.zeros(0), kind)


def process(videos: Sequence[VideoInputs], cfg: PipelineConfig) -> list[VideoResult]:
    """Run every stage over in-memory inputs."""
    timings: dict[str, float] = {}
    results = [VideoResult(v.name, i, theta_t=cfg.thresholds.theta_t) for i, v in enumerate(videos)]
    seed_seq = np.random.SeedSequence(cfg.seed)
    video_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(max(len(videos), 1))]

    fusion_cfg = FusionConfig(cfg.fusion.iom_threshold)
    for v, r in zip(videos, results):
        with _stage("fuse", v.name, timings):
            r.fused = fuse(v.detections, fusion_cfg)
            missing = [(d.frame_id, d.object_key) for d in r.fused if (d.frame_id, d.object_key) not in v.embeddings]
            if missing:
                raise KeyError(f"{len(missing)} fused detections lack embeddings, e.g. {missing[0]}")

    for v, r in zip(videos, results):
        with _stage("intra_frame_stats", v.name, timings):
            r.negatives = collect_intra_frame_similarities(_frames(r.fused), v.embeddings)
    if cfg.thresholds.pooled:
        shared = _estimate_short(_pool([r.negatives for r in results], "intra_frame_negative"), cfg)
        for r in results:
            r.theta_short = shared
    else:
        for r in results:
            r.theta_short = _estimate_short(r.negatives, cfg)
    for r in results:
        if r.theta_short.source == "fallback":
            _warn(r, f"theta_short fell back to {r.theta_short.value}: {r.theta_short.note}")

    for v, r, seed in zip(videos, results, video_seeds):
        with _stage("intra_frame_triplets", v.name, timings):
            try:
                r.intra_triplets = sample_intra_frame(
                    _frames(r.fused), None, cfg.sampler.intra_count, seed, video_id=r.video_id
                )
            except SamplingError as exc:
                _warn(r, f"no intra-frame triplets: {exc}")
            if v.train_gt and r.intra_triplets:
                train = sample_train_gt(
                    v.train_gt, cfg.sampler.intra_count, np.random.default_rng(seed + 1), r.video_id
                )
                r.batch_plan = plan_batches(
                    train, r.intra_triplets, cfg.sampler.batch_size, seed + 2, cfg.sampler.with_replacement
                )
                r.intra_triplets = r.intra_triplets + train

    for v, r in zip(videos, results):
        with _stage("short_track", v.name, timings):
            by_frame: dict[int, list[Observation]] = {}
            for d in r.fused:
                by_frame.setdefault(d.frame_id, []).append(Observation(d.frame_id, d.object_key, d.mask, d.score))
            frames = [(f, sorted(by_frame[f], key=lambda o: o.object_key)) for f in sorted(by_frame)]
            r.tracklets = track_video(
                frames, v.flows, r.theta_short.value, v.embeddings, r.video_id,
                identity_flow_fallback=cfg.flags.identity_flow_fallback,
            )

    for v, r, seed in zip(videos, results, video_seeds):
        with _stage("inter_tracklet_triplets", v.name, timings):
            try:
                r.inter_triplets = sample_inter_tracklet(
                    r.tracklets, cfg.sampler.inter_count, seed + 3, cfg.sampler.max_retries
                )
            except SamplingError as exc:
                _warn(r, f"no inter-tracklet triplets: {exc}")

    for v, r in zip(videos, results):
        with _stage("long_stats", v.name, timings):
            store = v.embeddings_long or v.embeddings
            r.negatives_long = r.negatives
            if v.embeddings_long is not None:
                r.negatives_long = collect_intra_frame_similarities(_frames(r.fused), store)
            r.positives = collect_intra_tracklet_similarities([t.observations for t in r.tracklets], store)
    if cfg.thresholds.pooled:
        shared = _estimate_long(
            _pool([r.negatives_long for r in results], "intra_frame_negative"),
            _pool([r.positives for r in results], "intra_tracklet_positive"),
            cfg,
        )
        for r in results:
            r.theta_long = shared
    else:
        for r in results:
            r.theta_long = _estimate_long(r.negatives_long, r.positives, cfg)
    for r in results:
        if r.theta_long.source == "fallback":
            _warn(r, f"theta_long fell back to {r.theta_long.value}: {r.theta_long.note}")

    for v, r in zip(videos, results):
        with _stage("merge", v.name, timings):
            store = v.embeddings_long or v.embeddings
            matrix = build_long_matrix(r.tracklets, r.theta_t, store)
            clusters = cluster(
                matrix, r.tracklets, 1.0 - r.theta_long.value, r.theta_t, store,
                cfg.flags.normalize_centroids, r.merge_log,
            )
            r.tracks = relabel(r.tracklets, clusters, cfg.class_id)
            if v.gt_labels is not None:
                r.evaluation = evaluate_association(r.assignments(), v.gt_labels)
    return results


def _histogram_text(samples: SimilaritySampleSet, bins: int) -> str:
    edges, counts = histogram(samples, bins)
    return "# bin_low bin_high count\n" + "".join(
        f"{edges[i]:.6f} {edges[i + 1]:.6f} {int(c)}\n" for i, c in enumerate(counts)
    )


def text_chart(samples: SimilaritySampleSet, bins: int, threshold: float | None, title: str, width: int = 60) -> str:
    """A plain-text histogram with the threshold bin marked."""
    edges, counts = histogram(samples, bins)
    peak = max(int(counts.max()) if counts.size else 0, 1)
    lines = [f"{title} (n={len(samples)})"]
    for i, c in enumerate(counts):
        mark = " <- threshold" if threshold is not None and edges[i] <= threshold < edges[i + 1] else ""
        bar = "#" * int(round(width * int(c) / peak))
        lines.append(f"{edges[i]:+.2f} {int(c):7d} {bar}{mark}")
    return "\n".join(lines) + "\n"


def write_outputs(r: VideoResult, out_dir: Path, cfg: PipelineConfig) -> None:
    d = out_dir / r.name
    bins = cfg.thresholds.histogram_bins
    atomic_write_text(d / "fused_detections.txt", format_detections(r.fused))
    atomic_write_text(d / "tracklets.txt", format_tracklets(r.tracklets))
    report = {
        "theta_app_short": r.theta_short.value,
        "theta_app_short_source": r.theta_short.source,
        "theta_app_long": r.theta_long.value,
        "theta_app_long_source": r.theta_long.source,
        "theta_t": r.theta_t,
        "intra_frame_samples": len(r.negatives),
        "intra_tracklet_samples": len(r.positives),
        "warnings": r.warnings,
    }
    atomic_write_text(d / "thresholds.json", json.dumps(report, indent=2) + "\n")
    atomic_write_text(d / "hist_intra_frame.txt", _histogram_text(r.negatives, bins))
    atomic_write_text(d / "hist_intra_tracklet.txt", _histogram_text(r.positives, bins))
    atomic_write_text(
        d / "histograms_chart.txt",
        text_chart(r.negatives, bins, r.theta_short.value, "intra-frame similarity, theta_short")
        + "\n"
        + text_chart(r.negatives_long, bins, r.theta_long.value, "intra-frame similarity, theta_long")
        + "\n"
        + text_chart(r.positives, bins, r.theta_long.value, "intra-tracklet similarity, theta_long"),
    )
    seed = cfg.seed
    atomic_write_text(d / "manifest_intra.txt", format_manifest(r.intra_triplets, seed, {"video": r.name}))
    atomic_write_text(d / "manifest_inter.txt", format_manifest(r.inter_triplets, seed, {"video": r.name}))
    if r.batch_plan is not None:
        atomic_write_text(d / "batch_plan.txt", r.batch_plan.format())
    atomic_write_text(d / "merge_log.txt", "".join(s.format() + "\n" for s in r.merge_log))
    atomic_write_text(d / "result.txt", format_mots(r.mots_lines()))
    atomic_write_text(d / "assignments.txt", format_assignments(r.assignments()))
    if r.evaluation is not None:
        atomic_write_text(d / "eval.json", json.dumps(r.evaluation.as_dict(), indent=2) + "\n")


def load_video(cfg: PipelineConfig, video) -> VideoInputs:
    detections: list[Detection] = []
    for src, p in enumerate(video.detections):
        detections.extend(read_detections(cfg.resolve(p), source_id=src))
    keys = [(d.frame_id, d.object_key) for d in detections]
    if len(set(keys)) != len(keys):
        raise ValueError(f"video {video.name}: object keys collide across detection sources")
    store = read_embeddings(cfg.resolve(video.embeddings))
    long_store = read_embeddings(cfg.resolve(video.embeddings_long)) if video.embeddings_long else None
    gt = read_gt_labels(cfg.resolve(video.gt_labels)) if video.gt_labels else None
    train = None
    if video.train_gt_labels:
        train = {}
        for g in read_gt_labels(cfg.resolve(video.train_gt_labels)):
            if not g.is_false_positive:
                train.setdefault(g.identity_id, []).append((g.frame_id, g.object_key))
    return VideoInputs(
        video.name, detections, store, FlowDirectory(cfg.resolve(video.flows)), long_store, gt, train
    )


def run_pipeline(cfg: PipelineConfig) -> list[VideoResult]:
    videos = []
    for v in cfg.videos:
        try:
            videos.append(load_video(cfg, v))
        except Exception as exc:
            raise StageError("load", exc) from exc
    results = process(videos, cfg)
    out_dir = cfg.resolve(cfg.output_dir)
    for r in results:
        try:
            write_outputs(r, out_dir, cfg)
        except Exception as exc:
            raise StageError("write", exc) from exc
    return results
