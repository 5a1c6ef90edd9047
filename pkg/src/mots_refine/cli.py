"""Command line entry point: ``mots-refine <subcommand>``.

Exit codes: 0 success, 2 validation error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from pydantic import ValidationError

from . import __version__
from .config import load_config
from .evaluate import evaluate_association
from .features import (
    DEFAULT_THETA_T,
    FALLBACK_THETA_LONG,
    FALLBACK_THETA_SHORT,
    MIN_SAMPLES,
    EstimationError,
    collect_intra_frame_similarities,
    collect_intra_tracklet_similarities,
    estimate_theta_long,
    estimate_theta_short,
)
from .formats import (
    FlowDirectory,
    FormatError,
    MotsResultLine,
    atomic_write_text,
    format_assignments,
    format_mots,
    read_assignments,
    read_detections,
    read_embeddings,
    read_gt_labels,
    read_tracklets,
    write_detections,
    write_tracklets,
)
from .fusion import FusionConfig, fuse
from .masks import RleDecodeError, encode_rle
from .merger import build_long_matrix, cluster, relabel
from .pipeline import StageError, run_pipeline
from .short_tracker import Observation, track_video
from .synth import ScenarioConfig, export, generate
from .triplets import (
    SamplingError,
    format_manifest,
    sample_inter_tracklet,
    sample_intra_frame,
)

logger = logging.getLogger("mots_refine")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3


def _frames_of(detections):
    frames: dict[int, list] = {}
    for d in detections:
        frames.setdefault(d.frame_id, []).append((d.frame_id, d.object_key))
    return frames


def _load_thresholds(args) -> dict:
    data = json.loads(Path(args.thresholds).read_text()) if getattr(args, "thresholds", None) else {}
    return data


def cmd_synth(args) -> int:
    overrides = json.loads(Path(args.scenario).read_text()) if args.scenario else {}
    names = {f.name for f in fields(ScenarioConfig)}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    overrides["seed"] = args.seed
    scenario = generate(ScenarioConfig(**overrides))
    paths = export(scenario, args.out)
    print(f"wrote scenario to {args.out} ({len(scenario.detections)} detections)")
    logger.info("pipeline config: %s", paths["pipeline"])
    return EXIT_OK


def cmd_fuse(args) -> int:
    dets = []
    for src, p in enumerate(args.detections):
        dets.extend(read_detections(p, source_id=src))
    fused = fuse(dets, FusionConfig(args.iom_threshold))
    write_detections(args.out, fused)
    print(f"fused {len(dets)} detections into {len(fused)}")
    return EXIT_OK


def cmd_thresholds(args) -> int:
    dets = read_detections(args.detections)
    store = read_embeddings(args.embeddings)
    neg = collect_intra_frame_similarities(_frames_of(dets), store)
    report: dict = {"theta_t": args.theta_t, "intra_frame_samples": len(neg)}
    try:
        report["theta_app_short"] = estimate_theta_short(neg, args.min_samples)
        report["theta_app_short_source"] = "estimated"
    except EstimationError as exc:
        logger.warning("theta_short fallback %.3f: %s", args.fallback_short, exc)
        report["theta_app_short"] = args.fallback_short
        report["theta_app_short_source"] = "fallback"
    if args.tracklets:
        long_store = read_embeddings(args.long_embeddings) if args.long_embeddings else store
        if args.long_embeddings:
            neg = collect_intra_frame_similarities(_frames_of(dets), long_store)
        pos = collect_intra_tracklet_similarities([t.observations for t in read_tracklets(args.tracklets)], long_store)
        report["intra_tracklet_samples"] = len(pos)
        try:
            report["theta_app_long"] = estimate_theta_long(neg, pos, args.min_samples, args.method)
            report["theta_app_long_source"] = "estimated"
        except EstimationError as exc:
            logger.warning("theta_long fallback %.3f: %s", args.fallback_long, exc)
            report["theta_app_long"] = args.fallback_long
            report["theta_app_long_source"] = "fallback"
    atomic_write_text(args.out, json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    return EXIT_OK


def cmd_track(args) -> int:
    theta = args.theta_short
    if theta is None:
        if not args.thresholds:
            raise ValueError("need --thresholds or --theta-short")
        theta = _load_thresholds(args)["theta_app_short"]
    dets = read_detections(args.detections)
    store = read_embeddings(args.embeddings)
    by_frame: dict[int, list[Observation]] = {}
    for d in dets:
        by_frame.setdefault(d.frame_id, []).append(Observation(d.frame_id, d.object_key, d.mask, d.score))
    frames = [(f, sorted(by_frame[f], key=lambda o: o.object_key)) for f in sorted(by_frame)]
    tracklets = track_video(
        frames, FlowDirectory(args.flows), theta, store, args.video_id,
        identity_flow_fallback=args.identity_flow,
    )
    write_tracklets(args.out, tracklets)
    print(f"{len(tracklets)} tracklets")
    return EXIT_OK


def cmd_triplets(args) -> int:
    if args.mode == "intra":
        if not args.detections:
            raise ValueError("--mode intra needs --detections")
        train = None
        if args.train_gt:
            train = {}
            for g in read_gt_labels(args.train_gt):
                if not g.is_false_positive:
                    train.setdefault(g.identity_id, []).append((g.frame_id, g.object_key))
        triplets = sample_intra_frame(
            _frames_of(read_detections(args.detections)), train, args.count, args.seed, args.video_id
        )
    else:
        if not args.tracklets:
            raise ValueError("--mode inter needs --tracklets")
        triplets = sample_inter_tracklet(read_tracklets(args.tracklets), args.count, args.seed, args.max_retries)
    atomic_write_text(args.out, format_manifest(triplets, args.seed, {"mode": args.mode}))
    print(f"wrote {len(triplets)} triplets")
    return EXIT_OK


def cmd_merge(args) -> int:
    th = _load_thresholds(args)
    theta_long = args.theta_long if args.theta_long is not None else th.get("theta_app_long")
    if theta_long is None:
        raise ValueError("need --theta-long or a thresholds file with theta_app_long")
    theta_t = args.theta_t if args.theta_t is not None else th.get("theta_t", DEFAULT_THETA_T)
    tracklets = read_tracklets(args.tracklets)
    store = read_embeddings(args.embeddings)
    log = []
    matrix = build_long_matrix(tracklets, theta_t, store)
    clusters = cluster(matrix, tracklets, 1.0 - theta_long, theta_t, store, args.normalize_centroids, log)
    tracks = relabel(tracklets, clusters, args.class_id)
    out = Path(args.out)
    assignments = {key: t.track_id for t in tracks for key in t.observations}
    atomic_write_text(out / "assignments.txt", format_assignments(assignments))
    atomic_write_text(out / "merge_log.txt", "".join(s.format() + "\n" for s in log))
    if args.detections:
        by_key = {(d.frame_id, d.object_key): d for d in read_detections(args.detections)}
        rows = []
        for (f, k), tid in assignments.items():
            d = by_key[(f, k)]
            rle = encode_rle(d.mask)
            rows.append(MotsResultLine(f, tid, d.class_id, rle.height, rle.width, rle.counts))
        atomic_write_text(out / "result.txt", format_mots(rows))
    print(f"{len(tracklets)} tracklets -> {len(tracks)} tracks")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_association(read_assignments(args.assignments), read_gt_labels(args.gt_labels))
    text = json.dumps(report.as_dict(), indent=2)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    out = str(Path(args.out).resolve()) if args.out else None
    cfg = load_config(args.config, output_dir=out, seed=args.seed)
    results = run_pipeline(cfg)
    for r in results:
        line = f"{r.name}: {len(r.tracklets)} tracklets -> {len(r.tracks)} tracks"
        if r.evaluation is not None:
            e = r.evaluation
            line += f"; idf1={e.identity_f1:.4f} switches={e.id_switches} violations={e.constraint_violations}"
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mots-refine", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate and export a synthetic scenario")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--scenario", help="JSON file of scenario settings")
    s.add_argument("--num-identities", dest="num_identities", type=int)
    s.add_argument("--num-frames", dest="num_frames", type=int)
    s.add_argument("--misdetection-rate", dest="misdetection_rate", type=float)
    s.add_argument("--occlusion-events", dest="occlusion_events", type=int)
    s.add_argument("--sigma-within", dest="sigma_within", type=float)
    s.add_argument("--sigma-between", dest="sigma_between", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fuse", help="IoM NMS and overlap resolution across sources")
    s.add_argument("--detections", nargs="+", required=True, help="one file per source")
    s.add_argument("--iom-threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("thresholds", help="estimate appearance thresholds")
    s.add_argument("--detections", required=True, help="fused detections")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--tracklets", help="short-term tracklets; enables theta_long")
    s.add_argument("--long-embeddings")
    s.add_argument("--method", choices=["gaussian", "otsu"], default="gaussian")
    s.add_argument("--min-samples", type=int, default=MIN_SAMPLES)
    s.add_argument("--fallback-short", type=float, default=FALLBACK_THETA_SHORT)
    s.add_argument("--fallback-long", type=float, default=FALLBACK_THETA_LONG)
    s.add_argument("--theta-t", type=int, default=DEFAULT_THETA_T)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_thresholds)

    s = sub.add_parser("track", help="short-term two-frame tracking")
    s.add_argument("--detections", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--flows")
    s.add_argument("--identity-flow", action="store_true", help="use zero flow where a flow file is missing")
    s.add_argument("--thresholds")
    s.add_argument("--theta-short", type=float)
    s.add_argument("--video-id", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("triplets", help="emit a triplet manifest")
    s.add_argument("--mode", choices=["intra", "inter"], required=True)
    s.add_argument("--detections")
    s.add_argument("--train-gt")
    s.add_argument("--tracklets")
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--max-retries", type=int, default=1000)
    s.add_argument("--video-id", type=int, default=0)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_triplets)

    s = sub.add_parser("merge", help="merge tracklets into long-term tracks")
    s.add_argument("--tracklets", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--detections", help="fused detections, to write a MOTS result")
    s.add_argument("--thresholds")
    s.add_argument("--theta-long", type=float)
    s.add_argument("--theta-t", type=int)
    s.add_argument("--class-id", type=int, default=2)
    s.add_argument("--normalize-centroids", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("eval", help="association metrics against ground-truth labels")
    s.add_argument("--assignments", required=True)
    s.add_argument("--gt-labels", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", help="run every stage from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        # input problems surface as a load-stage failure; report them as validation errors
        print(f"error: {exc}", file=sys.stderr)
        invalid = exc.stage == "load" and isinstance(exc.cause, (ValueError, KeyError, OSError))
        return EXIT_VALIDATION if invalid else EXIT_STAGE
    except (SamplingError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValidationError, FormatError, RleDecodeError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
