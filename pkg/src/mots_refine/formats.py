"""Readers and writers for every on-disk format the toolkit uses.

Text formats (one record per line, space separated):

* MOTS results: ``frame_id track_id class_id img_height img_width rle``
* detections: ``frame_id object_key class_id score img_height img_width rle``
* tracklets: ``tracklet_id video_id frame_id object_key``
* ground-truth labels: ``frame_id object_key identity_id is_false_positive``
* assignments: ``frame_id object_key track_id``

Binary formats are little-endian: embeddings start with ``REMB``, flows with
``RFLW``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import EmbeddingStore
from .fusion import Detection
from .masks import FlowField, RleMask, decode_rle, encode_rle
from .short_tracker import Tracklet

EMBEDDING_MAGIC = b"REMB"
FLOW_MAGIC = b"RFLW"
FORMAT_VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.line = line


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _records(path: str | os.PathLike, n_fields: int) -> Iterable[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != n_fields:
                raise FormatError(f"expected {n_fields} fields, got {len(parts)}", path, lineno)
            yield lineno, parts


def _ints(parts: Sequence[str], path, lineno) -> list[int]:
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise FormatError(str(exc), path, lineno) from None


# -- MOTS results ---------------------------------------------------------


@dataclass(frozen=True)
class MotsResultLine:
    frame_id: int
    track_id: int
    class_id: int
    img_height: int
    img_width: int
    rle: str

    def format(self) -> str:
        return f"{self.frame_id} {self.track_id} {self.class_id} {self.img_height} {self.img_width} {self.rle}"

    def mask(self) -> np.ndarray:
        return decode_rle(RleMask(self.img_height, self.img_width, self.rle))


def sort_mots(lines: Iterable[MotsResultLine]) -> list[MotsResultLine]:
    out = sorted(lines, key=lambda r: (r.frame_id, r.track_id))
    seen = set()
    for r in out:
        k = (r.frame_id, r.track_id)
        if k in seen:
            raise FormatError(f"duplicate track {r.track_id} in frame {r.frame_id}")
        seen.add(k)
    return out


def read_mots(path: str | os.PathLike) -> list[MotsResultLine]:
    out = []
    seen: dict[tuple[int, int], int] = {}
    for lineno, parts in _records(path, 6):
        frame, tid, cls, h, w = _ints(parts[:5], path, lineno)
        if (frame, tid) in seen:
            raise FormatError(
                f"duplicate (frame {frame}, track {tid}), first on line {seen[(frame, tid)]}", path, lineno
            )
        seen[(frame, tid)] = lineno
        out.append(MotsResultLine(frame, tid, cls, h, w, parts[5]))
    return out


def format_mots(lines: Iterable[MotsResultLine]) -> str:
    return "".join(r.format() + "\n" for r in sort_mots(lines))


def write_mots(path: str | os.PathLike, lines: Iterable[MotsResultLine]) -> None:
    atomic_write_text(path, format_mots(lines))


# -- detections -----------------------------------------------------------


def format_detections(detections: Iterable[Detection]) -> str:
    rows = []
    for d in sorted(detections, key=lambda d: (d.frame_id, d.object_key)):
        rle = encode_rle(d.mask)
        rows.append(
            f"{d.frame_id} {d.object_key} {d.class_id} {d.score!r} {rle.height} {rle.width} {rle.counts}\n"
        )
    return "".join(rows)


def write_detections(path: str | os.PathLike, detections: Iterable[Detection]) -> None:
    atomic_write_text(path, format_detections(detections))


def read_detections(path: str | os.PathLike, source_id: int = 0) -> list[Detection]:
    out = []
    seen = set()
    for lineno, parts in _records(path, 7):
        frame, key, cls = _ints(parts[:3], path, lineno)
        h, w = _ints(parts[4:6], path, lineno)
        try:
            score = float(parts[3])
            mask = decode_rle(RleMask(h, w, parts[6]))
            det = Detection(frame, key, mask, score, source_id, cls)
        except ValueError as exc:
            raise FormatError(str(exc), path, lineno) from None
        if (frame, key) in seen:
            raise FormatError(f"duplicate object key {key} in frame {frame}", path, lineno)
        seen.add((frame, key))
        out.append(det)
    return out


# -- embeddings -----------------------------------------------------------

_EMB_HEADER = struct.Struct("<4sHIQ")


def encode_embeddings(store: EmbeddingStore) -> bytes:
    dim = store.dim if len(store) else 0
    rec = np.dtype([("frame", "<u4"), ("key", "<u4"), ("v", "<f4", (dim,))])
    arr = np.zeros(len(store), dtype=rec)
    if len(store):
        arr["frame"] = [k[0] for k in store.keys]
        arr["key"] = [k[1] for k in store.keys]
        arr["v"] = store.vectors
    return _EMB_HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, dim, len(store)) + arr.tobytes()


def decode_embeddings(data: bytes, path=None) -> EmbeddingStore:
    if len(data) < _EMB_HEADER.size:
        raise FormatError("embedding file shorter than its header", path)
    magic, version, dim, count = _EMB_HEADER.unpack_from(data)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported embedding format version {version}", path)
    rec = np.dtype([("frame", "<u4"), ("key", "<u4"), ("v", "<f4", (dim,))])
    body = data[_EMB_HEADER.size:]
    if len(body) != count * rec.itemsize:
        raise FormatError(f"expected {count} records of {rec.itemsize} bytes, got {len(body)} bytes", path)
    arr = np.frombuffer(body, dtype=rec)
    keys = list(zip(arr["frame"].tolist(), arr["key"].tolist()))
    vectors = arr["v"].astype(np.float64) if count else np.zeros((0, max(dim, 1)))
    return EmbeddingStore(keys, vectors)


def write_embeddings(path: str | os.PathLike, store: EmbeddingStore) -> None:
    atomic_write_bytes(path, encode_embeddings(store))


def write_embeddings_text(path: str | os.PathLike, store: EmbeddingStore) -> None:
    rows = []
    for (f, k), v in zip(store.keys, store.vectors.astype(np.float32)):
        rows.append(f"{f} {k} " + " ".join(repr(float(x)) for x in v) + "\n")
    atomic_write_text(path, "".join(rows))


def read_embeddings_text(path: str | os.PathLike) -> EmbeddingStore:
    keys, vecs = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) < 3:
                raise FormatError("need frame, key and at least one value", path, lineno)
            keys.append(tuple(_ints(parts[:2], path, lineno)))
            try:
                vecs.append([float(x) for x in parts[2:]])
            except ValueError as exc:
                raise FormatError(str(exc), path, lineno) from None
            if len(vecs[-1]) != len(vecs[0]):
                raise FormatError("inconsistent embedding dimension", path, lineno)
    return EmbeddingStore(keys, np.array(vecs) if vecs else np.zeros((0, 1)))


def read_embeddings(path: str | os.PathLike) -> EmbeddingStore:
    data = Path(path).read_bytes()
    if data[:4] == EMBEDDING_MAGIC:
        return decode_embeddings(data, path)
    return read_embeddings_text(path)


# -- flow -----------------------------------------------------------------

_FLOW_HEADER = struct.Struct("<4sHII")


def flow_filename(frame_id: int) -> str:
    return f"{frame_id:06d}_{frame_id + 1:06d}.flo"


def encode_flow(flow: FlowField) -> bytes:
    h, w = flow.shape
    pairs = np.empty((h, w, 2), dtype="<f4")
    pairs[..., 0] = flow.dx
    pairs[..., 1] = flow.dy
    return _FLOW_HEADER.pack(FLOW_MAGIC, FORMAT_VERSION, h, w) + pairs.tobytes()


def decode_flow(data: bytes, path=None) -> FlowField:
    if len(data) < _FLOW_HEADER.size:
        raise FormatError("flow file shorter than its header", path)
    magic, version, h, w = _FLOW_HEADER.unpack_from(data)
    if magic != FLOW_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported flow format version {version}", path)
    body = data[_FLOW_HEADER.size:]
    if len(body) != h * w * 8:
        raise FormatError(f"expected {h}x{w} flow vectors, got {len(body)} bytes", path)
    pairs = np.frombuffer(body, dtype="<f4").reshape(h, w, 2)
    return FlowField(pairs[..., 0].astype(np.float32), pairs[..., 1].astype(np.float32))


def write_flow(path: str | os.PathLike, flow: FlowField) -> None:
    atomic_write_bytes(path, encode_flow(flow))


def read_flow(path: str | os.PathLike) -> FlowField:
    return decode_flow(Path(path).read_bytes(), path)


class FlowDirectory:
    """Lazy ``frame_id -> FlowField`` lookup over a directory of flow files."""

    def __init__(self, root: str | os.PathLike | None):
        self.root = Path(root) if root is not None else None

    def __call__(self, frame_id: int) -> FlowField | None:
        if self.root is None:
            return None
        p = self.root / flow_filename(frame_id)
        return read_flow(p) if p.exists() else None


# -- tracklets, labels, assignments ---------------------------------------


def format_tracklets(tracklets: Iterable[Tracklet]) -> str:
    rows = []
    for t in sorted(tracklets, key=lambda t: (t.video_id, t.tracklet_id)):
        rows.extend(f"{t.tracklet_id} {t.video_id} {f} {k}\n" for f, k in t.observations)
    return "".join(rows)


def write_tracklets(path: str | os.PathLike, tracklets: Iterable[Tracklet]) -> None:
    atomic_write_text(path, format_tracklets(tracklets))


def read_tracklets(path: str | os.PathLike) -> list[Tracklet]:
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for lineno, parts in _records(path, 4):
        tid, vid, f, k = _ints(parts, path, lineno)
        groups.setdefault((vid, tid), []).append((f, k))
    out = []
    for (vid, tid), obs in sorted(groups.items()):
        try:
            out.append(Tracklet(tid, vid, sorted(obs)))
        except ValueError as exc:
            raise FormatError(str(exc), path) from None
    return out


@dataclass(frozen=True)
class GtLabel:
    frame_id: int
    object_key: int
    identity_id: int
    is_false_positive: bool


def format_gt_labels(labels: Iterable[GtLabel]) -> str:
    return "".join(
        f"{g.frame_id} {g.object_key} {g.identity_id} {int(g.is_false_positive)}\n"
        for g in sorted(labels, key=lambda g: (g.frame_id, g.object_key))
    )


def write_gt_labels(path: str | os.PathLike, labels: Iterable[GtLabel]) -> None:
    atomic_write_text(path, format_gt_labels(labels))


def read_gt_labels(path: str | os.PathLike) -> list[GtLabel]:
    out = []
    for lineno, parts in _records(path, 4):
        f, k, ident, fp = _ints(parts, path, lineno)
        if fp not in (0, 1):
            raise FormatError(f"is_false_positive must be 0 or 1, got {fp}", path, lineno)
        out.append(GtLabel(f, k, ident, bool(fp)))
    return out


def format_assignments(assignments: dict[tuple[int, int], int]) -> str:
    return "".join(f"{f} {k} {tid}\n" for (f, k), tid in sorted(assignments.items()))


def write_assignments(path: str | os.PathLike, assignments: dict[tuple[int, int], int]) -> None:
    atomic_write_text(path, format_assignments(assignments))


def read_assignments(path: str | os.PathLike) -> dict[tuple[int, int], int]:
    out = {}
    for lineno, parts in _records(path, 3):
        f, k, tid = _ints(parts, path, lineno)
        if (f, k) in out:
            raise FormatError(f"observation ({f}, {k}) assigned twice", path, lineno)
        out[(f, k)] = tid
    return out
