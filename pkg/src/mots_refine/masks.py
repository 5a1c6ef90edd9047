"""Binary mask codec and pixel geometry.

Masks are dense ``(height, width)`` boolean numpy arrays. The compressed form
is the COCO run-length string used by MOTSChallenge text files: runs are taken
in column-major order starting with a (possibly empty) background run and
packed as 6-bit varint characters offset by 48.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BinaryMask = np.ndarray


class RleDecodeError(ValueError):
    """Raised for malformed run-length strings."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    counts: str

    @property
    def size(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement from one frame into the next."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ValueError(f"dx/dy shape mismatch: {self.dx.shape} vs {self.dy.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> FlowField:
        z = np.zeros((height, width), dtype=np.float32)
        return cls(z, z.copy())

    @classmethod
    def uniform(cls, height: int, width: int, dx: float, dy: float) -> FlowField:
        return cls(
            np.full((height, width), dx, dtype=np.float32),
            np.full((height, width), dy, dtype=np.float32),
        )


def mask_runs(mask: BinaryMask) -> list[int]:
    """Column-major run lengths, first run counting background pixels."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def runs_to_string(runs: list[int]) -> str:
    out = []
    for i, run in enumerate(runs):
        x = int(run)
        if i > 2:
            x -= int(runs[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = x != -1 if c & 0x10 else x != 0
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def string_to_runs(counts: str) -> list[int]:
    runs: list[int] = []
    p = 0
    n = len(counts)
    while p < n:
        start = p
        x = 0
        k = 0
        more = True
        while more:
            if p >= n:
                raise RleDecodeError("truncated varint", start)
            c = ord(counts[p]) - 48
            if c < 0 or c > 63:
                raise RleDecodeError(f"invalid character {counts[p]!r}", p)
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and c & 0x10:
                x |= -1 << (5 * k)
        if len(runs) > 2:
            x += runs[-2]
        if x < 0:
            raise RleDecodeError(f"negative run length {x}", start)
        runs.append(x)
    return runs


def encode_rle(mask: BinaryMask) -> RleMask:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    return RleMask(h, w, runs_to_string(mask_runs(mask)))


def decode_rle(rle: RleMask) -> BinaryMask:
    runs = string_to_runs(rle.counts)
    total = rle.height * rle.width
    if sum(runs) != total:
        raise RleDecodeError(
            f"runs sum to {sum(runs)}, expected {rle.height}x{rle.width}={total}",
            len(rle.counts),
        )
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, runs)
    return flat.reshape((rle.height, rle.width), order="F")


def rle_area(rle: RleMask) -> int:
    return sum(string_to_runs(rle.counts)[1::2])


def _check_shapes(a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask dimension mismatch: {a.shape} vs {b.shape}")


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 0.0 when both masks are empty."""
    _check_shapes(a, b)
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return inter / union


def iom(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over the smaller mask area.

    Catches containment (a small mask lying inside a large one) that IoU
    underrates. Undefined when both masks are empty.
    """
    _check_shapes(a, b)
    area_a = np.count_nonzero(a)
    area_b = np.count_nonzero(b)
    if area_a == 0 and area_b == 0:
        raise ValueError("iom is undefined for two empty masks")
    smaller = min(area_a, area_b)
    if smaller == 0:
        return 0.0
    return np.count_nonzero(a & b) / smaller


def warp_mask(mask: BinaryMask, flow: FlowField) -> BinaryMask:
    """Forward nearest-neighbour warp; pixels landing outside the frame are dropped."""
    if mask.shape != flow.shape:
        raise ValueError(f"mask {mask.shape} and flow {flow.shape} differ in size")
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    # round half up so the mapping does not depend on numpy's banker's rounding
    tx = np.floor(xs + flow.dx[ys, xs].astype(np.float64) + 0.5).astype(np.int64)
    ty = np.floor(ys + flow.dy[ys, xs].astype(np.float64) + 0.5).astype(np.int64)
    keep = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    out = np.zeros((h, w), dtype=bool)
    out[ty[keep], tx[keep]] = True
    return out
