"""Boxes, (l, t, r, b) offset encoding, IoU, k x k sub-region grids and pruning.

Pixel membership rule: pixel ``(row, col)`` belongs to a region when its
centre ``(col + 0.5, row + 0.5)`` satisfies ``x1 <= cx < x2`` and
``y1 <= cy < y2``. Sub-region split coordinates are never rounded, so the
k x k cells of a box partition its pixels exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        """``(x, y)`` centre."""
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def scaled(self, factor: float) -> Box:
        return Box(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)


@dataclass(frozen=True)
class LTRBOffsets:
    l: float
    t: float
    r: float
    b: float


@dataclass(frozen=True)
class SubregionGrid:
    regions: tuple[Box, ...]
    k: int


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def box_iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``[N, 4]`` and ``[M, 4]`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def ltrb_decode(point: tuple[float, float], off: LTRBOffsets) -> Box:
    x, y = point
    return Box(x - off.l, y - off.t, x + off.r, y + off.b)


def ltrb_encode(box: Box, point: tuple[float, float]) -> LTRBOffsets:
    x, y = point
    return LTRBOffsets(x - box.x1, y - box.y1, box.x2 - x, box.y2 - y)


def decode_ltrb_tensor(points: torch.Tensor, ltrb: torch.Tensor) -> torch.Tensor:
    """Vectorised decode: ``points[..., (x, y)]`` and ``ltrb[..., 4]`` -> ``[..., (x1, y1, x2, y2)]``."""
    return torch.stack([points[..., 0] - ltrb[..., 0], points[..., 1] - ltrb[..., 1],
                        points[..., 0] + ltrb[..., 2], points[..., 1] + ltrb[..., 3]], dim=-1)


def split_points(lo: float, hi: float, k: int) -> list[float]:
    """``k + 1`` split coordinates from ``lo`` to ``hi``; the ends are exact."""
    return [lo] + [lo + (hi - lo) * i / k for i in range(1, k)] + [hi]


def subregion_grid(box: Box, k: int) -> SubregionGrid:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    xs = split_points(box.x1, box.x2, k)
    ys = split_points(box.y1, box.y2, k)
    regions = tuple(Box(xs[c], ys[r], xs[c + 1], ys[r + 1]) for r in range(k) for c in range(k))
    return SubregionGrid(regions=regions, k=k)


def region_mask(h: int, w: int, region: Box) -> np.ndarray:
    """Boolean ``h x w`` mask of pixels whose centres fall inside ``region``."""
    cy = np.arange(h, dtype=np.float64) + 0.5
    cx = np.arange(w, dtype=np.float64) + 0.5
    in_y = (cy >= region.y1) & (cy < region.y2)
    in_x = (cx >= region.x1) & (cx < region.x2)
    return in_y[:, None] & in_x[None, :]


def prune_support(values, region: Box):
    """Zero every entry of an ``h x w`` map whose pixel lies outside ``region``."""
    h, w = values.shape[:2]
    keep = region_mask(h, w, region)
    if isinstance(values, torch.Tensor):
        return values * torch.as_tensor(keep, device=values.device).to(values.dtype)
    return np.where(keep, values, np.zeros_like(values))


def split_array(lo: np.ndarray, hi: np.ndarray, k: int) -> np.ndarray:
    """Vectorised :func:`split_points`: ``[p]`` bounds -> ``[p, k + 1]`` splits."""
    out = np.empty((lo.shape[0], k + 1), dtype=np.float64)
    out[:, 0] = lo
    for i in range(1, k):
        out[:, i] = lo + (hi - lo) * i / k
    out[:, k] = hi
    return out


def subregion_index_map(h: int, w: int, boxes, k: int) -> np.ndarray:
    """For each box, label every pixel with its row-major sub-region index, or -1.

    Returns an int64 array ``[p, h, w]``. Uses the same split coordinates as
    :func:`subregion_grid`, so the labelling agrees with per-region pruning.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cy = np.arange(h, dtype=np.float64) + 0.5
    cx = np.arange(w, dtype=np.float64) + 0.5
    col, in_x = _axis_cells(cx, split_array(boxes[:, 0], boxes[:, 2], k))
    row, in_y = _axis_cells(cy, split_array(boxes[:, 1], boxes[:, 3], k))
    idx = row[:, :, None] * k + col[:, None, :]
    return np.where(in_y[:, :, None] & in_x[:, None, :], idx, -1)


def subregion_index_window(box, k: int, window: tuple[int, int, int, int]) -> np.ndarray:
    """:func:`subregion_index_map` for one box, restricted to pixel rows ``r0:r1``, cols ``c0:c1``."""
    r0, r1, c0, c1 = window
    box = np.asarray(box, dtype=np.float64).reshape(1, 4)
    cy = np.arange(r0, r1, dtype=np.float64) + 0.5
    cx = np.arange(c0, c1, dtype=np.float64) + 0.5
    col, in_x = _axis_cells(cx, split_array(box[:, 0], box[:, 2], k))
    row, in_y = _axis_cells(cy, split_array(box[:, 1], box[:, 3], k))
    return np.where(in_y[0, :, None] & in_x[0, None, :], row[0, :, None] * k + col[0, None, :], -1)


def cell_pixel_ranges(lo: float, hi: float, k: int, n: int) -> list[tuple[int, int]]:
    """Pixel index ranges ``[a, b)`` of the k cells along one axis, clipped to ``[0, n)``.

    Pixel ``i`` belongs to cell ``c`` when ``s_c <= i + 0.5 < s_(c+1)``, i.e.
    ``ceil(s_c - 0.5) <= i < ceil(s_(c+1) - 0.5)``.
    """
    edges = [min(max(math.ceil(s - 0.5), 0), n) for s in split_points(lo, hi, k)]
    return list(zip(edges[:-1], edges[1:]))


def _axis_cells(centres: np.ndarray, splits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = splits.shape[1] - 1
    inside = (centres[None, :] >= splits[:, :1]) & (centres[None, :] < splits[:, k:])
    cell = np.zeros((splits.shape[0], centres.shape[0]), dtype=np.int64)
    for c in range(1, k):
        cell += centres[None, :] >= splits[:, c:c + 1]
    return cell, inside


def mask_to_box(mask: np.ndarray) -> Box | None:
    """Tight pixel-edge box of a binary mask, or None if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
