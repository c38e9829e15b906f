"""Anchor-free target assignment over the pyramid grid.

A location is positive for a ground-truth box when its image point lies
strictly inside the box and ``max(l, t, r, b)`` falls in the level's
``(lo, hi]`` window. When several boxes qualify, the smallest one wins.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import DEFAULT_SCALE_WINDOWS

BACKGROUND = -1


@dataclass
class LevelTargets:
    labels: np.ndarray  # int64 [H, W], BACKGROUND or class id
    ltrb: np.ndarray  # float64 [H, W, 4]
    gt_index: np.ndarray  # int64 [H, W], -1 for background


@dataclass
class AssignmentResult:
    levels: list[LevelTargets]

    def flat(self) -> LevelTargets:
        """All levels concatenated in P3..P7, row-major order."""
        return LevelTargets(
            labels=np.concatenate([lv.labels.reshape(-1) for lv in self.levels]),
            ltrb=np.concatenate([lv.ltrb.reshape(-1, 4) for lv in self.levels]),
            gt_index=np.concatenate([lv.gt_index.reshape(-1) for lv in self.levels]),
        )

    @property
    def num_positive(self) -> int:
        return int(sum((lv.labels != BACKGROUND).sum() for lv in self.levels))


def level_points(h: int, w: int, stride: float) -> np.ndarray:
    """Image ``(x, y)`` of every grid cell centre, ``[H, W, 2]``."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
    return np.stack([xs, ys], axis=-1)


def assign_targets(gt_boxes, gt_classes, level_shapes: Sequence[tuple[int, int]], strides: Sequence[float],
                   scale_windows=DEFAULT_SCALE_WINDOWS) -> AssignmentResult:
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    levels = []
    for (h, w), stride, (lo, hi) in zip(level_shapes, strides, scale_windows):
        pts = level_points(h, w, stride)
        labels = np.full((h, w), BACKGROUND, dtype=np.int64)
        ltrb_t = np.zeros((h, w, 4), dtype=np.float64)
        gt_idx = np.full((h, w), -1, dtype=np.int64)
        if len(gt_boxes):
            x = pts[..., 0][..., None]
            y = pts[..., 1][..., None]
            ltrb = np.stack([x - gt_boxes[:, 0], y - gt_boxes[:, 1], gt_boxes[:, 2] - x, gt_boxes[:, 3] - y], axis=-1)
            inside = ltrb.min(axis=-1) > 0
            reach = ltrb.max(axis=-1)
            in_window = reach > lo
            if hi is not None:
                in_window &= reach <= hi
            ok = inside & in_window
            cand_area = np.where(ok, areas[None, None, :], np.inf)
            best = cand_area.argmin(axis=-1)  # first index among equal areas
            pos = np.isfinite(cand_area.min(axis=-1))
            labels[pos] = gt_classes[best[pos]]
            gt_idx[pos] = best[pos]
            ltrb_t[pos] = np.take_along_axis(ltrb, best[..., None, None], axis=2)[pos][:, 0]
        levels.append(LevelTargets(labels, ltrb_t, gt_idx))
    return AssignmentResult(levels)
