"""Mask AP with greedy score-ordered matching and 101-point interpolation, plus identity metrics."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.arange(101) / 100  # exact i/100, unlike linspace


@dataclass
class ImagePredictions:
    masks: np.ndarray  # [p, H, W] bool
    scores: np.ndarray  # [p]
    classes: np.ndarray  # [p]


@dataclass
class ImageGroundTruth:
    masks: np.ndarray  # [g, H, W] bool
    classes: np.ndarray  # [g]


@dataclass
class APReport:
    ap: float
    ap50: float
    ap75: float
    per_class: dict[int, float]
    per_threshold: dict[float, float]
    pr_curves: dict[tuple[int, float], list[float]] = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "pr_curves": {f"{c}@{t:.2f}": v for (c, t), v in self.pr_curves.items()},
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def mask_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two stacks of binary masks ``[p, H, W]`` and ``[g, H, W]``."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"mask resolution mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    fa = a.reshape(len(a), -1).astype(np.float64)
    fb = b.reshape(len(b), -1).astype(np.float64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def greedy_match(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Match score-sorted predictions (rows) to gts (cols); returns the gt index or -1 per row.

    Each prediction takes the unmatched gt of highest IoU at or above the
    threshold, ties going to the lower gt index.
    """
    matched = np.full(ious.shape[0], -1, dtype=np.int64)
    taken = np.zeros(ious.shape[1], dtype=bool)
    for d in range(ious.shape[0]):
        cand = np.where(taken, -1.0, ious[d])
        g = int(np.argmax(cand)) if cand.size else -1
        if g >= 0 and cand[g] >= threshold:
            matched[d] = g
            taken[g] = True
    return matched


def interpolated_precision(tp: np.ndarray, n_gt: int) -> np.ndarray:
    """101-point interpolated precision for a score-sorted true-positive sequence."""
    tp = np.asarray(tp, dtype=np.float64)
    out = np.zeros(len(RECALL_POINTS))
    if n_gt == 0 or tp.size == 0:
        return out
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    ok = idx < len(recall)
    out[ok] = precision[idx[ok]]
    return out


def _class_pr(preds: Sequence[ImagePredictions], gts: Sequence[ImageGroundTruth], cls: int, threshold: float,
              iou_cache: dict) -> np.ndarray:
    scores, hits, n_gt = [], [], 0
    for i, (p, g) in enumerate(zip(preds, gts)):
        pi = np.flatnonzero(np.asarray(p.classes) == cls)
        gi = np.flatnonzero(np.asarray(g.classes) == cls)
        n_gt += len(gi)
        if len(pi) == 0:
            continue
        order = pi[np.argsort(-np.asarray(p.scores)[pi], kind="stable")]
        key = (i, cls)
        if key not in iou_cache:
            iou_cache[key] = mask_iou_matrix(p.masks[order], g.masks[gi]) if len(gi) else np.zeros((len(order), 0))
        matched = greedy_match(iou_cache[key], threshold)
        scores.append(np.asarray(p.scores)[order])
        hits.append(matched >= 0)
    if not scores:
        return interpolated_precision(np.zeros(0), n_gt)
    scores = np.concatenate(scores)
    hits = np.concatenate(hits)
    order = np.argsort(-scores, kind="stable")
    return interpolated_precision(hits[order], n_gt)


def mask_ap(preds: Sequence[ImagePredictions], gts: Sequence[ImageGroundTruth],
            iou_thresholds: Sequence[float] = IOU_THRESHOLDS) -> APReport:
    """COCO-style mask AP over a set of images.

    Detections of one class are pooled across images and ranked by score
    (stable in image then detection order); matching happens per image.
    Only classes with at least one ground-truth instance are averaged.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} images")
    for p, g in zip(preds, gts):
        if len(p.masks) and len(g.masks) and p.masks.shape[1:] != g.masks.shape[1:]:
            raise ValueError(f"mask resolution mismatch: {p.masks.shape[1:]} vs {g.masks.shape[1:]}")
    classes = sorted({int(c) for g in gts for c in np.asarray(g.classes)})
    thresholds = [float(t) for t in iou_thresholds]
    curves: dict[tuple[int, float], list[float]] = {}
    table = np.zeros((len(classes), len(thresholds)))
    cache: dict = {}
    for ci, cls in enumerate(classes):
        for ti, thr in enumerate(thresholds):
            prec = _class_pr(preds, gts, cls, thr, cache)
            curves[(cls, thr)] = prec.tolist()
            table[ci, ti] = prec.mean()
    if not classes:
        per_thr = {t: 0.0 for t in thresholds}
    else:
        per_thr = {t: float(table[:, ti].mean()) for ti, t in enumerate(thresholds)}

    def at(t: float) -> float:
        for thr, v in per_thr.items():
            if abs(thr - t) < 1e-9:
                return v
        return float("nan")

    return APReport(
        ap=float(np.mean(list(per_thr.values()))) if per_thr else 0.0,
        ap50=at(0.5),
        ap75=at(0.75),
        per_class={c: float(table[ci].mean()) for ci, c in enumerate(classes)},
        per_threshold=per_thr,
        pr_curves=curves,
    )


def match_frame(pred_masks, pred_ids, gt_masks, gt_ids, iou_thr: float = 0.5) -> dict:
    """Assign each gt instance the id of its best-overlapping prediction (one-to-one, greedy by IoU)."""
    result = {gid: None for gid in gt_ids}
    if len(pred_masks) == 0 or len(gt_masks) == 0:
        return result
    ious = mask_iou_matrix(np.asarray(pred_masks), np.asarray(gt_masks))
    pairs = sorted(((-ious[d, g], g, d) for d in range(ious.shape[0]) for g in range(ious.shape[1])
                    if ious[d, g] >= iou_thr))
    used_d, used_g = set(), set()
    for _, g, d in pairs:
        if d in used_d or g in used_g:
            continue
        used_d.add(d)
        used_g.add(g)
        result[gt_ids[g]] = pred_ids[d]
    return result


def identity_consistency(track_output: Sequence[Mapping], gt_video=None) -> float:
    """Fraction of (frame, gt instance) pairs carrying that instance's majority predicted id.

    ``track_output`` holds one mapping per frame from gt instance id to the
    predicted track id (``None`` when unmatched). An unmatched pair counts as
    inconsistent. When ``gt_video`` is given, only its instance ids are scored.
    """
    per_gt: dict = {}
    for frame in track_output:
        for gid, pid in frame.items():
            per_gt.setdefault(gid, []).append(pid)
    if gt_video is not None:
        wanted = {inst.instance_id for scene in gt_video for inst in scene.instances}
        per_gt = {g: v for g, v in per_gt.items() if g in wanted}
    total = sum(len(v) for v in per_gt.values())
    if total == 0:
        return 1.0
    good = 0
    for ids in per_gt.values():
        counts = Counter(i for i in ids if i is not None)
        if counts:
            good += counts.most_common(1)[0][1]
    return good / total
