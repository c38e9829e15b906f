"""Video extension: tracking feature maps, centre-point embeddings, cross-frame matching.

Match score between track ``t`` and detection ``d``::

    log_softmax_t(f_t . f_d) + l_iou * IoU(box_t, box_d) + l_cls * [cls_t == cls_d] + l_score * s_d

The softmax runs over the current tracks for each detection. Pairs are taken
greedily, best first; detections left unmatched open new tracks and tracks
left unmatched age until they are retired.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrackConfig
from .geometry import Box, iou
from .numerics import bilinear_sample, upsample


class TrackingHead(nn.Module):
    """Two 3x3 convs shared over P3..P5, upsampled to P3, summed, projected to ``dim``."""

    def __init__(self, channels: int, dim: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.project = nn.Conv2d(channels, dim, 1)

    def forward(self, levels: Sequence[torch.Tensor]) -> torch.Tensor:
        fused = None
        for i, feat in enumerate(levels):
            x = F.relu(self.conv2(F.relu(self.conv1(feat))))
            x = upsample(x, 2 ** i)
            fused = x if fused is None else fused + x
        return self.project(fused)


def extract_track_vector(track_maps: torch.Tensor, box: Box, stride: float) -> torch.Tensor:
    """Sample ``[h, w, d]`` tracking maps at the box centre (image px -> map coords)."""
    cx, cy = box.center
    return bilinear_sample(track_maps, (cy / stride - 0.5, cx / stride - 0.5))


@dataclass
class TrackState:
    track_id: int
    feature: np.ndarray
    last_box: Box
    class_id: int
    age: int = 0
    score: float = 0.0


@dataclass
class TrackedDetection:
    box: Box
    class_id: int
    score: float
    feature: np.ndarray
    mask: np.ndarray | None = None


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (track index, detection index) into the inputs
    track_ids: list[int]  # per detection
    tracks: list[TrackState]
    new_tracks: list[int] = field(default_factory=list)


def _normalise(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else v


def match_scores(tracks: Sequence[TrackState], dets: Sequence[TrackedDetection],
                 cfg: TrackConfig) -> np.ndarray:
    """``[T, D]`` score matrix; higher is better."""
    if not tracks or not dets:
        return np.zeros((len(tracks), len(dets)))
    tf = np.stack([_normalise(np.asarray(t.feature, dtype=np.float64)) for t in tracks])
    df = np.stack([_normalise(np.asarray(d.feature, dtype=np.float64)) for d in dets])
    affinity = tf @ df.T
    log_soft = affinity - np.logaddexp.reduce(affinity, axis=0, keepdims=True)
    geom = np.array([[cfg.lambda_iou * iou(t.last_box, d.box)
                      + cfg.lambda_class * float(t.class_id == d.class_id)
                      + cfg.lambda_score * d.score for d in dets] for t in tracks])
    return log_soft + geom


def match_instances(tracks: list[TrackState], dets: Sequence[TrackedDetection], cfg: TrackConfig,
                    next_id: int) -> tuple[MatchResult, int]:
    """Greedy best-first assignment; returns the result and the next free track id."""
    scores = match_scores(tracks, dets, cfg)
    order = sorted(((-scores[t, d], t, d) for t in range(len(tracks)) for d in range(len(dets))))
    used_t: set[int] = set()
    used_d: set[int] = set()
    pairs = []
    for neg, t, d in order:
        if -neg < cfg.new_track_threshold:
            break
        if t in used_t or d in used_d:
            continue
        used_t.add(t)
        used_d.add(d)
        pairs.append((t, d))

    updated = [TrackState(t.track_id, np.array(t.feature, dtype=np.float64), t.last_box, t.class_id, t.age, t.score)
               for t in tracks]
    track_ids = [-1] * len(dets)
    for t, d in pairs:
        tr, det = updated[t], dets[d]
        tr.feature = cfg.feature_momentum * tr.feature + (1 - cfg.feature_momentum) * np.asarray(det.feature)
        tr.last_box = det.box
        tr.class_id = det.class_id
        tr.score = det.score
        tr.age = 0
        track_ids[d] = tr.track_id
    for t in range(len(updated)):
        if t not in used_t:
            updated[t].age += 1
    survivors = [t for t in updated if t.age <= cfg.max_age]
    new_tracks = []
    for d, det in enumerate(dets):
        if d in used_d:
            continue
        survivors.append(TrackState(next_id, np.array(det.feature, dtype=np.float64), det.box, det.class_id, 0, det.score))
        track_ids[d] = next_id
        new_tracks.append(next_id)
        next_id += 1
    return MatchResult(pairs=pairs, track_ids=track_ids, tracks=survivors, new_tracks=new_tracks), next_id


class Tracker:
    """Holds per-video track state across frames."""

    def __init__(self, cfg: TrackConfig | None = None):
        self.cfg = cfg or TrackConfig()
        self.tracks: list[TrackState] = []
        self.next_id = 0
        self.frame = 0

    def update(self, dets: Sequence[TrackedDetection]) -> list[int]:
        result, self.next_id = match_instances(self.tracks, dets, self.cfg, self.next_id)
        self.tracks = result.tracks
        self.frame += 1
        return result.track_ids


def write_track_jsonl(fh: IO[str], frame: int, dets: Sequence[TrackedDetection], track_ids: Sequence[int],
                      mask_refs: Sequence[str | None] | None = None) -> None:
    """One JSON object per detection: frame, track_id, class, score, box, mask_ref."""
    for i, (det, tid) in enumerate(zip(dets, track_ids)):
        fh.write(json.dumps({
            "frame": frame,
            "track_id": int(tid),
            "class": int(det.class_id),
            "score": round(float(det.score), 6),
            "box": [float(v) for v in det.box.as_tuple()],
            "mask_ref": mask_refs[i] if mask_refs else None,
        }) + "\n")


def track_video(detections: Sequence[Sequence[TrackedDetection]], cfg: TrackConfig | None = None) -> list[list[int]]:
    """Run a fresh :class:`Tracker` over per-frame detections; returns per-frame track ids."""
    tracker = Tracker(cfg)
    return [tracker.update(dets) for dets in detections]


@torch.no_grad()
def video_track_maps(model: nn.Module, frames: np.ndarray) -> torch.Tensor:
    """Tracking maps ``[N, h, w, d]`` for ``[N, H, W, 3]`` frames from a model with a tracking head."""
    if getattr(model, "track_head", None) is None:
        raise ValueError("model has no tracking head")
    images = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2).float()
    levels = model.build_pyramid(images).levels
    return model.track_head(levels[:3]).permute(0, 2, 3, 1)


def ground_truth_detections(frames, track_maps: torch.Tensor, stride: float) -> list[list[TrackedDetection]]:
    """Detections taken straight from scene annotations, with features read off ``track_maps``."""
    out = []
    for scene, maps in zip(frames, track_maps):
        out.append([TrackedDetection(inst.box, inst.class_id, 1.0,
                                     extract_track_vector(maps.double(), inst.box, stride).numpy(), inst.mask)
                    for inst in scene.instances])
    return out
