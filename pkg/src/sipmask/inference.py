"""Inference: score filter -> per-class NMS -> top-n -> coefficient gather -> SMP -> binarize."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import Config
from .geometry import Box, box_iou_matrix
from .heads import HeadOutputs, SipMaskNet
from .smp import InstanceMask, assemble_masks, binarize, smp_oracle
from .targets import level_points


def nms(boxes, scores, classes=None, iou_thr: float = 0.5) -> np.ndarray:
    """Greedy per-class suppression; returns kept indices in descending score order.

    Ties in score keep the lower index first. A box is suppressed when its IoU
    with an already kept box of the same class exceeds ``iou_thr``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    classes = np.zeros(len(scores), dtype=np.int64) if classes is None else np.asarray(classes).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    ious = box_iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= (classes == classes[i]) & (ious[i] > iou_thr)
    return np.asarray(keep, dtype=np.int64)


def select_top(scores, n: int = 100) -> np.ndarray:
    """Indices of the ``n`` highest scores, non-increasing; ties by lower index."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    return np.argsort(-scores, kind="stable")[:n]


@dataclass
class Detections:
    boxes: np.ndarray  # [p, 4] image pixels
    scores: np.ndarray  # [p]
    classes: np.ndarray  # [p]
    coeffs: torch.Tensor  # [p, k*k, m]
    locations: np.ndarray  # [p, 3] (level, y, x)

    def __len__(self) -> int:
        return len(self.scores)

    def take(self, idx) -> Detections:
        idx = np.asarray(idx, dtype=np.int64)
        return Detections(self.boxes[idx], self.scores[idx], self.classes[idx],
                          self.coeffs[torch.from_numpy(idx)], self.locations[idx])


def decode_detections(out: HeadOutputs, index: int, cfg: Config, image_size: tuple[int, int]) -> Detections:
    """Candidate detections for one image of a batch, before NMS."""
    k, m = cfg.model.k, cfg.model.m
    boxes, scores, classes, coeffs, locs = [], [], [], [], []
    for level, (logit, ltrb, coef, stride) in enumerate(zip(out.class_logits, out.ltrb, out.coeffs, out.strides)):
        prob = torch.sigmoid(logit[index]).permute(1, 2, 0)  # [H, W, C]
        h, w, _ = prob.shape
        flat = prob.reshape(-1)
        cand = torch.nonzero(flat > cfg.infer.score_threshold).reshape(-1)
        if cand.numel() > cfg.infer.pre_nms_top_n:
            top = torch.argsort(flat[cand], descending=True, stable=True)[:cfg.infer.pre_nms_top_n]
            cand = cand[top]
        if cand.numel() == 0:
            continue
        cls = (cand % prob.shape[2]).numpy()
        cell = (cand // prob.shape[2]).numpy()
        ys, xs = cell // w, cell % w
        pts = level_points(h, w, stride)[ys, xs]
        d = ltrb[index].permute(1, 2, 0)[ys, xs].double().numpy()
        bx = np.stack([pts[:, 0] - d[:, 0], pts[:, 1] - d[:, 1], pts[:, 0] + d[:, 2], pts[:, 1] + d[:, 3]], axis=1)
        bx[:, 0::2] = bx[:, 0::2].clip(0, image_size[1])
        bx[:, 1::2] = bx[:, 1::2].clip(0, image_size[0])
        boxes.append(bx)
        scores.append(flat[cand].double().numpy())
        classes.append(cls)
        coeffs.append(coef[index].permute(1, 2, 0)[torch.from_numpy(ys), torch.from_numpy(xs)].reshape(-1, k * k, m))
        locs.append(np.stack([np.full_like(ys, level), ys, xs], axis=1))
    if not boxes:
        return Detections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64),
                          torch.zeros((0, k * k, m)), np.zeros((0, 3), dtype=np.int64))
    return Detections(np.concatenate(boxes), np.concatenate(scores), np.concatenate(classes).astype(np.int64),
                      torch.cat(coeffs), np.concatenate(locs))


def postprocess(out: HeadOutputs, index: int, cfg: Config, image_size: tuple[int, int],
                basis_stride: float, smp_path: str = "batched") -> list[InstanceMask]:
    dets = decode_detections(out, index, cfg, image_size)
    if len(dets) == 0:
        return []
    dets = dets.take(nms(dets.boxes, dets.scores, dets.classes, cfg.infer.nms_iou))
    dets = dets.take(select_top(dets.scores, cfg.infer.top_n))
    basis = out.basis[index].permute(1, 2, 0).double()
    basis_boxes = dets.boxes / basis_stride
    coeffs = dets.coeffs.double()
    tau = cfg.infer.mask_threshold
    if smp_path == "batched":
        soft = assemble_masks(basis, coeffs, basis_boxes, cfg.model.k).numpy()
        binary = binarize(soft, tau)
    elif smp_path == "oracle":
        s, b = smp_oracle(basis.numpy(), coeffs.numpy(), basis_boxes, cfg.model.k, tau)
        soft, binary = np.asarray(s), np.asarray(b, dtype=np.uint8)
    else:
        raise ValueError(f"unknown smp path {smp_path!r}")
    return [InstanceMask(soft=soft[j], binary=binary[j], box=Box(*dets.boxes[j]),
                         score=float(dets.scores[j]), class_id=int(dets.classes[j])) for j in range(len(dets))]


def _to_batch(images) -> torch.Tensor:
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(np.ascontiguousarray(images))
    if images.dim() == 3:
        images = images[None]
    return images.permute(0, 3, 1, 2).float()


@torch.no_grad()
def infer_batch(images, model: SipMaskNet, cfg: Config, smp_path: str = "batched") -> list[list[InstanceMask]]:
    """Run the full pipeline on ``[N, H, W, 3]`` images in [0, 1]."""
    model.eval()
    batch = _to_batch(images)
    out = model(batch)
    size = (batch.shape[2], batch.shape[3])
    return [postprocess(out, i, cfg, size, model.basis_stride, smp_path) for i in range(batch.shape[0])]


def infer(image, model: SipMaskNet, cfg: Config, smp_path: str = "batched") -> list[InstanceMask]:
    return infer_batch(image, model, cfg, smp_path)[0]


def masks_to_image_resolution(masks: list[InstanceMask], image_size: tuple[int, int]) -> list[np.ndarray]:
    """Binary masks at image resolution (nearest sampling when the basis is coarser)."""
    out = []
    for inst in masks:
        b = inst.binary
        if b.shape != image_size:
            ry = (np.arange(image_size[0]) + 0.5) * b.shape[0] / image_size[0]
            rx = (np.arange(image_size[1]) + 0.5) * b.shape[1] / image_size[1]
            b = b[np.floor(ry).astype(int)][:, np.floor(rx).astype(int)]
        out.append(b)
    return out


def predict_scenes(model: SipMaskNet, cfg: Config, scenes, batch_size: int = 32):
    """Run inference over scenes; returns ``(ImagePredictions, ImageGroundTruth)`` lists for mask_ap."""
    from .evaluation import ImageGroundTruth, ImagePredictions

    preds, gts = [], []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        results = infer_batch(np.stack([s.image for s in chunk]), model, cfg)
        for scene, masks in zip(chunk, results):
            size = scene.image.shape[:2]
            binaries = masks_to_image_resolution(masks, size)
            preds.append(ImagePredictions(
                masks=np.stack(binaries).astype(bool) if binaries else np.zeros((0, *size), dtype=bool),
                scores=np.array([mk.score for mk in masks], dtype=np.float64),
                classes=np.array([mk.class_id for mk in masks], dtype=np.int64)))
            gts.append(ImageGroundTruth(
                masks=np.stack([inst.mask for inst in scene.instances]).astype(bool) if scene.instances
                else np.zeros((0, *size), dtype=bool),
                classes=np.array([inst.class_id for inst in scene.instances], dtype=np.int64)))
    return preds, gts
