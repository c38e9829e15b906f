"""Training objective: focal classification, IoU regression, alignment-weighted mask BCE."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .numerics import NonFiniteError

MASK_EPS = 1e-6


@dataclass
class LossReport:
    l_cls: torch.Tensor
    l_reg: torch.Tensor
    l_mask: torch.Tensor
    n_pos: int

    @property
    def total(self) -> torch.Tensor:
        return self.l_cls + self.l_reg + self.l_mask

    def as_row(self) -> dict[str, float]:
        return {"l_cls": float(self.l_cls.detach()), "l_reg": float(self.l_reg.detach()),
                "l_mask": float(self.l_mask.detach()), "total": float(self.total.detach())}


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0,
               alpha: float = 0.25, normalizer: float | None = None) -> torch.Tensor:
    """Sigmoid focal loss summed over all entries and divided by the positive count.

    ``targets`` holds 0/1 per class per location. If ``normalizer`` is None the
    number of positive entries is used, floored at 1.
    """
    targets = targets.to(logits.dtype)
    if normalizer is None:
        normalizer = float(targets.sum())
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    loss = alpha_t * (1 - p_t) ** gamma * ce
    return loss.sum() / max(normalizer, 1.0)


def ltrb_iou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """IoU of two boxes given as (l, t, r, b) distances from a shared anchor point."""
    pred_area = (pred[:, 0] + pred[:, 2]) * (pred[:, 1] + pred[:, 3])
    gt_area = (gt[:, 0] + gt[:, 2]) * (gt[:, 1] + gt[:, 3])
    w_int = torch.minimum(pred[:, 0], gt[:, 0]) + torch.minimum(pred[:, 2], gt[:, 2])
    h_int = torch.minimum(pred[:, 1], gt[:, 1]) + torch.minimum(pred[:, 3], gt[:, 3])
    inter = w_int * h_int
    return inter / (pred_area + gt_area - inter)


def iou_loss(pred_ltrb: torch.Tensor, gt_ltrb: torch.Tensor) -> torch.Tensor:
    """Mean ``-ln IoU`` over positive samples."""
    if pred_ltrb.shape[0] == 0:
        return pred_ltrb.sum() * 0
    gt_area = (gt_ltrb[:, 0] + gt_ltrb[:, 2]) * (gt_ltrb[:, 1] + gt_ltrb[:, 3])
    if bool((gt_area <= 0).any()):
        raise ValueError("zero-area ground-truth box in IoU loss")
    return -torch.log(ltrb_iou(pred_ltrb, gt_ltrb)).mean()


def alignment_weight(overlap, score):
    """``alpha_j = o_j * s_j``, detached so the weight is never optimised."""
    if isinstance(overlap, torch.Tensor) or isinstance(score, torch.Tensor):
        return (torch.as_tensor(overlap) * torch.as_tensor(score)).detach()
    return overlap * score


def mask_loss(soft: torch.Tensor, gt: torch.Tensor, region: torch.Tensor,
              weights: torch.Tensor | None = None, normalizer: float | None = None) -> torch.Tensor:
    """Alignment-weighted BCE: ``(1/N) sum_j alpha_j * l_j``.

    Args:
        soft: ``[N, h, w]`` predicted probabilities.
        gt: ``[N, h, w]`` binary targets.
        region: ``[N, h, w]`` boolean support (the assigned ground-truth box);
            ``l_j`` is the BCE averaged over this support.
        weights: ``[N]`` alignment weights, or None for unweighted BCE.
    """
    n = soft.shape[0]
    if n == 0:
        return soft.sum() * 0
    region = region.to(soft.dtype)
    count = region.flatten(1).sum(1)
    if bool((count <= 0).any()):
        raise ValueError("empty ground-truth box in mask loss")
    p = soft.clamp(MASK_EPS, 1 - MASK_EPS)
    gt = gt.to(soft.dtype)
    bce = -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p))
    per_instance = (bce * region).flatten(1).sum(1) / count
    if weights is not None:
        per_instance = per_instance * weights.detach().to(soft.dtype)
    return per_instance.sum() / (normalizer if normalizer is not None else n)


def total_loss(l_cls: torch.Tensor, l_reg: torch.Tensor, l_mask: torch.Tensor, n_pos: int) -> LossReport:
    report = LossReport(l_cls=l_cls, l_reg=l_reg, l_mask=l_mask, n_pos=n_pos)
    for name in ("l_cls", "l_reg", "l_mask"):
        if not bool(torch.isfinite(getattr(report, name)).all()):
            raise NonFiniteError(f"{name} is not finite")
    return report
