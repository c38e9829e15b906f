"""The SipMask network at toy scale.

A small strided backbone and FPN produce P3..P7. Each level goes through a
shared regression branch (box distances) and a shared classification branch
whose features are box-aligned before the class-score and spatial-coefficient
convs. The regression tower outputs at P3..P5 are fused into image-level
basis masks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .numerics import deform_conv2d, upsample
from .sp_module import offsets_from_regression

N_LEVELS = 5
MAX_LOG_DISTANCE = 10.0


@dataclass
class Pyramid:
    levels: list[torch.Tensor]  # [N, C, H_l, W_l], P3 first
    strides: list[int]


@dataclass
class HeadOutputs:
    class_logits: list[torch.Tensor]  # [N, C, H, W]
    ltrb: list[torch.Tensor]  # [N, 4, H, W], image pixels
    coeffs: list[torch.Tensor]  # [N, k*k*m, H, W]
    basis: torch.Tensor  # [N, m, h, w], pre-sigmoid
    strides: list[int]
    track_maps: torch.Tensor | None = None  # [N, d, H3, W3]


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(_conv(cin, cout, 2), nn.GroupNorm(8, cout), nn.ReLU(inplace=True),
                         _conv(cout, cout), nn.GroupNorm(8, cout), nn.ReLU(inplace=True))


def _tower(channels: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for _ in range(depth):
        layers += [_conv(channels, channels), nn.GroupNorm(8, channels), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class TinyBackboneFPN(nn.Module):
    """Stride-2 stem, three stride-2 blocks (C3..C5), top-down FPN, P6/P7 by strided convs."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.stem = nn.Sequential(_conv(3, 16, 2), nn.ReLU(inplace=True))
        self.c3 = _block(16, 32)
        self.c4 = _block(32, 64)
        self.c5 = _block(64, 64)
        self.lateral = nn.ModuleList([nn.Conv2d(c, channels, 1) for c in (32, 64, 64)])
        self.output = nn.ModuleList([_conv(channels, channels) for _ in range(3)])
        self.p6 = _conv(channels, channels, 2)
        self.p7 = _conv(channels, channels, 2)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        c3 = self.c3(self.stem(x))
        c4 = self.c4(c3)
        c5 = self.c5(c4)
        p5 = self.lateral[2](c5)
        p4 = self.lateral[1](c4) + F.interpolate(p5, size=c4.shape[-2:], mode="nearest")
        p3 = self.lateral[0](c3) + F.interpolate(p4, size=c3.shape[-2:], mode="nearest")
        p3, p4, p5 = (conv(p) for conv, p in zip(self.output, (p3, p4, p5)))
        p6 = self.p6(p5)
        p7 = self.p7(F.relu(p6))
        return [p3, p4, p5, p6, p7]


class SipMaskNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.channels
        self.strides = [cfg.base_stride * 2 ** i for i in range(N_LEVELS)]
        self.backbone = TinyBackboneFPN(c)

        self.reg_tower = _tower(c, cfg.tower_convs)
        self.reg_out = _conv(c, 4)
        self.level_scales = nn.Parameter(torch.ones(N_LEVELS))

        self.cls_tower = _tower(c, cfg.tower_convs)
        self.align_weight = nn.Parameter(torch.empty(c, c, 3, 3))
        self.align_bias = nn.Parameter(torch.zeros(c))
        self.cls_out = _conv(c, cfg.num_classes)
        self.coeff_out = _conv(c, cfg.k * cfg.k * cfg.m)

        n_basis_levels = 3 if cfg.multi_level_basis else 1
        self.basis_conv = _conv(c * n_basis_levels, cfg.m)

        self.track_head = None
        if cfg.with_tracking:
            from .tracking import TrackingHead
            self.track_head = TrackingHead(c, cfg.track_dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.kaiming_uniform_(self.align_weight, a=math.sqrt(5))
        for conv in (self.reg_out, self.cls_out, self.coeff_out):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)
        nn.init.constant_(self.cls_out.bias, -math.log((1 - self.cfg.prior_prob) / self.cfg.prior_prob))

    @property
    def basis_stride(self) -> float:
        """Image pixels per basis pixel (P3 upsampled four times)."""
        return self.strides[0] / 4

    def build_pyramid(self, images: torch.Tensor) -> Pyramid:
        h, w = images.shape[-2:]
        largest = self.strides[-1]
        if h % largest or w % largest:
            raise ValueError(f"image size {h}x{w} is not divisible by the largest stride {largest}")
        return Pyramid(levels=self.backbone(images), strides=list(self.strides))

    def regression_branch(self, feat: torch.Tensor, level: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(ltrb, tower_feats)``; ``ltrb = stride * exp(scale * raw)`` is positive."""
        tower = self.reg_tower(feat)
        raw = self.reg_out(tower) * self.level_scales[level]
        ltrb = torch.exp(raw.clamp(max=MAX_LOG_DISTANCE)) * self.strides[level]
        return ltrb, tower

    def classification_branch(self, feat: torch.Tensor, ltrb: torch.Tensor,
                              level: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Tower, box-driven alignment, then sibling class-score and coefficient convs."""
        tower = self.cls_tower(feat)
        if self.cfg.feature_align:
            offsets = offsets_from_regression(ltrb.detach().permute(0, 2, 3, 1), self.strides[level])
            aligned = deform_conv2d(tower, self.align_weight, offsets, self.align_bias)
        else:
            aligned = F.conv2d(tower, self.align_weight, self.align_bias, padding=1)
        aligned = F.relu(aligned)
        return self.cls_out(aligned), self.coeff_out(aligned)

    def contextual_basis_masks(self, p3: torch.Tensor, p4: torch.Tensor | None = None,
                               p5: torch.Tensor | None = None) -> torch.Tensor:
        """Upsample P4 (x2) and P5 (x4) to P3, concatenate, 3x3 conv to m, upsample x4."""
        feats = [p3]
        if self.cfg.multi_level_basis:
            feats += [upsample(p4, 2), upsample(p5, 4)]
            if any(f.shape[-2:] != p3.shape[-2:] for f in feats):
                raise ValueError("basis inputs do not share P3 resolution after upsampling")
        return upsample(self.basis_conv(torch.cat(feats, dim=1)), 4)

    def forward(self, images: torch.Tensor) -> HeadOutputs:
        pyramid = self.build_pyramid(images)
        logits, ltrbs, coeffs, towers = [], [], [], []
        for level, feat in enumerate(pyramid.levels):
            ltrb, tower = self.regression_branch(feat, level)
            cls, coef = self.classification_branch(feat, ltrb, level)
            logits.append(cls)
            ltrbs.append(ltrb)
            coeffs.append(coef)
            towers.append(tower)
        basis = self.contextual_basis_masks(*towers[:3])
        track_maps = self.track_head(pyramid.levels[:3]) if self.track_head is not None else None
        return HeadOutputs(class_logits=logits, ltrb=ltrbs, coeffs=coeffs, basis=basis,
                           strides=list(self.strides), track_maps=track_maps)
