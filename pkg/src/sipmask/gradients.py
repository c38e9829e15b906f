"""Registry of differentiable operations with small seeded fixtures for gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .config import Config
from .data.synthetic import gen_scene
from .heads import SipMaskNet
from .losses import focal_loss, iou_loss, mask_loss
from .numerics import (DeformableKernel, GradCheckReport, conv2d, deform_conv2d, deformable_conv, gather_bilinear,
                       grad_check, upsample)
from .smp import assemble_mask_logits, assemble_region_maps, box_mask_logits
from .sp_module import feature_align, offsets_from_regression
from .train import compute_losses, scene_targets

EPS = 1e-5
TOL = 1e-4


@dataclass
class GradCase:
    name: str
    build: Callable[[torch.Generator], tuple[Callable, list[torch.Tensor]]]
    max_elements: int | None = None


def _rand(gen, *shape, lo=-1.0, hi=1.0):
    return torch.rand(*shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo


def _weighted(gen, out_shape):
    # a fixed random projection turns any output into a scalar with all entries in play
    return _rand(gen, *out_shape)


def _conv2d(gen):
    x, w, b = _rand(gen, 6, 5, 3), _rand(gen, 3, 3, 3, 2), _rand(gen, 2)
    proj = _weighted(gen, (6, 5, 2))
    return (lambda x, w, b: (conv2d(x, w, bias=b) * proj).sum()), [x, w, b]


def _points(gen, n, p, h, w):
    # keep samples off integer coordinates, where bilinear weights have kinks
    ys = torch.floor(_rand(gen, n, p, lo=-1, hi=h)) + _rand(gen, n, p, lo=0.1, hi=0.9)
    xs = torch.floor(_rand(gen, n, p, lo=-1, hi=w)) + _rand(gen, n, p, lo=0.1, hi=0.9)
    return ys, xs


def _gather_bilinear(gen):
    x = _rand(gen, 1, 2, 5, 6)
    ys, xs = _points(gen, 1, 7, 5, 6)
    proj = _weighted(gen, (1, 2, 7))
    return (lambda x, ys, xs: (gather_bilinear(x, ys, xs) * proj).sum()), [x, ys, xs]


def _alignment_point(gen):
    x = _rand(gen, 7, 7, 3)
    w = _rand(gen, 3, 3, 3)
    off = _rand(gen, 9, 2, lo=0.1, hi=0.9) * torch.where(_rand(gen, 9, 2) > 0, 1.0, -1.0)
    return (lambda x, w, off: deformable_conv(x, DeformableKernel(w, off), (3.0, 3.0))), [x, w, off]


def _deform_conv2d(gen):
    x = _rand(gen, 1, 2, 4, 5)
    w = _rand(gen, 3, 2, 3, 3)
    b = _rand(gen, 3)
    off = torch.floor(_rand(gen, 1, 4, 5, 9, 2, lo=-2, hi=2)) + _rand(gen, 1, 4, 5, 9, 2, lo=0.1, hi=0.9)
    proj = _weighted(gen, (1, 3, 4, 5))
    return (lambda x, w, b, off: (deform_conv2d(x, w, off, b) * proj).sum()), [x, w, b, off]


def _alignment_from_regression(gen):
    feats = _rand(gen, 4, 4, 2)
    w = _rand(gen, 3, 3, 2, 2)
    # near and far sides get different fractional parts so that every lattice
    # point, including the box centre, stays off integer coordinates
    whole = torch.floor(_rand(gen, 4, 4, 4, lo=0, hi=3))
    frac = torch.cat([_rand(gen, 4, 4, 2, lo=0.1, hi=0.2), _rand(gen, 4, 4, 2, lo=0.55, hi=0.65)], dim=-1)
    stride = 4.0
    ltrb = (whole + frac) * stride
    proj = _weighted(gen, (4, 4, 2))

    def fn(feats, w, ltrb):
        return (feature_align(feats, offsets_from_regression(ltrb, stride), w) * proj).sum()
    return fn, [feats, w, ltrb]


def _upsample(gen):
    x = _rand(gen, 1, 2, 3, 4)
    proj = _weighted(gen, (1, 2, 6, 8))
    return (lambda x: (upsample(x, 2) * proj).sum()), [x]


def _region_maps(gen):
    basis, coeffs = _rand(gen, 4, 5, 3), _rand(gen, 3, 2)
    proj = _weighted(gen, (4, 5, 2))
    return (lambda b, c: (assemble_region_maps(b, c) * proj).sum()), [basis, coeffs]


_BOXES = np.array([[0.7, 1.2, 5.1, 6.3], [2.2, 0.4, 6.9, 3.8]])


def _mask_assembly(gen):
    basis, coeffs = _rand(gen, 7, 7, 3), _rand(gen, 2, 4, 3)
    proj = _weighted(gen, (2, 7, 7))

    def fn(b, c):
        logits, inside = assemble_mask_logits(b, c, _BOXES, 2)
        return (torch.sigmoid(logits) * inside * proj).sum()
    return fn, [basis, coeffs]


def _box_mask_logits(gen):
    basis, coeffs = _rand(gen, 7, 7, 3), _rand(gen, 3, 4, 3)
    proj = _weighted(gen, (3, 100))

    def fn(b, c):
        logits, _ = box_mask_logits(b, c, _BOXES[0], 2)
        return (logits * proj[:, :logits.shape[1]]).sum()
    return fn, [basis, coeffs]


def _focal(gen):
    logits = _rand(gen, 6, 3, lo=-3, hi=3)
    targets = (_rand(gen, 6, 3) > 0.5).to(torch.float64)
    return (lambda z: focal_loss(z, targets)), [logits]


def _iou(gen):
    gt = _rand(gen, 5, 4, lo=1, hi=4)
    pred = gt + _rand(gen, 5, 4, lo=0.2, hi=0.8) * torch.where(_rand(gen, 5, 4) > 0, 1.0, -1.0)
    return (lambda p: iou_loss(p, gt)), [pred]


def _weighted_mask_bce(gen):
    soft = _rand(gen, 2, 5, 5, lo=0.05, hi=0.95)
    gt = (_rand(gen, 2, 5, 5) > 0).to(torch.float64)
    region = torch.zeros(2, 5, 5, dtype=torch.bool)
    region[0, 1:4, 1:5] = True
    region[1, 0:3, 0:2] = True
    weights = _rand(gen, 2, lo=0, hi=1)
    return (lambda s: mask_loss(s, gt, region, weights)), [soft]


def _micro_scene_loss(params: tuple[str, ...], mask_weighting: bool = False, feature_align: bool = True):
    """Total loss wrt a few parameters of a tiny float64 model.

    Only parameters whose influence never passes through a detached quantity
    are perturbed: the alignment offsets and the mask weights are constants to
    autograd, so finite differences through them would disagree by design.
    """
    def build(gen):
        cfg = Config().replace(model={"channels": 16, "m": 4, "tower_convs": 1, "feature_align": feature_align},
                               loss={"mask_weighting": mask_weighting})
        torch.manual_seed(int(torch.randint(0, 2 ** 31, (1,), generator=gen)))
        model = SipMaskNet(cfg.model).double()
        scene = gen_scene(7, n_shapes=2)
        image = torch.from_numpy(scene.image).double().permute(2, 0, 1)[None]
        named = dict(model.named_parameters())
        with torch.no_grad():
            out = model(image)
        tgt = scene_targets(scene, [tuple(t.shape[-2:]) for t in out.class_logits], out.strides,
                            cfg.loss.scale_windows)

        def fn(*values):
            overrides = dict(zip(params, values))
            out = torch.func.functional_call(model, {**named, **overrides}, (image,))
            return compute_losses(out, [tgt], cfg, torch.Generator().manual_seed(0), model.basis_stride).total
        return fn, [named[p].detach().clone() for p in params]
    return build


REGISTRY: list[GradCase] = [
    GradCase("conv2d", _conv2d),
    GradCase("bilinear_gather (input, points)", _gather_bilinear),
    GradCase("deformable_conv at a point (input, weights, offsets)", _alignment_point),
    GradCase("deform_conv2d (input, weight, bias, offsets)", _deform_conv2d),
    GradCase("feature_align via box offsets (feats, weight, ltrb)", _alignment_from_regression),
    GradCase("upsample x2", _upsample),
    GradCase("region maps sigmoid(B C)", _region_maps),
    GradCase("dense mask assembly", _mask_assembly),
    GradCase("box-grouped mask logits", _box_mask_logits),
    GradCase("focal loss", _focal),
    GradCase("IoU loss", _iou),
    GradCase("weighted mask BCE", _weighted_mask_bce),
    GradCase("total loss, 2-instance scene, heads",
             _micro_scene_loss(("cls_out.bias", "align_bias", "coeff_out.bias", "basis_conv.bias")), max_elements=8),
    GradCase("total loss, 2-instance scene, regression",
             _micro_scene_loss(("reg_out.bias", "level_scales"), feature_align=False), max_elements=8),
    GradCase("total loss, 2-instance scene, weighted masks",
             _micro_scene_loss(("coeff_out.bias", "basis_conv.bias"), mask_weighting=True), max_elements=8),
]


def run_all(seed: int = 0, eps: float = EPS, tol: float = TOL, cases=None) -> list[GradCheckReport]:
    reports = []
    for case in cases or REGISTRY:
        gen = torch.Generator().manual_seed(seed)
        fn, inputs = case.build(gen)
        reports.append(grad_check(fn, inputs, eps=eps, tol=tol, name=case.name, max_elements=case.max_elements,
                                  seed=seed))
    return reports
