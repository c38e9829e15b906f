"""Spatial preservation: box-driven feature alignment and per-sub-region coefficients.

The nine taps of the alignment kernel are moved onto a uniform 3x3 lattice
spanning the regressed box: corners on the box corners, centre on the box
centre. With location ``p0`` at image point ``((j + .5) s, (i + .5) s)`` the
lattice in grid units is ``p0 + (-l/s, (r-l)/2s, r/s)`` along x (likewise
t/b along y), so the per-tap offsets depend only on ``ltrb / stride``.
"""
from __future__ import annotations

import torch

from .numerics import deform_conv2d


def offsets_from_regression(ltrb: torch.Tensor, stride: float) -> torch.Tensor:
    """Map ``[..., 4]`` (l, t, r, b) distances in pixels to ``[..., 9, 2]`` (dy, dx) tap offsets."""
    l, t, r, b = (ltrb[..., i] / stride for i in range(4))
    # lattice minus the regular tap position, per axis: taps at -1, 0, +1
    dx = torch.stack([1 - l, (r - l) / 2, r - 1], dim=-1)
    dy = torch.stack([1 - t, (b - t) / 2, b - 1], dim=-1)
    dy9 = dy[..., :, None].expand(*dy.shape, 3)
    dx9 = dx[..., None, :].expand(*dx.shape[:-1], 3, 3)
    return torch.stack([dy9, dx9], dim=-1).reshape(*ltrb.shape[:-1], 9, 2)


def feature_align(feats: torch.Tensor, offsets: torch.Tensor, weight: torch.Tensor,
                  bias: torch.Tensor | None = None) -> torch.Tensor:
    """Deformable 3x3 conv of an ``H x W x Cin`` map with ``3 x 3 x Cin x Cout`` weights.

    ``offsets`` is ``H x W x 9 x 2``; the kernel is shared across locations.
    """
    if feats.dim() != 3 or offsets.shape[:2] != feats.shape[:2]:
        raise ValueError(f"feature map {tuple(feats.shape)} and offsets {tuple(offsets.shape)} disagree")
    out = deform_conv2d(feats.permute(2, 0, 1)[None], weight.permute(3, 2, 0, 1), offsets[None], bias)
    return out[0].permute(1, 2, 0)


def gather_coefficients(spatial_coeffs: torch.Tensor, location: tuple[int, int], k: int) -> torch.Tensor:
    """Split the ``k^2 * m`` channels at ``location`` into ``k^2`` row-major m-vectors."""
    h, w, ch = spatial_coeffs.shape
    y, x = location
    if not (0 <= y < h and 0 <= x < w):
        raise IndexError(f"location {location} outside {h}x{w} grid")
    if ch % (k * k):
        raise ValueError(f"{ch} channels is not a multiple of k^2={k * k}")
    return spatial_coeffs[y, x].reshape(k * k, ch // (k * k))


def scatter_coefficients(vectors: torch.Tensor, shape: tuple[int, int], location: tuple[int, int]) -> torch.Tensor:
    """Inverse of :func:`gather_coefficients` onto an otherwise zero map."""
    out = vectors.new_zeros((*shape, vectors.numel()))
    out[location[0], location[1]] = vectors.reshape(-1)
    return out
