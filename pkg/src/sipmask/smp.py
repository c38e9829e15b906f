"""Spatial mask prediction: basis masks x per-sub-region coefficients -> instance masks.

For detection ``j`` and sub-region ``i`` the region map is
``sigmoid(B @ c_ij)``; each map is zeroed outside its own cell of the box and
the k^2 pruned maps are summed. Because the cells are disjoint, the sum at a
pixel is just the one sigmoid of the cell that contains it, which is how the
batched path evaluates it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Box, cell_pixel_ranges, prune_support, subregion_grid, subregion_index_map, subregion_index_window

DEFAULT_THRESHOLD = 0.5


@dataclass
class InstanceMask:
    soft: np.ndarray
    binary: np.ndarray
    box: Box
    score: float
    class_id: int


def assemble_region_maps(basis: torch.Tensor, coeffs: torch.Tensor) -> torch.Tensor:
    """``sigmoid(B x C_i)`` for ``B[h, w, m]`` and ``C_i[m, p]``; returns ``[h, w, p]``."""
    h, w, m = basis.shape
    if coeffs.shape[0] != m:
        raise ValueError(f"basis has {m} channels but coefficients have {coeffs.shape[0]} rows")
    return torch.sigmoid(basis.reshape(h * w, m) @ coeffs).reshape(h, w, coeffs.shape[1])


def assemble_instance(box: Box, region_maps, k: int):
    """Sum of each region map pruned to its own cell of ``box``."""
    if len(region_maps) != k * k:
        raise ValueError(f"expected {k * k} region maps, got {len(region_maps)}")
    grid = subregion_grid(box, k)
    total = prune_support(region_maps[0], grid.regions[0])
    for region, m in zip(grid.regions[1:], region_maps[1:]):
        total = total + prune_support(m, region)
    return total


def binarize(soft, tau: float = DEFAULT_THRESHOLD):
    if isinstance(soft, torch.Tensor):
        return (soft >= tau).to(torch.uint8)
    return (np.asarray(soft) >= tau).astype(np.uint8)


def box_window(box, h: int, w: int) -> tuple[int, int, int, int]:
    """Pixel window ``(r0, r1, c0, c1)`` covering every pixel whose centre is in ``box``.

    Padded by one pixel; membership itself is decided by the exact centre rule.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    r0 = min(max(math.floor(y1 - 0.5) - 1, 0), h)
    r1 = min(max(math.ceil(y2 - 0.5) + 1, r0), h)
    c0 = min(max(math.floor(x1 - 0.5) - 1, 0), w)
    c1 = min(max(math.ceil(x2 - 0.5) + 1, c0), w)
    return r0, r1, c0, c1


def cell_logits(basis: torch.Tensor, rows: tuple[int, int], cols: tuple[int, int],
                coeff: torch.Tensor) -> torch.Tensor:
    """``B[rows, cols] @ coeff`` over one rectangular cell -> ``[n_rows, n_cols]``."""
    return basis[rows[0]:rows[1], cols[0]:cols[1]] @ coeff


def assemble_masks(basis: torch.Tensor, coeffs: torch.Tensor, boxes, k: int) -> torch.Tensor:
    """Soft instance maps ``[p, h, w]`` for ``coeffs[p, k*k, m]`` and ``boxes[p, 4]``.

    Every cell of a box is a pixel rectangle, so each cell costs one
    matrix-vector product written straight into the output. Pixels outside
    the box are never evaluated and stay exactly 0.
    """
    h, w, m = basis.shape
    p = coeffs.shape[0]
    if coeffs.dim() != 3 or coeffs.shape[1:] != (k * k, m):
        raise ValueError(f"coefficients {tuple(coeffs.shape)} do not match k={k}, m={m}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] != p:
        raise ValueError(f"{p} coefficient sets but {boxes.shape[0]} boxes")
    out = basis.new_zeros((p, h, w))
    for j, (x1, y1, x2, y2) in enumerate(boxes.tolist()):
        for a, rows in enumerate(cell_pixel_ranges(y1, y2, k, h)):
            for b, cols in enumerate(cell_pixel_ranges(x1, x2, k, w)):
                if rows[1] > rows[0] and cols[1] > cols[0]:
                    out[j, rows[0]:rows[1], cols[0]:cols[1]] = torch.sigmoid(
                        cell_logits(basis, rows, cols, coeffs[j, a * k + b]))
    return out


def box_mask_logits(basis: torch.Tensor, coeffs: torch.Tensor, box, k: int) -> tuple[torch.Tensor, np.ndarray]:
    """Logits at the pixels inside one box for several coefficient sets sharing that box.

    ``coeffs[q, k*k, m]`` -> ``(logits[q, n], pixels[n, 2])`` where ``pixels`` holds
    the (row, col) of the ``n`` pixels whose centres lie in ``box``. Differentiable;
    training uses it with every positive assigned to the same ground truth.
    """
    h, w, m = basis.shape
    r0, r1, c0, c1 = win = box_window(box, h, w)
    idx = subregion_index_window(box, k, win)
    rows, cols = np.nonzero(idx >= 0)
    cells = torch.from_numpy(idx[rows, cols])
    feats = basis[torch.from_numpy(rows + r0), torch.from_numpy(cols + c0)]  # [n, m]
    full = coeffs @ feats.T  # [q, k*k, n]
    logits = full[:, cells, torch.arange(len(rows))]
    return logits, np.stack([rows + r0, cols + c0], axis=1)


def assemble_mask_logits(basis: torch.Tensor, coeffs: torch.Tensor, boxes, k: int,
                         index: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Dense, differentiable variant over the whole basis.

    All ``k^2`` products ``C_i^T B^T`` run as one GEMM over every pixel, then
    each pixel keeps the logit of the cell that owns it.

    Returns ``(logits[p, h, w], inside[p, h, w])``; logits outside the box are 0.
    """
    h, w, m = basis.shape
    p = coeffs.shape[0]
    kk = k * k
    if coeffs.dim() != 3 or coeffs.shape[1:] != (kk, m):
        raise ValueError(f"coefficients {tuple(coeffs.shape)} do not match k={k}, m={m}")
    if index is None:
        index = torch.from_numpy(subregion_index_map(h, w, boxes, k))
    index = index.reshape(p, 1, h * w)
    inside = index >= 0
    logits_all = (coeffs.reshape(p * kk, m) @ basis.reshape(h * w, m).T).reshape(p, kk, h * w)
    picked = logits_all.gather(1, index.clamp(min=0))
    picked = picked * inside.to(picked.dtype)
    return picked.reshape(p, h, w), inside.reshape(p, h, w)


def assemble_masks_dense(basis: torch.Tensor, coeffs: torch.Tensor, boxes, k: int) -> torch.Tensor:
    if coeffs.shape[0] == 0:
        return basis.new_zeros((0, *basis.shape[:2]))
    logits, inside = assemble_mask_logits(basis, coeffs, boxes, k)
    return torch.sigmoid(logits) * inside.to(logits.dtype)


def single_coefficient_masks(basis: torch.Tensor, coeffs: torch.Tensor, boxes) -> torch.Tensor:
    """Baseline with one coefficient vector per box: ``sigmoid(B @ c_j)``, cropped to the box."""
    h, w, m = basis.shape
    p = coeffs.shape[0]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = basis.new_zeros((p, h, w))
    for j in range(p):
        box = Box(*boxes[j])
        (r0, r1), = cell_pixel_ranges(box.y1, box.y2, 1, h)
        (c0, c1), = cell_pixel_ranges(box.x1, box.x2, 1, w)
        full = basis.new_zeros((h, w))
        if r1 > r0 and c1 > c0:
            full[r0:r1, c0:c1] = torch.sigmoid(cell_logits(basis, (r0, r1), (c0, c1), coeffs[j].reshape(m)))
        out[j] = prune_support(full, box)
    return out


def smp_oracle(basis, coeffs, boxes, k: int, tau: float = DEFAULT_THRESHOLD):
    """Scalar reference: explicit loops over detections, pixels and basis channels.

    Returns ``(soft, binary)`` lists of nested Python lists, one per detection.
    """
    basis = np.asarray(basis, dtype=np.float64).tolist()
    coeffs = np.asarray(coeffs, dtype=np.float64).tolist()
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).tolist()
    h = len(basis)
    w = len(basis[0]) if h else 0
    softs, binaries = [], []
    for c_j, (x1, y1, x2, y2) in zip(coeffs, boxes):
        xs = [x1 + (x2 - x1) * i / k for i in range(k + 1)]
        ys = [y1 + (y2 - y1) * i / k for i in range(k + 1)]
        xs[k], ys[k] = x2, y2
        soft = [[0.0] * w for _ in range(h)]
        binary = [[0] * w for _ in range(h)]
        for r in range(h):
            cy = r + 0.5
            row_cell = next((a for a in range(k) if ys[a] <= cy < ys[a + 1]), None)
            if row_cell is None:
                continue
            for c in range(w):
                cx = c + 0.5
                col_cell = next((a for a in range(k) if xs[a] <= cx < xs[a + 1]), None)
                if col_cell is None:
                    continue
                vec = c_j[row_cell * k + col_cell]
                z = 0.0
                for ch in range(len(vec)):
                    z += basis[r][c][ch] * vec[ch]
                val = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
                soft[r][c] = val
                binary[r][c] = 1 if val >= tau else 0
        softs.append(soft)
        binaries.append(binary)
    return softs, binaries
