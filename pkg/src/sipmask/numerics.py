"""Dense-array ops the model is built from.

Single-image ops take channel-last tensors (``H x W x C``); the batched
variants used inside the network take ``N x C x H x W``. All ops are torch
functions, so gradients come from autograd; :func:`grad_check` compares them
against central differences.

Sampling convention: pixel ``(i, j)`` sits at integer coordinate ``(y=i, x=j)``
and anything outside the grid reads as zero. Upsampling uses half-pixel
centres (``align_corners=False``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


# 3x3 tap grid in row-major order, (dy, dx)
TAPS_3X3 = torch.tensor([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=torch.float64)


def conv2d(x: torch.Tensor, weight: torch.Tensor, stride: int = 1,
           padding: int | None = None, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-correlate an ``H x W x Cin`` map with a ``Kh x Kw x Cin x Cout`` kernel.

    ``padding`` defaults to ``(K - 1) // 2`` so stride 1 preserves resolution.
    """
    if x.dim() != 3 or weight.dim() != 4:
        raise ValueError("conv2d expects x[H,W,Cin] and weight[Kh,Kw,Cin,Cout]")
    kh, kw, cin, _ = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    if x.shape[2] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[2]}, kernel expects {cin}")
    if padding is None:
        padding = ((kh - 1) // 2, (kw - 1) // 2)
    out = F.conv2d(x.permute(2, 0, 1)[None], weight.permute(3, 2, 0, 1), bias,
                   stride=stride, padding=padding)
    return check_finite(out[0].permute(1, 2, 0), "conv2d output")


def gather_bilinear(x: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``x[N,C,H,W]`` at points ``ys, xs`` of shape ``[N,P]``.

    Returns ``[N,C,P]``. Neighbours outside the grid contribute zero.
    Differentiable wrt ``x`` and the point coordinates.
    """
    n, c, h, w = x.shape
    y0 = torch.floor(ys)
    x0 = torch.floor(xs)
    wy1 = ys - y0
    wx1 = xs - x0
    y0 = y0.long()
    x0 = x0.long()
    flat = x.reshape(n, c, h * w)
    out = x.new_zeros((n, c, ys.shape[1]))
    for dy, wy in ((0, 1 - wy1), (1, wy1)):
        for dx, wx in ((0, 1 - wx1), (1, wx1)):
            yi = y0 + dy
            xi = x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1))
            vals = flat.gather(2, idx[:, None, :].expand(n, c, idx.shape[1]))
            out = out + vals * (wy * wx * valid.to(x.dtype))[:, None, :]
    return out


def bilinear_sample(x: torch.Tensor, point: Sequence[float] | torch.Tensor) -> torch.Tensor:
    """Sample an ``H x W x C`` map at real ``(y, x)``; returns a C-vector."""
    pt = torch.as_tensor(point, dtype=x.dtype)
    ys = pt[0].reshape(1, 1)
    xs = pt[1].reshape(1, 1)
    return gather_bilinear(x.permute(2, 0, 1)[None], ys, xs)[0, :, 0]


@dataclass
class DeformableKernel:
    """3x3 deformable kernel: per-tap weights plus per-tap ``(dy, dx)`` offsets.

    ``weights`` is ``3 x 3 x Cin`` (scalar response) or ``3 x 3 x Cin x Cout``;
    ``offsets`` is ``3 x 3 x 2`` (or ``9 x 2``).
    """

    weights: torch.Tensor
    offsets: torch.Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.offsets is None:
            self.offsets = torch.zeros(9, 2, dtype=self.weights.dtype)
        if self.weights.shape[:2] != (3, 3):
            raise ValueError(f"expected 3x3 taps, got weights of shape {tuple(self.weights.shape)}")
        if self.offsets.numel() != 18:
            raise ValueError(f"tap count mismatch: {self.offsets.numel() // 2} offsets for 9 taps")

    @property
    def taps(self) -> torch.Tensor:
        return TAPS_3X3.to(self.weights.dtype)


def deformable_conv(x: torch.Tensor, kernel: DeformableKernel, p0: Sequence[float]) -> torch.Tensor:
    """Aligned response at ``p0``: sum over taps of ``w_r * x(p0 + p_r + dp_r)``.

    ``x`` is ``H x W x Cin``. Returns a scalar (or a Cout-vector for 4-D weights).
    """
    offsets = kernel.offsets.reshape(9, 2).to(x.dtype)
    base = torch.as_tensor(p0, dtype=x.dtype).reshape(1, 2) + kernel.taps.to(x.dtype)
    pts = base + offsets
    sampled = gather_bilinear(x.permute(2, 0, 1)[None], pts[None, :, 0], pts[None, :, 1])[0]  # [Cin, 9]
    w = kernel.weights.reshape(9, *kernel.weights.shape[2:]).to(x.dtype)
    if w.dim() == 2:
        return (w * sampled.T).sum()
    return torch.einsum("rco,cr->o", w, sampled)


def deform_conv2d(x: torch.Tensor, weight: torch.Tensor, offsets: torch.Tensor,
                  bias: torch.Tensor | None = None) -> torch.Tensor:
    """Batched 3x3 deformable convolution with externally supplied offsets.

    Args:
        x: ``[N, Cin, H, W]`` input.
        weight: ``[Cout, Cin, 3, 3]``.
        offsets: ``[N, H, W, 9, 2]`` per-location, per-tap ``(dy, dx)``.

    With all-zero offsets this is ``F.conv2d(x, weight, bias, padding=1)``.
    """
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1:] != (cin, 3, 3):
        raise ValueError(f"weight shape {tuple(weight.shape)} does not match {cin} input channels")
    if offsets.shape != (n, h, w, 9, 2):
        raise ValueError(f"offsets shape {tuple(offsets.shape)} != {(n, h, w, 9, 2)}")
    gy, gx = torch.meshgrid(torch.arange(h, dtype=x.dtype), torch.arange(w, dtype=x.dtype), indexing="ij")
    taps = TAPS_3X3.to(x.dtype)
    ys = gy[:, :, None] + taps[:, 0] + offsets[..., 0]
    xs = gx[:, :, None] + taps[:, 1] + offsets[..., 1]
    sampled = gather_bilinear(x, ys.reshape(n, -1), xs.reshape(n, -1))  # [N, Cin, H*W*9]
    cols = sampled.reshape(n, cin, h * w, 9).permute(0, 2, 1, 3).reshape(n, h * w, cin * 9)
    out = cols @ weight.reshape(cout, cin * 9).T
    if bias is not None:
        out = out + bias
    return out.permute(0, 2, 1).reshape(n, cout, h, w)


def upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinear ``N x C x H x W`` upsampling by an integer factor, half-pixel centres."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


def upsample_bilinear(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Channel-last wrapper around :func:`upsample`."""
    return upsample(x.permute(2, 0, 1)[None], factor)[0].permute(1, 2, 0)


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    per_input: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-5,
               tol: float = 1e-4, name: str = "", max_elements: int | None = None,
               seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients of a scalar closure with central differences.

    The error for each input is ``max|g_analytic - g_numeric|`` divided by the
    larger infinity norm of the two gradients (floored at ``floor``). When
    ``max_elements`` is set, only a seeded random subset of entries is
    perturbed.
    """
    inputs = [t.detach().to(torch.float64).clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued closure")
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g for t, g in zip(inputs, analytic)]
    for g in analytic:
        check_finite(g, "analytic gradient")

    gen = torch.Generator().manual_seed(seed)
    errors = []
    with torch.no_grad():
        for t, g in zip(inputs, analytic):
            flat = t.view(-1)
            idx = torch.arange(flat.numel())
            if max_elements is not None and flat.numel() > max_elements:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_elements]
            num = torch.zeros(len(idx), dtype=torch.float64)
            for n_i, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = fn(*inputs).item()
                flat[i] = orig - eps
                fm = fn(*inputs).item()
                flat[i] = orig
                num[n_i] = (fp - fm) / (2 * eps)
            check_finite(num, "numeric gradient")
            ana = g.reshape(-1)[idx]
            scale = max(ana.abs().max().item() if len(idx) else 0.0,
                        num.abs().max().item() if len(idx) else 0.0, floor)
            errors.append((ana - num).abs().max().item() / scale if len(idx) else 0.0)
    return GradCheckReport(name=name, max_rel_error=max(errors, default=0.0), per_input=errors, tol=tol)
