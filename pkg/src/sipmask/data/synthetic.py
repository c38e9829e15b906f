"""Synthetic scenes and videos of rectangles, ellipses and triangles.

Shapes are painted in order, so later shapes occlude earlier ones; every
ground-truth mask is the visible region only and its box is the tight
pixel-edge box of that mask. A pixel is inside a shape when its centre is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..geometry import Box, mask_to_box
from .rng import Xoshiro256

CLASS_NAMES = ("rectangle", "ellipse", "triangle")
MIN_VISIBLE_FRACTION = 0.5
MIN_VISIBLE_PIXELS = 20
PLACEMENT_ATTEMPTS = 30


@dataclass
class Instance:
    class_id: int
    box: Box
    mask: np.ndarray  # uint8 [H, W]
    instance_id: int = -1


@dataclass
class Scene:
    image: np.ndarray  # float32 [H, W, 3] in [0, 1]
    instances: list[Instance]

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True)
class ShapeSpec:
    class_id: int
    cx: float
    cy: float
    half_w: float
    half_h: float
    angle: float
    color: tuple[float, float, float]
    # triangle only: vertex angles/radii relative to the centre
    vertex_angles: tuple[float, ...] = ()
    vertex_radii: tuple[float, ...] = ()

    @property
    def radius(self) -> float:
        return max(self.half_w, self.half_h)

    def moved(self, dx: float, dy: float) -> ShapeSpec:
        return replace(self, cx=self.cx + dx, cy=self.cy + dy)

    def rasterize(self, h: int, w: int) -> np.ndarray:
        ys = np.arange(h, dtype=np.float64)[:, None] + 0.5 - self.cy
        xs = np.arange(w, dtype=np.float64)[None, :] + 0.5 - self.cx
        if self.class_id == 2:
            verts = [(r * math.cos(a), r * math.sin(a)) for a, r in zip(self.vertex_angles, self.vertex_radii)]
            inside = np.ones((h, w), dtype=bool)
            for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
                # vertices are counter-clockwise in image coordinates (y down): keep the left side
                inside &= (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0
            return inside
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = c * xs + s * ys
        v = -s * xs + c * ys
        if self.class_id == 0:
            return (np.abs(u) <= self.half_w) & (np.abs(v) <= self.half_h)
        return (u / self.half_w) ** 2 + (v / self.half_h) ** 2 <= 1.0

    def extent(self) -> Box:
        """Box of the full (unoccluded) shape at sub-pixel precision."""
        if self.class_id == 2:
            px = [self.cx + r * math.cos(a) for a, r in zip(self.vertex_angles, self.vertex_radii)]
            py = [self.cy + r * math.sin(a) for a, r in zip(self.vertex_angles, self.vertex_radii)]
            return Box(min(px), min(py), max(px), max(py))
        c, s = abs(math.cos(self.angle)), abs(math.sin(self.angle))
        if self.class_id == 0:
            ex = c * self.half_w + s * self.half_h
            ey = s * self.half_w + c * self.half_h
        else:
            ex = math.hypot(self.half_w * c, self.half_h * s)
            ey = math.hypot(self.half_w * s, self.half_h * c)
        return Box(self.cx - ex, self.cy - ey, self.cx + ex, self.cy + ey)


@dataclass(frozen=True)
class Background:
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    direction: float
    wave_amp: float
    wave_freq: float
    wave_phase: float

    def render(self, h: int, w: int) -> np.ndarray:
        ys = (np.arange(h) + 0.5)[:, None] / h
        xs = (np.arange(w) + 0.5)[None, :] / w
        t = 0.5 + 0.5 * (math.cos(self.direction) * (xs - 0.5) + math.sin(self.direction) * (ys - 0.5)) * 1.4
        t = np.clip(t, 0, 1)
        wave = self.wave_amp * np.sin(self.wave_freq * 2 * math.pi * (xs + ys) + self.wave_phase)
        a = np.asarray(self.color_a)[None, None, :]
        b = np.asarray(self.color_b)[None, None, :]
        img = a * (1 - t[..., None]) + b * t[..., None] + wave[..., None]
        return np.clip(img, 0, 1)


def random_background(rng: Xoshiro256) -> Background:
    return Background(
        color_a=tuple(rng.uniform(0.0, 0.45) for _ in range(3)),
        color_b=tuple(rng.uniform(0.0, 0.45) for _ in range(3)),
        direction=rng.uniform(0, 2 * math.pi),
        wave_amp=rng.uniform(0.0, 0.06),
        wave_freq=rng.uniform(1.0, 4.0),
        wave_phase=rng.uniform(0, 2 * math.pi),
    )


def random_shape(rng: Xoshiro256, cx: float, cy: float, size_range: tuple[float, float] = (5.0, 14.0),
                 class_id: int | None = None) -> ShapeSpec:
    if class_id is None:
        class_id = rng.integers(0, len(CLASS_NAMES))
    half_w = rng.uniform(*size_range)
    half_h = rng.uniform(*size_range)
    angle = rng.uniform(-0.4, 0.4)
    color = tuple(rng.uniform(0.35, 1.0) for _ in range(3))
    angles: tuple[float, ...] = ()
    radii: tuple[float, ...] = ()
    if class_id == 2:
        base = rng.uniform(0, 2 * math.pi)
        angles = tuple(base + i * 2 * math.pi / 3 + rng.uniform(-0.35, 0.35) for i in range(3))
        r = max(half_w, half_h)
        radii = tuple(r * rng.uniform(0.85, 1.1) for _ in range(3))
    return ShapeSpec(class_id, cx, cy, half_w, half_h, angle, color, angles, radii)


def _visible_masks(shapes: list[ShapeSpec], h: int, w: int) -> list[np.ndarray]:
    full = [s.rasterize(h, w) for s in shapes]
    visible = []
    covered = np.zeros((h, w), dtype=bool)
    for m in reversed(full):
        visible.append(m & ~covered)
        covered |= m
    return visible[::-1]


def render(shapes: list[ShapeSpec], background: Background, size: int = 64,
           instance_ids: list[int] | None = None) -> Scene:
    """Paint shapes in order and build the visible-region annotations."""
    image = background.render(size, size)
    for s in shapes:
        m = s.rasterize(size, size)
        image[m] = np.asarray(s.color)
    instances = []
    for i, (s, vis) in enumerate(zip(shapes, _visible_masks(shapes, size, size))):
        box = mask_to_box(vis)
        if box is None:
            continue
        iid = instance_ids[i] if instance_ids is not None else i
        instances.append(Instance(s.class_id, box, vis.astype(np.uint8), iid))
    return Scene(image=image.astype(np.float32), instances=instances)


def _boxes_intersect(a: Box, b: Box, margin: float = 0.0) -> bool:
    return (min(a.x2, b.x2) - max(a.x1, b.x1) > -margin) and (min(a.y2, b.y2) - max(a.y1, b.y1) > -margin)


def _in_frame(box: Box, size: int) -> bool:
    return box.x1 >= 0 and box.y1 >= 0 and box.x2 <= size and box.y2 <= size


def gen_scene(seed: int, n_shapes: int | None = None, size: int = 64, overlap_bias: float = 0.5) -> Scene:
    """Random scene; ``overlap_bias`` is the chance each new shape is placed against an existing one.

    With ``overlap_bias == 0`` shape extents never intersect, so all masks are disjoint.
    """
    if not 0.0 <= overlap_bias <= 1.0:
        raise ValueError(f"overlap_bias must be in [0, 1], got {overlap_bias}")
    rng = Xoshiro256(seed)
    if n_shapes is None:
        n_shapes = rng.integers(2, 6)
    background = random_background(rng)
    shapes: list[ShapeSpec] = []
    full_areas: list[int] = []
    for idx in range(n_shapes):
        adjacent = idx > 0 and rng.random() < overlap_bias
        for _ in range(PLACEMENT_ATTEMPTS):
            shape = random_shape(rng, 0.0, 0.0)
            if adjacent:
                anchor = shapes[rng.integers(0, len(shapes))]
                dist = (anchor.radius + shape.radius) * rng.uniform(0.45, 0.95)
                theta = rng.uniform(0, 2 * math.pi)
                cx, cy = anchor.cx + dist * math.cos(theta), anchor.cy + dist * math.sin(theta)
            else:
                cx, cy = rng.uniform(0, size), rng.uniform(0, size)
            shape = shape.moved(cx, cy)
            ext = shape.extent()
            if not _in_frame(ext, size):
                continue
            if overlap_bias == 0.0 and any(_boxes_intersect(ext, s.extent(), margin=1.0) for s in shapes):
                continue
            candidate = shapes + [shape]
            vis = _visible_masks(candidate, size, size)
            areas = full_areas + [int(shape.rasterize(size, size).sum())]
            if all(v.sum() >= max(MIN_VISIBLE_FRACTION * a, MIN_VISIBLE_PIXELS) for v, a in zip(vis, areas)):
                shapes, full_areas = candidate, areas
                break
    return render(shapes, background, size)


def has_adjacent_pair(scene: Scene) -> bool:
    """True when some pair of instance boxes overlaps with positive area."""
    inst = scene.instances
    return any(_boxes_intersect(a.box, b.box) for i, a in enumerate(inst) for b in inst[i + 1:])


def gen_video(seed: int, n_frames: int = 20, velocity_range: tuple[float, float] = (0.5, 1.5),
              n_shapes: int = 4, mode: str = "free", size: int = 64) -> list[Scene]:
    """Shapes translating at constant per-instance velocity; ``instance_id`` persists.

    Modes: ``free`` (anything goes), ``separated`` (full extents stay disjoint
    in every frame), ``crossing`` (two shapes on opposing paths that overlap
    mid-video; ``n_shapes`` is ignored).
    """
    rng = Xoshiro256(seed)
    background = random_background(rng)
    if mode == "crossing":
        shapes, velocities = _crossing_pair(rng, n_frames, velocity_range, size)
    elif mode in ("free", "separated"):
        shapes, velocities = _random_trajectories(rng, n_frames, velocity_range, n_shapes, size,
                                                  separated=mode == "separated")
    else:
        raise ValueError(f"unknown video mode {mode!r}")
    frames = []
    ids = list(range(len(shapes)))
    for f in range(n_frames):
        moved = [s.moved(vx * f, vy * f) for s, (vx, vy) in zip(shapes, velocities)]
        frames.append(render(moved, background, size, instance_ids=ids))
    return frames


def _trajectory(rng, span, velocity_range, size):
    """One shape whose extent stays inside the frame over ``span`` frames, or None."""
    speed = rng.uniform(*velocity_range)
    theta = rng.uniform(0, 2 * math.pi)
    vx, vy = speed * math.cos(theta), speed * math.sin(theta)
    shape = random_shape(rng, 0.0, 0.0, size_range=(4.0, 7.0))
    ext = shape.extent()
    # feasible start centres keep both endpoints (and so the whole path) in frame
    x_lo, x_hi = -ext.x1 - min(0.0, vx * span), size - ext.x2 - max(0.0, vx * span)
    y_lo, y_hi = -ext.y1 - min(0.0, vy * span), size - ext.y2 - max(0.0, vy * span)
    if x_hi <= x_lo or y_hi <= y_lo:
        return None
    return shape.moved(rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)), (vx, vy)


def _random_trajectories(rng, n_frames, velocity_range, n_shapes, size, separated):
    span = n_frames - 1
    for _ in range(200):
        shapes, velocities = [], []
        for _ in range(200):
            if len(shapes) == n_shapes:
                break
            placed = _trajectory(rng, span, velocity_range, size)
            if placed is None:
                continue
            shape, (vx, vy) = placed
            if separated and any(
                    _boxes_intersect(shape.moved(vx * f, vy * f).extent(), o.moved(ox * f, oy * f).extent(), margin=1.0)
                    for o, (ox, oy) in zip(shapes, velocities) for f in range(n_frames)):
                continue
            shapes.append(shape)
            velocities.append((vx, vy))
        if len(shapes) == n_shapes:
            return shapes, velocities
    raise RuntimeError("could not place video trajectories; relax the velocity range or shape count")


def _crossing_pair(rng, n_frames, velocity_range, size):
    span = n_frames - 1
    speed = rng.uniform(*velocity_range)
    travel = speed * span
    a = random_shape(rng, 0.0, 0.0, size_range=(4.0, 7.0))
    b = random_shape(rng, 0.0, 0.0, size_range=(4.0, 7.0))
    margin = max(a.radius, b.radius) * 1.5 + 1
    travel = min(travel, size - 2 * margin)
    speed = travel / span
    cy = rng.uniform(margin, size - margin)
    dy = rng.uniform(-3.0, 3.0)
    x0 = size / 2 - travel / 2
    a = a.moved(x0, cy)
    b = b.moved(size - x0, cy + dy)
    return [a, b], [(speed, 0.0), (-speed, 0.0)]
