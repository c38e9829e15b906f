"""COCO-format ingestion: polygon and RLE segmentations decoded to binary masks."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from ..geometry import mask_to_box
from .synthetic import Instance, Scene


class CocoFormatError(ValueError):
    pass


def rasterize_polygon(coords, h: int, w: int) -> np.ndarray:
    """Even-odd fill of a flat ``[x0, y0, x1, y1, ...]`` polygon, sampled at pixel centres."""
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((h, w), dtype=bool)
    if len(pts) < 3:
        return out
    c0 = max(int(np.floor(pts[:, 0].min())), 0)
    c1 = min(int(np.ceil(pts[:, 0].max())) + 1, w)
    r0 = max(int(np.floor(pts[:, 1].min())), 0)
    r1 = min(int(np.ceil(pts[:, 1].max())) + 1, h)
    if c1 <= c0 or r1 <= r0:
        return out
    ys = np.arange(r0, r1, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(c0, c1, dtype=np.float64)[None, :] + 0.5
    inside = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    for (xa, ya), (xb, yb) in zip(pts, np.roll(pts, -1, axis=0)):
        if ya == yb:
            continue
        straddles = (ya > ys) != (yb > ys)
        x_cross = xa + (ys - ya) * (xb - xa) / (yb - ya)
        inside ^= straddles & (xs < x_cross)
    out[r0:r1, c0:c1] = inside
    return out


def _rle_counts_from_string(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def decode_rle(rle: dict) -> np.ndarray:
    """Decode a COCO RLE (list or compressed-string counts); runs are column-major."""
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, str):
        counts = _rle_counts_from_string(counts)
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in counts:
        if pos + c > h * w:
            raise CocoFormatError("RLE counts exceed mask size")
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape((w, h)).T


def annotation_mask(ann: dict, h: int, w: int) -> np.ndarray:
    seg = ann.get("segmentation")
    if isinstance(seg, list):
        mask = np.zeros((h, w), dtype=bool)
        for poly in seg:
            mask |= rasterize_polygon(poly, h, w)
        return mask
    if isinstance(seg, dict):
        mask = decode_rle(seg)
        if mask.shape != (h, w):
            raise CocoFormatError(f"RLE size {mask.shape} does not match image {(h, w)}")
        return mask
    raise CocoFormatError(f"annotation {ann.get('id')} has no usable segmentation")


def load_coco(annotation_path: str | Path, image_dir: str | Path, max_images: int | None = None,
              size: int | None = None, skip_crowd: bool = True) -> Iterator[Scene]:
    """Yield one :class:`Scene` per annotated image, in ascending image id order.

    Category ids are remapped to contiguous class indices in ascending id order.
    With ``size`` set, images are bilinearly resized to ``size x size`` and
    masks nearest-resampled; boxes are recomputed from the resized masks.
    """
    path = Path(annotation_path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        images = {im["id"]: im for im in data["images"]}
        anns = data["annotations"]
        cats = sorted(c["id"] for c in data.get("categories", []))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CocoFormatError(f"{path}: malformed COCO annotation file ({exc})") from exc
    cat_index = {cid: i for i, cid in enumerate(cats)}
    by_image: dict[int, list[dict]] = {}
    for ann in anns:
        if ann.get("image_id") not in images:
            raise CocoFormatError(f"annotation {ann.get('id')} references unknown image {ann.get('image_id')}")
        by_image.setdefault(ann["image_id"], []).append(ann)

    yielded = 0
    for image_id in sorted(by_image):
        if max_images is not None and yielded >= max_images:
            return
        info = images[image_id]
        img_path = Path(image_dir) / info["file_name"]
        if not img_path.is_file():
            raise FileNotFoundError(img_path)
        pil = Image.open(img_path).convert("RGB")
        h, w = info.get("height", pil.height), info.get("width", pil.width)
        if (pil.height, pil.width) != (h, w):
            raise CocoFormatError(f"image {image_id}: file is {pil.height}x{pil.width}, annotation says {h}x{w}")
        instances = []
        for ann in by_image[image_id]:
            if skip_crowd and ann.get("iscrowd", 0):
                continue
            if ann["category_id"] not in cat_index:
                cat_index[ann["category_id"]] = len(cat_index)
            mask = annotation_mask(ann, h, w)
            if size is not None:
                mask = np.asarray(Image.fromarray(mask.astype(np.uint8)).resize((size, size), Image.NEAREST)) > 0
            box = mask_to_box(mask)
            if box is None:
                continue
            instances.append(Instance(cat_index[ann["category_id"]], box, mask.astype(np.uint8), int(ann.get("id", -1))))
        if size is not None:
            pil = pil.resize((size, size), Image.BILINEAR)
        image = np.asarray(pil, dtype=np.float32) / 255.0
        yielded += 1
        yield Scene(image=image, instances=instances)
