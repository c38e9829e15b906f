"""Command-line entry points: train, infer, eval, track, bench, gradcheck.

Exit codes: 0 success, 1 a check failed, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .config import Config, ConfigError
from .data.coco import CocoFormatError, load_coco
from .data.container import ContainerError, container_read, container_write
from .data.rng import derive_seed
from .data.synthetic import gen_video
from .evaluation import identity_consistency, mask_ap, match_frame
from .gradients import run_all
from .inference import infer_batch, masks_to_image_resolution, predict_scenes
from .smp import assemble_masks, binarize, smp_oracle
from .tracking import TrackedDetection, TrackingHead, Tracker, extract_track_vector, write_track_jsonl
from .train import build_dataset, load_checkpoint, train

log = logging.getLogger("sipmask")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2

PALETTE = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
           (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128), (170, 110, 40)]


class UsageError(Exception):
    pass


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def overlay(image: np.ndarray, masks, boxes, labels=None, alpha: float = 0.5) -> Image.Image:
    """Blend per-instance colours over an ``H x W x 3`` float image and outline each box."""
    base = (np.clip(image, 0, 1) * 255).astype(np.float64)
    for i, mask in enumerate(masks):
        colour = np.array(PALETTE[(labels[i] if labels is not None else i) % len(PALETTE)], dtype=np.float64)
        m = np.asarray(mask, dtype=bool)
        base[m] = (1 - alpha) * base[m] + alpha * colour
    pil = Image.fromarray(base.astype(np.uint8))
    draw = ImageDraw.Draw(pil)
    for i, box in enumerate(boxes):
        colour = PALETTE[(labels[i] if labels is not None else i) % len(PALETTE)]
        x1, y1, x2, y2 = box
        draw.rectangle([x1, y1, max(x1, x2 - 1), max(y1, y2 - 1)], outline=colour)
    return pil


def _load_images(paths, size: int) -> np.ndarray:
    images = []
    for p in paths:
        pil = Image.open(_require_file(p, "image")).convert("RGB")
        if pil.size != (size, size):
            pil = pil.resize((size, size), Image.BILINEAR)
        images.append(np.asarray(pil, dtype=np.float32) / 255.0)
    return np.stack(images)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.replace(train={"steps": args.steps})
    out = _out_dir(args, "runs/train")
    (out / "config.json").write_text(cfg.to_json())
    resume = _require_file(args.resume, "checkpoint") if args.resume else None
    result = train(cfg, out_dir=out, resume=resume)
    last = result.history[-1] if result.history else None
    print(f"trained {result.step} steps in {result.seconds:.1f}s" + (f", final total loss {last['total']:.4f}" if last else ""))
    print(f"checkpoint: {out / 'model.ckpt'}\nloss curve: {out / 'loss.csv'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _, _, cfg, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    size = cfg.model.image_size
    if args.images:
        images = _load_images(args.images, size)
    else:
        scenes = build_dataset(args.synthetic, derive_seed(cfg.seed, 7), cfg.train.overlap_bias, size)
        images = np.stack([s.image for s in scenes])
    out = _out_dir(args, "runs/infer")
    results = infer_batch(images, model, cfg)
    entries = []
    for i, (image, masks) in enumerate(zip(images, results)):
        binaries = masks_to_image_resolution(masks, image.shape[:2])
        boxes = np.array([m.box.as_tuple() for m in masks], dtype=np.float64).reshape(-1, 4)
        entries += [
            (f"image{i}/binary", np.stack(binaries).astype(np.uint8) if binaries else np.zeros((0, *image.shape[:2]), np.uint8)),
            (f"image{i}/boxes", boxes),
            (f"image{i}/scores", np.array([m.score for m in masks], dtype=np.float64)),
            (f"image{i}/classes", np.array([m.class_id for m in masks], dtype=np.int64)),
        ]
        overlay(image, binaries, boxes, [m.class_id for m in masks] if args.color_by_class else None).save(
            out / f"overlay_{i:03d}.png")
        print(f"image {i}: {len(masks)} instances")
    container_write(out / "masks.bin", entries)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _, cfg, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    if args.coco:
        scenes = list(load_coco(_require_file(args.coco, "annotation file"), args.image_dir or ".",
                                max_images=args.max_images, size=cfg.model.image_size))
    else:
        scenes = build_dataset(args.synthetic, args.data_seed, cfg.train.overlap_bias, cfg.model.image_size)
    report = mask_ap(*predict_scenes(model, cfg, scenes))
    out = _out_dir(args, "runs/eval")
    (out / "ap.json").write_text(report.to_json(indent=2))
    print(f"images {len(scenes)}  AP {report.ap:.4f}  AP50 {report.ap50:.4f}  AP75 {report.ap75:.4f}")
    return EXIT_OK


def cmd_track(args) -> int:
    model, _, _, cfg, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    seed = cfg.seed if args.seed is None else args.seed
    frames = gen_video(args.video_seed, n_frames=args.frames, mode=args.mode, size=cfg.model.image_size)
    images = np.stack([f.image for f in frames])
    head = model.track_head
    if head is None:
        # no trained tracking branch in this checkpoint: use a frozen, seeded random one
        torch.manual_seed(seed)
        head = TrackingHead(cfg.model.channels, cfg.model.track_dim).eval()
    with torch.no_grad():
        batch = torch.from_numpy(images).permute(0, 3, 1, 2)
        maps = head(model.build_pyramid(batch).levels[:3]).permute(0, 2, 3, 1)
    detections = infer_batch(images, model, cfg)
    out = _out_dir(args, "runs/track")
    tracker = Tracker(cfg.track)
    matched = []
    with open(out / "tracks.jsonl", "w") as fh:
        for f, (frame, masks, fmap) in enumerate(zip(frames, detections, maps)):
            masks = [m for m in masks if m.score >= args.min_score]
            binaries = masks_to_image_resolution(masks, frame.image.shape[:2])
            dets = [TrackedDetection(m.box, m.class_id, m.score,
                                     extract_track_vector(fmap.double(), m.box, model.strides[0]).numpy(), b)
                    for m, b in zip(masks, binaries)]
            ids = tracker.update(dets)
            write_track_jsonl(fh, f, dets, ids, [f"frame{f}/mask{i}" for i in range(len(dets))])
            overlay(frame.image, binaries, [d.box.as_tuple() for d in dets], ids).save(out / f"frame_{f:03d}.png")
            matched.append(match_frame(binaries, ids, [inst.mask for inst in frame.instances],
                                       [inst.instance_id for inst in frame.instances]))
    score = identity_consistency(matched)
    (out / "identity.json").write_text(json.dumps({"identity_consistency": score, "frames": len(frames)}))
    print(f"tracked {len(frames)} frames, identity consistency {score:.3f}")
    return EXIT_OK


def bench_fixture(seed: int = 0, p: int = 100, m: int = 32, size: int = 160, k: int = 2) -> dict[str, np.ndarray]:
    gen = torch.Generator().manual_seed(seed)
    basis = torch.randn(size, size, m, generator=gen, dtype=torch.float64)
    coeffs = torch.randn(p, k * k, m, generator=gen, dtype=torch.float64) * 0.3
    xy = torch.rand(p, 2, generator=gen, dtype=torch.float64) * (size - 8)
    wh = 8 + torch.rand(p, 2, generator=gen, dtype=torch.float64) * (size / 2)
    boxes = torch.cat([xy, torch.minimum(xy + wh, torch.tensor(float(size)))], dim=1)
    return {"basis": basis.numpy(), "coeffs": coeffs.numpy(), "boxes": boxes.numpy(), "k": np.array([k], np.int64)}


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(fixture: dict[str, np.ndarray], repeats: int = 5, tau: float = 0.5) -> dict:
    """Check the batched path against the scalar oracle, then time both single-threaded."""
    torch.set_num_threads(1)
    basis = torch.from_numpy(fixture["basis"])
    coeffs = torch.from_numpy(fixture["coeffs"])
    boxes = fixture["boxes"]
    k = int(fixture["k"][0])
    soft = assemble_masks(basis, coeffs, boxes, k)
    o_soft, o_bin = smp_oracle(fixture["basis"], fixture["coeffs"], boxes, k, tau)
    max_diff = float(np.abs(soft.numpy() - np.asarray(o_soft)).max()) if len(boxes) else 0.0
    equal = max_diff <= 1e-9 and np.array_equal(binarize(soft, tau).numpy(), np.asarray(o_bin, dtype=np.uint8))
    result = {"p": int(coeffs.shape[0]), "m": int(coeffs.shape[2]), "h": int(basis.shape[0]),
              "w": int(basis.shape[1]), "k": k, "max_abs_diff": max_diff, "outputs_equal": bool(equal)}
    if not equal:
        return result
    result["batched_ms"] = 1000 * _time(lambda: binarize(assemble_masks(basis, coeffs, boxes, k), tau), repeats)
    result["oracle_ms"] = 1000 * _time(lambda: smp_oracle(fixture["basis"], fixture["coeffs"], boxes, k, tau), 1)
    result["speedup"] = result["oracle_ms"] / result["batched_ms"]
    return result


def cmd_bench(args) -> int:
    if args.make_fixture:
        container_write(args.make_fixture, bench_fixture(seed=args.seed or 0))
        print(f"wrote {args.make_fixture}")
        return EXIT_OK
    if args.fixture:
        fixture = container_read(_require_file(args.fixture, "fixture"))
        missing = {"basis", "coeffs", "boxes", "k"} - set(fixture)
        if missing:
            raise ContainerError(f"fixture lacks entries: {', '.join(sorted(missing))}")
    else:
        fixture = bench_fixture(seed=args.seed or 0)
    res = run_bench(fixture, repeats=args.repeats)
    print(f"p={res['p']} m={res['m']} basis={res['h']}x{res['w']} k={res['k']}  max|batched-oracle|={res['max_abs_diff']:.2e}")
    if not res["outputs_equal"]:
        print("batched output differs from the oracle; not timing", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"{'path':<10}{'ms':>12}")
    print(f"{'batched':<10}{res['batched_ms']:>12.2f}")
    print(f"{'oracle':<10}{res['oracle_ms']:>12.2f}")
    print(f"speedup {res['speedup']:.1f}x")
    if args.out:
        (_out_dir(args, "runs/bench") / "bench.json").write_text(json.dumps(res, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_all(seed=args.seed or 0)
    width = max(len(r.name) for r in reports)
    print(f"{'operation':<{width}}  {'max rel err':>12}  result")
    for r in reports:
        print(f"{r.name:<{width}}  {r.max_rel_error:>12.2e}  {'pass' if r.passed else 'FAIL'}")
    if args.out:
        rows = [{"name": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed} for r in reports]
        (_out_dir(args, "runs/gradcheck") / "gradcheck.json").write_text(json.dumps(rows, indent=2))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="sipmask", description="Toy-scale spatial-coefficient instance segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train on synthetic scenes")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="predict masks and write overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="*", help="image files; synthetic scenes are used when omitted")
    p.add_argument("--synthetic", type=int, default=4, help="number of synthetic scenes when no images are given")
    p.add_argument("--color-by-class", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="mask AP on synthetic scenes or a COCO-format set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--synthetic", type=int, default=500)
    p.add_argument("--data-seed", type=int, default=12345)
    p.add_argument("--coco", help="COCO-format annotation JSON")
    p.add_argument("--image-dir")
    p.add_argument("--max-images", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", parents=[common], help="track instances through a synthetic video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video-seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--mode", choices=("free", "separated", "crossing"), default="separated")
    p.add_argument("--min-score", type=float, default=0.3)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("bench", parents=[common], help="time mask assembly against the scalar oracle")
    p.add_argument("--fixture", help="container with basis, coeffs, boxes, k")
    p.add_argument("--make-fixture", help="write the default fixture here and exit")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[common], help="central-difference checks of every registered op")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, ConfigError, ContainerError, CocoFormatError) as exc:
        print(f"sipmask {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
