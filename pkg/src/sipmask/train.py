"""Training loop: target assignment, the three-term loss, SGD, checkpoints and resume."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import Config
from .data.container import ContainerError, container_read, container_write
from .data.rng import Xoshiro256, derive_seed
from .data.synthetic import Scene, gen_scene
from .heads import HeadOutputs, SipMaskNet
from .losses import LossReport, focal_loss, iou_loss, ltrb_iou, mask_loss, total_loss
from .smp import box_mask_logits
from .targets import BACKGROUND, assign_targets

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_cls", "l_reg", "l_mask", "total")


@dataclass
class SceneTargets:
    labels: torch.Tensor  # [L] int64 over all levels
    ltrb: torch.Tensor  # [L, 4]
    gt_index: torch.Tensor  # [L]
    boxes: np.ndarray  # [G, 4]
    masks: torch.Tensor  # [G, H, W] float


def build_dataset(n: int, seed: int, overlap_bias: float, size: int = 64) -> list[Scene]:
    return [gen_scene(derive_seed(seed, i), size=size, overlap_bias=overlap_bias) for i in range(n)]


def scene_targets(scene: Scene, level_shapes, strides, scale_windows) -> SceneTargets:
    boxes = np.array([inst.box.as_tuple() for inst in scene.instances], dtype=np.float64).reshape(-1, 4)
    classes = np.array([inst.class_id for inst in scene.instances], dtype=np.int64)
    flat = assign_targets(boxes, classes, level_shapes, strides, scale_windows).flat()
    h, w = scene.image.shape[:2]
    masks = np.stack([inst.mask for inst in scene.instances]) if scene.instances else np.zeros((0, h, w))
    return SceneTargets(torch.from_numpy(flat.labels), torch.from_numpy(flat.ltrb).float(),
                        torch.from_numpy(flat.gt_index), boxes, torch.from_numpy(masks.astype(np.float32)))


def _resample_masks(masks: torch.Tensor, shape: tuple[int, int]) -> torch.Tensor:
    if masks.shape[-2:] == shape:
        return masks
    h, w = masks.shape[-2:]
    ry = ((torch.arange(shape[0]) + 0.5) * h / shape[0]).long()
    rx = ((torch.arange(shape[1]) + 0.5) * w / shape[1]).long()
    return masks[:, ry][:, :, rx]


def _flatten_levels(maps: Sequence[torch.Tensor]) -> tuple[torch.Tensor, ...]:
    """Per-image ``[L, C]`` views over all levels; unbinding once keeps backward cheap."""
    flat = torch.cat([t.permute(0, 2, 3, 1).reshape(t.shape[0], -1, t.shape[1]) for t in maps], dim=1)
    return flat.unbind(0)


def compute_losses(out: HeadOutputs, targets: Sequence[SceneTargets], cfg: Config,
                   generator: torch.Generator | None = None, basis_stride: float = 1.0) -> LossReport:
    """Batch loss. ``N`` (positive count) normalises the focal and IoU terms; the mask
    term is normalised by the number of positives it actually samples."""
    k, m = cfg.model.k, cfg.model.m
    n_pos = sum(int((t.labels != BACKGROUND).sum()) for t in targets)
    cls_terms, pred_pos, gt_pos = [], [], []
    mask_terms, n_sampled, weight_sum = [], 0, 0.0
    all_logits = _flatten_levels(out.class_logits)
    all_ltrb = _flatten_levels(out.ltrb)
    all_coeffs = _flatten_levels(out.coeffs)
    bases = out.basis.permute(0, 2, 3, 1).unbind(0)
    for i, tgt in enumerate(targets):
        logits = all_logits[i]
        onehot = torch.zeros_like(logits)
        pos = torch.nonzero(tgt.labels != BACKGROUND).reshape(-1)
        onehot[pos, tgt.labels[pos]] = 1.0
        cls_terms.append(focal_loss(logits, onehot, cfg.loss.focal_gamma, cfg.loss.focal_alpha, normalizer=1.0))
        if pos.numel() == 0:
            continue
        pred_ltrb = all_ltrb[i][pos]
        pred_pos.append(pred_ltrb)
        gt_pos.append(tgt.ltrb[pos])

        if pos.numel() > cfg.loss.max_pos_per_image:
            pick = torch.randperm(pos.numel(), generator=generator)[:cfg.loss.max_pos_per_image]
            sample = pick.sort().values
        else:
            sample = torch.arange(pos.numel())
        loc = pos[sample]
        gidx = tgt.gt_index[loc]
        coeffs = all_coeffs[i][loc].reshape(-1, k * k, m)
        weights = None
        if cfg.loss.mask_weighting:
            with torch.no_grad():
                overlap = ltrb_iou(pred_ltrb[sample], tgt.ltrb[loc]).clamp(0, 1)
                score = torch.sigmoid(logits[loc, tgt.labels[loc]])
                weights = overlap * score
                weight_sum += float(weights.sum())
        basis = bases[i]
        gt_masks = _resample_masks(tgt.masks, tuple(basis.shape[:2]))
        for g in torch.unique(gidx).tolist():
            rows = torch.nonzero(gidx == g).reshape(-1)
            mlogits, pix = box_mask_logits(basis, coeffs[rows], tgt.boxes[g] / basis_stride, k)
            if pix.shape[0] == 0:
                raise ValueError("ground-truth box covers no basis pixel")
            gt = gt_masks[g][torch.from_numpy(pix[:, 0]), torch.from_numpy(pix[:, 1])].expand_as(mlogits)
            soft = torch.sigmoid(mlogits)[:, None]
            w_g = weights[rows] if weights is not None else None
            mask_terms.append(mask_loss(soft, gt[:, None], torch.ones_like(soft, dtype=torch.bool), w_g,
                                        normalizer=1.0))
        n_sampled += len(loc)

    l_cls = torch.stack(cls_terms).sum() / max(n_pos, 1)
    if pred_pos:
        l_reg = iou_loss(torch.cat(pred_pos), torch.cat(gt_pos))
        normalizer = n_sampled
        if cfg.loss.mask_weighting and cfg.loss.normalize_by_weight:
            normalizer = weight_sum
        l_mask = torch.stack(mask_terms).sum() / (normalizer if normalizer > 0 else 1)
    else:
        l_reg = out.ltrb[0].sum() * 0
        l_mask = out.basis.sum() * 0 + out.coeffs[0].sum() * 0
    return total_loss(l_cls, l_reg, l_mask, n_pos)


def lr_at(step: int, cfg: Config) -> float:
    """Linear warmup from a third of the base rate, then x0.1 at each drop fraction."""
    t = cfg.train
    lr = t.lr
    if step < t.warmup_steps:
        lr *= 1 / 3 + (2 / 3) * step / t.warmup_steps
    for frac in t.lr_drops:
        if step >= int(frac * t.steps):
            lr *= 0.1
    return lr


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> list[int]:
    """Indices for ``step``: walk per-epoch permutations, each seeded from (seed, epoch)."""
    start = step * batch_size
    out: list[int] = []
    epoch, offset = divmod(start, n)
    while len(out) < batch_size:
        perm = Xoshiro256(derive_seed(seed, epoch)).permutation(n)
        take = perm[offset:offset + batch_size - len(out)]
        out.extend(take)
        epoch, offset = epoch + 1, 0
    return out


def make_optimizer(model: SipMaskNet, cfg: Config) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.train.lr, momentum=cfg.train.momentum,
                           weight_decay=cfg.train.weight_decay)


def save_checkpoint(path: str | Path, model: SipMaskNet, optimizer: torch.optim.Optimizer | None,
                    step: int, cfg: Config, history: Sequence[dict]) -> None:
    entries = [(f"model/{name}", t.detach().cpu().numpy()) for name, t in model.state_dict().items()]
    n_buffers = 0
    if optimizer is not None:
        for i, p in enumerate(model.parameters()):
            buf = optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                entries.append((f"optim/{i}", buf.detach().cpu().numpy()))
                n_buffers += 1
    hist = np.array([[r[c] for c in LOSS_COLUMNS] for r in history], dtype=np.float64).reshape(-1, len(LOSS_COLUMNS))
    entries.append(("history", hist))
    meta = {"step": step, "config": cfg.to_dict(), "n_momentum_buffers": n_buffers}
    entries.append(("__meta__", np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)))
    container_write(path, entries)


def load_checkpoint(path: str | Path, cfg: Config | None = None):
    """Returns ``(model, optimizer, step, cfg, history)``; raises ContainerError on bad content."""
    entries = container_read(path)
    if "__meta__" not in entries:
        raise ContainerError(f"{path}: not a checkpoint (no metadata entry)")
    try:
        meta = json.loads(entries["__meta__"].tobytes().decode("utf-8"))
        saved_cfg = Config.from_dict(meta["config"])
        step = int(meta["step"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ContainerError(f"{path}: corrupt checkpoint metadata ({exc})") from exc
    cfg = cfg or saved_cfg
    model = SipMaskNet(cfg.model)
    state = {name[len("model/"):]: torch.from_numpy(arr) for name, arr in entries.items() if name.startswith("model/")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ContainerError(f"{path}: checkpoint does not match the model ({exc})") from exc
    optimizer = make_optimizer(model, cfg)
    for i, p in enumerate(model.parameters()):
        key = f"optim/{i}"
        if key in entries:
            optimizer.state[p]["momentum_buffer"] = torch.from_numpy(entries[key]).clone()
    history = [dict(zip(LOSS_COLUMNS, row)) for row in entries.get("history", np.zeros((0, 5))).tolist()]
    for row in history:
        row["step"] = int(row["step"])
    return model, optimizer, step, cfg, history


def write_loss_csv(path: str | Path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({c: row[c] for c in LOSS_COLUMNS})


@dataclass
class TrainResult:
    model: SipMaskNet
    history: list[dict] = field(default_factory=list)
    step: int = 0
    seconds: float = 0.0


def train(cfg: Config, out_dir: str | Path | None = None, scenes: Sequence[Scene] | None = None,
          resume: str | Path | None = None, max_steps: int | None = None) -> TrainResult:
    """Train for ``cfg.train.steps`` steps (or stop early at ``max_steps``).

    Everything random is derived from ``cfg.seed`` and the step number, so a run
    resumed from a checkpoint follows the uninterrupted trajectory exactly.
    """
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    if scenes is None:
        scenes = build_dataset(cfg.train.n_train_scenes, cfg.train.data_seed, cfg.train.overlap_bias,
                               cfg.model.image_size)
    if resume is not None:
        model, optimizer, step, _, history = load_checkpoint(resume, cfg)
    else:
        torch.manual_seed(cfg.seed)
        model = SipMaskNet(cfg.model)
        optimizer = make_optimizer(model, cfg)
        step, history = 0, []
    model.train()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    level_shapes = None
    cache: dict[int, SceneTargets] = {}
    end = cfg.train.steps if max_steps is None else min(cfg.train.steps, max_steps)
    while step < end:
        idx = batch_indices(cfg.seed, step, cfg.train.batch_size, len(scenes))
        images = torch.from_numpy(np.stack([scenes[i].image for i in idx])).permute(0, 3, 1, 2)
        for group in optimizer.param_groups:
            group["lr"] = lr_at(step, cfg)
        outputs = model(images)
        if level_shapes is None:
            level_shapes = [tuple(t.shape[-2:]) for t in outputs.class_logits]
        for i in idx:
            if i not in cache:
                cache[i] = scene_targets(scenes[i], level_shapes, outputs.strides, cfg.loss.scale_windows)
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, step, 1))
        report = compute_losses(outputs, [cache[i] for i in idx], cfg, gen, model.basis_stride)
        optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        if cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
        optimizer.step()
        step += 1
        history.append({"step": step, **report.as_row()})
        if step % 50 == 0 or step == end:
            row = history[-1]
            log.info("step %d total %.4f cls %.4f reg %.4f mask %.4f", step, row["total"], row["l_cls"],
                     row["l_reg"], row["l_mask"])
        if out is not None and cfg.train.checkpoint_every and step % cfg.train.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{step:06d}.ckpt", model, optimizer, step, cfg, history)
    if out is not None:
        save_checkpoint(out / "model.ckpt", model, optimizer, step, cfg, history)
        write_loss_csv(out / "loss.csv", history)
    model.eval()
    return TrainResult(model, history, step, time.perf_counter() - t0)
