"""Training loop: augment, forward, SimCC loss, backward, Adam, step decay."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .data import Sample, augment, gen_synthetic, load_coco_json, to_input
from .model import HRPVT, build_model, save_weights
from .optim import Adam, step_lr
from .simcc import PoseInstance, decode_coords, encode_targets, simcc_loss
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: HRPVT
    history: List[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    checkpoint: Optional[Path] = None


def load_training_samples(run: RunConfig) -> List[Sample]:
    if run.data.source == "synthetic":
        return gen_synthetic(run.data.scene, run.data.count)
    ds = load_coco_json(Path(run.data.path) / "annotations.json" if Path(run.data.path).is_dir() else run.data.path)
    return ds.load_samples()


def batch_targets(poses: Sequence[PoseInstance], cfg):
    tx, ty, mask = zip(*(encode_targets(p, cfg) for p in poses))
    return np.stack(tx), np.stack(ty), np.stack(mask)


def keypoint_errors(pred: np.ndarray, poses: Sequence[PoseInstance]):
    """Per-keypoint Euclidean errors of visible keypoints and matching PCK normalisers."""
    errs, norms = [], []
    for p, gt in zip(pred, poses):
        vis = gt.visibility > 0
        d = np.linalg.norm(p - gt.coords, axis=1)[vis]
        box = gt.coords[vis]
        size = float(np.max(box.max(axis=0) - box.min(axis=0))) if len(box) else 1.0
        errs.append(d)
        norms.append(np.full(len(d), size))
    return np.concatenate(errs), np.concatenate(norms)


def pck(errors: np.ndarray, norms: np.ndarray, alpha: float) -> float:
    """Fraction of keypoints within ``alpha`` times the pose's bounding-box extent."""
    return float(np.mean(errors <= alpha * norms)) if len(errors) else 0.0


def evaluate_samples(model: HRPVT, samples: Sequence[Sample], batch_size: int = 16) -> dict:
    model.eval()
    preds = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        xl, yl = model(Tensor(to_input([s.image for s in chunk], model.dtype)))
        preds.append(decode_coords(xl.data, yl.data, model.cfg.simcc)[0])
    model.train()
    pred = np.concatenate(preds) if preds else np.zeros((0, model.cfg.simcc.num_keypoints, 2))
    errs, norms = keypoint_errors(pred, [s.pose for s in samples])
    return {"mean_error_px": float(errs.mean()) if len(errs) else 0.0, "pck@0.1": pck(errs, norms, 0.1), "pck@0.05": pck(errs, norms, 0.05)}


def train(
    run: RunConfig,
    samples: Optional[List[Sample]] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    write: bool = True,
) -> TrainResult:
    """Run the configured schedule; with ``write`` the output dir gets
    ``weights.bin`` after every epoch and ``manifest.json`` at the end."""
    problems = run.problems()
    if problems:
        from .config import ConfigError

        raise ConfigError(problems)
    rng = np.random.default_rng(run.seed)
    if samples is None:
        samples = load_training_samples(run)
    if not samples:
        raise TrainingError("no training samples")
    model = build_model(run.model)
    params = model.parameters()
    opt = Adam(params, lr=run.optimizer.lr)
    cfg = run.model.simcc
    out_dir = Path(run.output_dir)
    ckpt = out_dir / "weights.bin"
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model=model, checkpoint=ckpt if write else None)
    step = 0
    for epoch in range(run.epochs):
        opt.lr = step_lr(run.optimizer.lr, epoch, run.optimizer.milestones, run.optimizer.gamma)
        order = rng.permutation(len(samples))
        losses, errs_all, norms_all = [], [], []
        for start in range(0, len(order), run.batch_size):
            idx = order[start : start + run.batch_size]
            images, poses = [], []
            for i in idx:
                img, pose = augment(samples[i].image, samples[i].pose, run.augment, rng)
                images.append(img)
                poses.append(pose)
            tx, ty, mask = batch_targets(poses, cfg)
            opt.zero_grad()
            xl, yl = model(Tensor(to_input(images, model.dtype)))
            loss = simcc_loss(xl, yl, tx, ty, mask)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch})")
            loss.backward()
            opt.step()
            step += 1
            losses.append(value)
            e, n = keypoint_errors(decode_coords(xl.data, yl.data, cfg)[0], poses)
            errs_all.append(e)
            norms_all.append(n)
        errs, norms = np.concatenate(errs_all), np.concatenate(norms_all)
        record = {"epoch": epoch, "step": step, "lr": opt.lr, "loss": float(np.mean(losses)), "train_pck@0.1": pck(errs, norms, 0.1)}
        result.history.append(record)
        logger.info("epoch %d loss %.5f pck %.3f lr %.2e", epoch, record["loss"], record["train_pck@0.1"], opt.lr)
        if on_epoch is not None:
            on_epoch(record)
        if write:
            save_weights(model, ckpt)
    result.final = evaluate_samples(model, samples)
    if write:
        manifest = {"config": run.to_dict(), "seed": run.seed, "steps": step, "final_metrics": result.final, "history": result.history}
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return result
