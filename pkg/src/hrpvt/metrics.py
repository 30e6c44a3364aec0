"""Object keypoint similarity, COCO-style AP/AR and PCKh."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import COCO_SIGMAS
from .simcc import PoseInstance

OKS_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, np.inf), "medium": (32.0**2, 96.0**2), "large": (96.0**2, np.inf)}


class UnlabeledInstanceError(ValueError):
    """Ground truth with no labelled keypoint; COCO evaluation skips these."""


@dataclass
class OKSParams:
    """Per-keypoint falloff constants ``k_i`` and the minimum visibility counted.

    The default is the 17-keypoint COCO sigma table used as ``k_i`` directly.
    pycocotools divides by ``(2 * sigma)**2`` instead; ``pycocotools()``
    reproduces that scaling.
    """

    sigmas: np.ndarray = field(default_factory=lambda: COCO_SIGMAS.copy())
    in_vis_thresh: int = 1

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.sigmas.ndim != 1 or np.any(self.sigmas <= 0):
            raise ValueError("OKS constants must be a 1-D array of positive values")

    @classmethod
    def pycocotools(cls) -> "OKSParams":
        return cls(sigmas=2.0 * COCO_SIGMAS)


@dataclass
class EvalRecord:
    image_id: int
    gts: List[PoseInstance]
    preds: List[PoseInstance]


def oks(pred: PoseInstance, gt: PoseInstance, params: OKSParams) -> float:
    """``sum_i exp(-d_i^2 / (2 s^2 k_i^2)) [v_i > 0] / sum_i [v_i > 0]`` with ``s^2`` the gt area."""
    if len(params.sigmas) != gt.num_keypoints or pred.num_keypoints != gt.num_keypoints:
        raise ValueError(f"keypoint count mismatch: pred {pred.num_keypoints}, gt {gt.num_keypoints}, constants {len(params.sigmas)}")
    labeled = gt.visibility >= params.in_vis_thresh
    if not labeled.any():
        raise UnlabeledInstanceError("ground truth instance has no labelled keypoints")
    if gt.area <= 0:
        raise ValueError("ground truth area must be positive")
    d2 = ((pred.coords - gt.coords) ** 2).sum(axis=1)
    e = d2 / (2.0 * gt.area * params.sigmas**2)
    return float(np.exp(-e)[labeled].sum() / labeled.sum())


def _oks_matrix(preds, gts, params) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for j, g in enumerate(gts):
        if not (g.visibility >= params.in_vis_thresh).any():
            continue
        for i, p in enumerate(preds):
            out[i, j] = oks(p, g, params)
    return out


def _match_image(preds, gts, params, area_rng, max_dets):
    """Greedy per-image matching at every OKS threshold.

    Returns (scores, det_matched[T, D], det_ignored[T, D], n_non_ignored_gts).
    """
    lo, hi = area_rng
    gt_ignore = np.array(
        [not (lo < g.area <= hi) or not (g.visibility >= params.in_vis_thresh).any() for g in gts], dtype=bool
    )
    gorder = np.argsort(gt_ignore, kind="mergesort")
    gts = [gts[i] for i in gorder]
    gt_ignore = gt_ignore[gorder]
    dorder = np.argsort([-p.score for p in preds], kind="mergesort")[:max_dets]
    preds = [preds[i] for i in dorder]
    ious = _oks_matrix(preds, gts, params)
    nt, nd, ng = len(OKS_THRESHOLDS), len(preds), len(gts)
    det_m = np.zeros((nt, nd), dtype=bool)
    det_ig = np.zeros((nt, nd), dtype=bool)
    out_of_range = np.array([not (lo < p.area <= hi) for p in preds], dtype=bool)
    for ti, t in enumerate(OKS_THRESHOLDS):
        gt_taken = np.zeros(ng, dtype=bool)
        for di in range(nd):
            best, best_iou = -1, min(t, 1 - 1e-10)
            for gi in range(ng):
                if gt_taken[gi]:
                    continue
                if best > -1 and not gt_ignore[best] and gt_ignore[gi]:
                    break
                if ious[di, gi] < best_iou:
                    continue
                if ious[di, gi] == best_iou and best > -1:
                    continue
                best_iou, best = ious[di, gi], gi
            if best > -1:
                gt_taken[best] = True
                det_m[ti, di] = True
                det_ig[ti, di] = gt_ignore[best]
            else:
                det_ig[ti, di] = out_of_range[di]
    scores = np.array([p.score for p in preds])
    return scores, det_m, det_ig, int((~gt_ignore).sum())


def precision_recall_summary(scores, matched, ignored, n_pos) -> Tuple[np.ndarray, np.ndarray]:
    """Interpolated 101-point AP and final recall per threshold from pooled detections."""
    nt = len(OKS_THRESHOLDS)
    ap = np.zeros(nt)
    rec = np.zeros(nt)
    if n_pos == 0:
        return np.full(nt, -1.0), np.full(nt, -1.0)
    order = np.argsort(-scores, kind="mergesort")
    for ti in range(nt):
        m = matched[ti, order]
        ig = ignored[ti, order]
        tps = np.cumsum(m & ~ig).astype(np.float64)
        fps = np.cumsum(~m & ~ig).astype(np.float64)
        if len(tps) == 0:
            continue
        rc = tps / n_pos
        pr = tps / np.maximum(tps + fps, np.spacing(1))
        pr = np.maximum.accumulate(pr[::-1])[::-1]
        idx = np.searchsorted(rc, RECALL_POINTS, side="left")
        q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
        ap[ti] = q.mean()
        rec[ti] = rc[-1]
    return ap, rec


def worker_count() -> int:
    """Evaluation parallelism cap from ``HRPVT_THREADS`` (default 1)."""
    raw = os.environ.get("HRPVT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"HRPVT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"HRPVT_THREADS must be a positive integer, got {raw!r}")
    return n


def evaluate_ap_ar(
    records: Sequence[EvalRecord], params: Optional[OKSParams] = None, max_dets: int = 20, workers: int = 1
) -> Dict[str, float]:
    """AP over OKS thresholds 0.50:0.05:0.95, AP50, AP75, AP_M, AP_L and AR.

    Images are matched independently (optionally on ``workers`` threads) and
    pooled in sorted image-id order, so the result does not depend on
    ``workers``.
    """
    if not records:
        raise ValueError("evaluate_ap_ar: empty record set")
    params = params or OKSParams()
    ordered = sorted(records, key=lambda r: r.image_id)
    out: Dict[str, float] = {}
    for name, rng in AREA_RANGES.items():
        scores, matched, ignored, n_pos = [], [], [], 0

        def match(rec, rng=rng):
            return _match_image(rec.preds, rec.gts, params, rng, max_dets)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                per_image = list(pool.map(match, ordered))
        else:
            per_image = [match(r) for r in ordered]
        for s, m, ig, n in per_image:
            scores.append(s)
            matched.append(m)
            ignored.append(ig)
            n_pos += n
        nt = len(OKS_THRESHOLDS)
        ap, recall = precision_recall_summary(
            np.concatenate(scores) if scores else np.zeros(0),
            np.concatenate(matched, axis=1) if matched else np.zeros((nt, 0), bool),
            np.concatenate(ignored, axis=1) if ignored else np.zeros((nt, 0), bool),
            n_pos,
        )
        if name == "all":
            out["AP"] = float(ap.mean())
            out["AP50"] = float(ap[0])
            out["AP75"] = float(ap[5])
            out["AR"] = float(recall.mean())
        elif name == "medium":
            out["AP_M"] = float(ap.mean())
        else:
            out["AP_L"] = float(ap.mean())
    return out


def pckh(gts: Sequence[PoseInstance], preds: Sequence[PoseInstance], alpha: float = 0.5, head_sizes: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, float]:
    """Per-joint PCKh (NaN for joints never labelled) and the pooled mean.

    A keypoint counts as correct when its distance is at most ``alpha`` times
    the instance head size (closed boundary).
    """
    if len(gts) != len(preds):
        raise ValueError(f"{len(gts)} ground truths but {len(preds)} predictions")
    if not gts:
        raise ValueError("pckh: no instances")
    nk = gts[0].num_keypoints
    correct = np.zeros(nk)
    labeled = np.zeros(nk)
    for i, (g, p) in enumerate(zip(gts, preds)):
        head = head_sizes[i] if head_sizes is not None else g.head_size
        if head is None or head <= 0:
            raise ValueError(f"instance {i}: head size must be positive, got {head}")
        vis = g.visibility > 0
        d = np.linalg.norm(p.coords - g.coords, axis=1)
        labeled += vis
        correct += vis & (d <= alpha * head)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(labeled > 0, correct / np.maximum(labeled, 1), np.nan)
    total = labeled.sum()
    return per_joint, float(correct.sum() / total) if total else 0.0


def mpii_head_size(head_box: Sequence[float]) -> float:
    """MPII convention: 0.6 times the diagonal of the head box ``(x1, y1, x2, y2)``."""
    x1, y1, x2, y2 = head_box
    return 0.6 * float(np.hypot(x2 - x1, y2 - y1))


def write_metrics(metrics: Dict[str, float], json_path=None, csv_path=None) -> None:
    if json_path is not None:
        Path(json_path).write_text(json.dumps(metrics, indent=2) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in metrics.items():
                w.writerow([k, repr(float(v))])
