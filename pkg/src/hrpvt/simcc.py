"""SimCC coordinate classification: per-axis linear classifiers over
flattened keypoint embeddings, Gaussian-smoothed bin targets, argmax/K
decoding and a KL-divergence training loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .config import SimCCConfig
from .nn import Linear, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class PoseInstance:
    """One person's keypoints in crop pixel coordinates.

    ``coords`` is (N, 2) float, ``visibility`` is (N,) int in {0, 1, 2},
    ``area`` is the object scale squared used by OKS. ``score`` is the
    instance confidence for predictions and ``confidences`` the per-keypoint
    ones.
    """

    coords: np.ndarray
    visibility: np.ndarray
    area: float = 1.0
    score: float = 1.0
    confidences: Optional[np.ndarray] = None
    head_size: Optional[float] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.int64).reshape(-1)
        if len(self.visibility) != len(self.coords):
            raise ValueError(f"{len(self.coords)} keypoints but {len(self.visibility)} visibility flags")

    @property
    def num_keypoints(self) -> int:
        return len(self.coords)


class SimCCHead(Module):
    """``FC_x`` and ``FC_y`` shared across keypoints: embedding h*w -> W*K and H*K bins."""

    def __init__(self, embed_len: int, cfg: SimCCConfig, rng, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.embed_len = embed_len
        self.fc_x = Linear(embed_len, cfg.x_bins, rng, dtype)
        self.fc_y = Linear(embed_len, cfg.y_bins, rng, dtype)

    def forward(self, f4: Tensor) -> Tuple[Tensor, Tensor]:
        return head_forward(f4, self)


def head_forward(f4: Tensor, head: SimCCHead) -> Tuple[Tensor, Tensor]:
    n, nk, h, w = f4.shape
    if nk != head.cfg.num_keypoints:
        raise ValueError(f"head input has {nk} channels, config expects {head.cfg.num_keypoints} keypoints")
    if h * w != head.embed_len:
        raise ValueError(f"head embedding length {h * w} does not match configured {head.embed_len}")
    e = f4.reshape(n, nk, h * w)
    return head.fc_x(e), head.fc_y(e)


def center_bin(coord: float, k: float) -> int:
    """Nearest bin, rounding halves up."""
    return int(np.floor(coord * k + 0.5))


def encode_axis(coord: float, n_bins: int, k: float, sigma: float, one_hot: bool = False) -> np.ndarray:
    c = min(center_bin(coord, k), n_bins - 1)
    if one_hot:
        out = np.zeros(n_bins)
        out[c] = 1.0
        return out
    j = np.arange(n_bins, dtype=np.float64)
    g = np.exp(-((j - c) ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def encode_targets(gt: PoseInstance, cfg: SimCCConfig, one_hot: bool = False) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-keypoint normalised Gaussian targets over x and y bins, plus a visibility mask."""
    nk = gt.num_keypoints
    tx = np.zeros((nk, cfg.x_bins))
    ty = np.zeros((nk, cfg.y_bins))
    mask = np.zeros(nk)
    for i, ((x, y), v) in enumerate(zip(gt.coords, gt.visibility)):
        if v <= 0:
            continue
        if not (0 <= x < cfg.input_w and 0 <= y < cfg.input_h):
            raise ValueError(f"visible keypoint {i} at ({x:.3f}, {y:.3f}) lies outside the {cfg.input_w}x{cfg.input_h} crop")
        tx[i] = encode_axis(x, cfg.x_bins, cfg.k, cfg.sigma, one_hot)
        ty[i] = encode_axis(y, cfg.y_bins, cfg.k, cfg.sigma, one_hot)
        mask[i] = 1.0
    return tx, ty, mask


def decode_axis(logits: np.ndarray, k: float) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinates ``argmax / k`` (lowest index wins ties) and softmax peak probability."""
    idx = np.argmax(logits, axis=-1)
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    conf = np.take_along_axis(p, idx[..., None], axis=-1)[..., 0]
    return idx / k, conf


def decode_coords(x_logits: np.ndarray, y_logits: np.ndarray, cfg: SimCCConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (..., N, 2) coordinates and (..., N) confidences (mean of the two axes)."""
    x, cx = decode_axis(np.asarray(x_logits), cfg.k)
    y, cy = decode_axis(np.asarray(y_logits), cfg.k)
    return np.stack([x, y], axis=-1), 0.5 * (cx + cy)


class LossStats:
    empty_batches = 0


def simcc_loss(x_logits: Tensor, y_logits: Tensor, tx: np.ndarray, ty: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean KL(target || softmax(logits)) over visible keypoints and both axes."""
    mask = np.asarray(mask, dtype=x_logits.dtype)
    if mask.shape != x_logits.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match logits {x_logits.shape[:-1]}")
    visible = float(mask.sum())
    if visible == 0:
        LossStats.empty_batches += 1
        logger.warning("simcc_loss: batch has no visible keypoints; loss defined as zero")
        return T.mul(T.sum_(x_logits), 0.0)
    total = None
    for logits, target in ((x_logits, tx), (y_logits, ty)):
        target = np.asarray(target, dtype=logits.dtype)
        # constant part sum p log p keeps the value a true KL divergence
        with np.errstate(divide="ignore", invalid="ignore"):
            entropy_term = np.where(target > 0, target * np.log(np.where(target > 0, target, 1.0)), 0.0).sum(axis=-1)
        weighted = T.mul(T.log_softmax_last(logits), target * mask[..., None])
        kl = T.sub(float((entropy_term * mask).sum()), T.sum_(weighted))
        total = kl if total is None else total + kl
    return total * (1.0 / (2.0 * visible))


def quantization_sweep(k: float, extent: int = 64, step: float = 0.01, sigma: float = 6.0) -> dict:
    """Round-trip error ``|decode(encode(x)) - x|`` on the grid ``x = m * step`` over ``[0, extent)``.

    With ``extent * k`` bins the last bin centre is ``extent - 1/k``, so the
    ``1/(2k)`` bound only holds up to ``extent - 1/(2k)``. ``max_err`` covers
    that representable range; ``max_err_full_range`` includes the clamped tail.
    """
    n_bins = int(round(extent * k))
    if abs(n_bins - extent * k) > 1e-9:
        raise ValueError(f"extent*k = {extent * k} is not an integer bin count")
    n = int(round(extent / step))
    xs = np.arange(n) * step
    targets = np.stack([encode_axis(x, n_bins, k, sigma) for x in xs])
    decoded, _ = decode_axis(targets, k)
    err = np.abs(decoded - xs)
    inside = xs <= extent - 1.0 / (2.0 * k) + 1e-12
    return {
        "k": k,
        "bound": 1.0 / (2.0 * k),
        "n_points": int(inside.sum()),
        "max_err": float(err[inside].max()),
        "mean_err": float(err[inside].mean()),
        "max_err_full_range": float(err.max()),
    }
