"""Synthetic person crops, COCO-keypoint JSON interchange and augmentation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .config import AugmentConfig, SceneSpec
from .simcc import PoseInstance

KEYPOINT_NAMES = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
]
FLIP_PAIRS = [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)]
# zero-based limb graph of the 17-keypoint skeleton
LIMBS = [
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12), (5, 6),
    (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2), (1, 3), (2, 4),
]

# standard per-keypoint sigmas of the 17-keypoint COCO evaluation
COCO_SIGMAS = np.array(
    [0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89]
) / 10.0

MEAN, STD = 0.5, 0.25


class DataError(ValueError):
    pass


def flip_permutation(n: int = 17, pairs: Sequence[Tuple[int, int]] = FLIP_PAIRS) -> np.ndarray:
    perm = np.arange(n)
    for a, b in pairs:
        perm[a], perm[b] = b, a
    if not np.array_equal(perm[perm], np.arange(n)):
        raise ValueError("flip pairs do not form an involution")
    return perm


@dataclass
class Sample:
    image_id: int
    image: np.ndarray  # (H, W, 3) uint8
    pose: PoseInstance
    bbox: Tuple[float, float, float, float]
    file_name: str = ""

    @property
    def area(self) -> float:
        return self.pose.area

    @property
    def head_size(self) -> Optional[float]:
        return self.pose.head_size


def to_input(images: Sequence[np.ndarray], dtype=np.float64) -> np.ndarray:
    """Stack HxWx3 uint8 crops into a normalised (N, 3, H, W) array."""
    arr = np.stack([np.asarray(im) for im in images]).astype(dtype) / 255.0
    return ((arr - MEAN) / STD).transpose(0, 3, 1, 2).copy()


# ---------------------------------------------------------------------------
# synthetic stick figures
# ---------------------------------------------------------------------------

# body-frame template (y down, pelvis centre at origin, unit ~ standing height)
_TORSO = 0.32
_HEAD_R = 0.06
_SEGMENTS = {"upper_arm": 0.15, "forearm": 0.14, "thigh": 0.23, "shin": 0.21}

_LIMB_COLORS = np.array(
    [
        [230, 60, 60], [230, 120, 60], [60, 90, 230], [60, 170, 230], [200, 200, 60], [230, 60, 170], [90, 60, 230],
        [240, 240, 240], [230, 60, 60], [60, 90, 230], [250, 150, 40], [40, 200, 250], [60, 230, 90], [60, 230, 90],
        [60, 230, 90], [180, 230, 60], [60, 230, 180],
    ],
    dtype=np.float64,
)
_JOINT_COLORS = (np.stack(
    [np.linspace(40, 250, 17), np.abs(np.linspace(250, -250, 17)), np.linspace(250, 40, 17)], axis=1
) % 256).astype(np.float64)


def _skeleton(rng: np.random.Generator, jitter_deg: float) -> Tuple[np.ndarray, float]:
    """Keypoints in the body frame for one random pose."""
    j = math.radians(jitter_deg)
    kp = np.zeros((17, 2))
    kp[11], kp[12] = (0.09, 0.0), (-0.09, 0.0)  # left side on +x (figure faces the viewer)
    kp[5], kp[6] = (0.13, -_TORSO), (-0.13, -_TORSO)
    neck = np.array([0.0, -_TORSO])
    head_c = neck + (0.0, -0.11)
    kp[0] = head_c + (0.0, 0.015)
    kp[1], kp[2] = head_c + (0.025, -0.01), head_c + (-0.025, -0.01)
    kp[3], kp[4] = head_c + (0.05, 0.0), head_c + (-0.05, 0.0)

    def chain(start, base_angle, lengths, bends):
        pts, a, p = [], base_angle, np.asarray(start, dtype=float)
        for length, bend in zip(lengths, bends):
            a = a + bend
            p = p + length * np.array([math.sin(a), math.cos(a)])
            pts.append(p)
        return pts

    for side, sgn in ((0, 1.0), (1, -1.0)):
        sh = kp[5 + side]
        arm = chain(sh, sgn * (0.35 + rng.uniform(-2 * j, 2 * j)), [_SEGMENTS["upper_arm"], _SEGMENTS["forearm"]],
                    [0.0, sgn * rng.uniform(-j, 2 * j)])
        kp[7 + side], kp[9 + side] = arm
        hip = kp[11 + side]
        leg = chain(hip, sgn * (0.12 + rng.uniform(-j, j) * 0.6), [_SEGMENTS["thigh"], _SEGMENTS["shin"]],
                    [0.0, -sgn * rng.uniform(0, j)])
        kp[13 + side], kp[15 + side] = leg
    theta = rng.uniform(-j, j) * 0.5
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    return kp @ rot.T, _HEAD_R


def _segment_alpha(px, py, a, b, half_width):
    ab = b - a
    denom = float(ab @ ab) or 1e-12
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    d = np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))
    return np.clip(half_width + 0.5 - d, 0.0, 1.0)


def _background(rng: np.random.Generator, h: int, w: int, noise: float) -> np.ndarray:
    base = rng.uniform(40, 110, size=3)
    coarse = rng.standard_normal((max(h // 8, 2), max(w // 8, 2), 3))
    smooth = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1), order=1)[:h, :w]
    fine = rng.standard_normal((h, w, 3))
    return base + 255.0 * noise * (smooth + 0.3 * fine)


def render_figure(rng: np.random.Generator, spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray, float, Tuple[float, float, float, float], float]:
    """One crop: (image uint8, keypoints (17, 2), area, bbox xywh, head size)."""
    h, w = spec.canvas_h, spec.canvas_w
    body, head_r = _skeleton(rng, spec.angle_jitter)
    scale = rng.uniform(*spec.scale_range) * h
    pts = body * scale
    head_c = (pts[3] + pts[4]) / 2.0
    radius = head_r * scale
    half = max(0.9, 0.02 * scale)
    lo = np.minimum(pts.min(axis=0), head_c - radius) - half - 1.0
    hi = np.maximum(pts.max(axis=0), head_c + radius) + half + 1.0
    extent = hi - lo
    if extent[0] >= w or extent[1] >= h:
        raise DataError(f"infeasible scene: figure extent {extent[0]:.1f}x{extent[1]:.1f} exceeds canvas {w}x{h}")
    shift = np.array([rng.uniform(-lo[0], w - hi[0]), rng.uniform(-lo[1], h - hi[1])])
    pts = pts + shift
    head_c = head_c + shift

    img = _background(rng, h, w, spec.noise)
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w))
    for li, (a, b) in enumerate(LIMBS):
        alpha = _segment_alpha(px, py, pts[a], pts[b], half)[..., None]
        img = img * (1 - alpha) + _LIMB_COLORS[li] * alpha
        mask = np.maximum(mask, alpha[..., 0])
    head_alpha = np.clip(radius + 0.5 - np.hypot(px - head_c[0], py - head_c[1]), 0, 1)
    img = img * (1 - 0.5 * head_alpha[..., None]) + 0.5 * head_alpha[..., None] * np.array([250.0, 210.0, 170.0])
    mask = np.maximum(mask, head_alpha)
    for k in range(17):
        alpha = np.clip(half + 0.8 - np.hypot(px - pts[k, 0], py - pts[k, 1]), 0, 1)[..., None]
        img = img * (1 - alpha) + _JOINT_COLORS[k] * alpha
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    ys, xs = np.nonzero(mask > 0)
    x0, y0, x1, y1 = xs.min(), ys.min(), xs.max() + 1, ys.max() + 1
    bbox = (float(x0), float(y0), float(x1 - x0), float(y1 - y0))
    area = bbox[2] * bbox[3]
    return image, pts, area, bbox, 2.0 * radius


def gen_synthetic(spec: SceneSpec, count: int) -> List[Sample]:
    """Deterministic (per ``spec.seed``) list of rendered crops with exact labels."""
    problems = spec.problems()
    if problems:
        raise DataError("; ".join(problems))
    rng = np.random.default_rng(spec.seed)
    out = []
    for i in range(count):
        image, pts, area, bbox, head = render_figure(rng, spec)
        pose = PoseInstance(pts, np.full(17, 2), area=area, head_size=head)
        out.append(Sample(image_id=i + 1, image=image, pose=pose, bbox=bbox, file_name=f"{i + 1:06d}.png"))
    return out


# ---------------------------------------------------------------------------
# COCO keypoint JSON
# ---------------------------------------------------------------------------


def _flat_keypoints(pose: PoseInstance) -> List[float]:
    out: List[float] = []
    for (x, y), v in zip(pose.coords, pose.visibility):
        out += [float(x), float(y), int(v)]
    return out


def coco_document(samples: Sequence[Sample], width: int, height: int) -> dict:
    images, anns = [], []
    for s in samples:
        images.append({"id": s.image_id, "file_name": s.file_name, "width": width, "height": height})
        ann = {
            "id": s.image_id,
            "image_id": s.image_id,
            "category_id": 1,
            "keypoints": _flat_keypoints(s.pose),
            "num_keypoints": int((s.pose.visibility > 0).sum()),
            "area": float(s.pose.area),
            "bbox": [float(v) for v in s.bbox],
            "iscrowd": 0,
        }
        if s.pose.head_size is not None:
            ann["head_size"] = float(s.pose.head_size)
        anns.append(ann)
    skeleton = [[a + 1, b + 1] for a, b in LIMBS]
    return {
        "images": images,
        "annotations": anns,
        "categories": [{"id": 1, "name": "person", "keypoints": KEYPOINT_NAMES, "skeleton": skeleton}],
    }


def write_dataset(samples: Sequence[Sample], out_dir, width: int, height: int) -> Path:
    """PNG crops under ``out_dir/images`` plus ``out_dir/annotations.json``."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(s.image).save(out_dir / "images" / s.file_name)
    path = out_dir / "annotations.json"
    path.write_text(json.dumps(coco_document(samples, width, height)))
    return path


def _require(rec: dict, keys: Sequence[str], where: str) -> None:
    for k in keys:
        if k not in rec:
            raise DataError(f"{where}: missing required field {k!r}")


def _parse_keypoints(flat, n_kp: Optional[int], where: str) -> Tuple[np.ndarray, np.ndarray]:
    if not isinstance(flat, list) or len(flat) % 3 or (n_kp is not None and len(flat) != 3 * n_kp):
        expected = f"3*{n_kp}" if n_kp is not None else "a multiple of 3"
        length = len(flat) if isinstance(flat, list) else "non-list"
        raise DataError(f"{where}: keypoints has length {length}, expected {expected}")
    arr = np.asarray(flat, dtype=np.float64).reshape(-1, 3)
    vis = arr[:, 2].astype(np.int64)
    if np.any((vis < 0) | (vis > 2)) or np.any(arr[:, 2] != vis):
        raise DataError(f"{where}: visibility flags must be 0, 1 or 2")
    return arr[:, :2].copy(), vis


@dataclass
class CocoDataset:
    images: Dict[int, dict]
    annotations: List[dict]
    poses: Dict[int, List[PoseInstance]]
    ann_poses: List[PoseInstance]
    num_keypoints: int
    root: Optional[Path] = None

    def image_path(self, image_id: int) -> Path:
        return (self.root or Path(".")) / "images" / self.images[image_id]["file_name"]

    def load_samples(self) -> List[Sample]:
        from PIL import Image

        out = []
        for ann, pose in zip(self.annotations, self.ann_poses):
            img = np.asarray(Image.open(self.image_path(ann["image_id"])).convert("RGB"))
            out.append(Sample(ann["image_id"], img, pose, tuple(ann["bbox"]), self.images[ann["image_id"]]["file_name"]))
        return out


def load_coco_json(path, num_keypoints: Optional[int] = None) -> CocoDataset:
    """Parse a COCO keypoint annotation file (images + annotations)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict):
        raise DataError(f"{path}: expected an object with 'images' and 'annotations'")
    _require(doc, ["images", "annotations"], str(path))
    if num_keypoints is None and doc.get("categories"):
        names = doc["categories"][0].get("keypoints")
        num_keypoints = len(names) if names else None
    images = {}
    for i, im in enumerate(doc["images"]):
        _require(im, ["id", "file_name"], f"images[{i}]")
        images[im["id"]] = im
    poses: Dict[int, List[PoseInstance]] = {}
    anns, ann_poses = [], []
    for i, ann in enumerate(doc["annotations"]):
        where = f"annotations[{i}]"
        _require(ann, ["id", "image_id", "keypoints", "area", "bbox"], where)
        coords, vis = _parse_keypoints(ann["keypoints"], num_keypoints, where)
        if num_keypoints is None:
            num_keypoints = len(vis)
        if ann["image_id"] not in images:
            raise DataError(f"{where}: image_id {ann['image_id']} not listed in images")
        if float(ann["area"]) <= 0:
            raise DataError(f"{where}: area must be positive")
        pose = PoseInstance(coords, vis, area=float(ann["area"]), head_size=ann.get("head_size"))
        poses.setdefault(ann["image_id"], []).append(pose)
        anns.append(ann)
        ann_poses.append(pose)
    return CocoDataset(images, anns, poses, ann_poses, num_keypoints or 0, root=path.parent)


def load_results(path, num_keypoints: Optional[int] = None) -> Dict[int, List[PoseInstance]]:
    """Parse a COCO results list ``[{image_id, keypoints, score, ...}]`` grouped by image."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise DataError(f"{path}: results must be a list")
    out: Dict[int, List[PoseInstance]] = {}
    for i, rec in enumerate(doc):
        where = f"results[{i}]"
        _require(rec, ["image_id", "keypoints", "score"], where)
        coords, vis = _parse_keypoints(rec["keypoints"], num_keypoints, where)
        pose = PoseInstance(coords, vis, area=float(rec.get("area", 1.0)), score=float(rec["score"]))
        out.setdefault(rec["image_id"], []).append(pose)
    return out


def results_document(preds: Dict[int, List[PoseInstance]]) -> List[dict]:
    out = []
    for image_id in sorted(preds):
        for p in preds[image_id]:
            out.append({
                "image_id": image_id, "category_id": 1, "keypoints": _flat_keypoints(p),
                "score": float(p.score), "area": float(p.area),
            })
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def affine_matrix(width: int, height: int, flip: bool, scale: float, angle_deg: float) -> np.ndarray:
    """3x3 map from source to augmented pixel coordinates (pixel centres at integers).

    Flip mirrors ``x -> W-1-x``; scale and rotation act about the crop centre.
    """
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    m = np.eye(3)
    if flip:
        m = np.array([[-1.0, 0.0, width - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ m
    a = math.radians(angle_deg)
    rs = np.array([[scale * math.cos(a), -scale * math.sin(a), 0.0], [scale * math.sin(a), scale * math.cos(a), 0.0], [0, 0, 1.0]])
    to_c = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    from_c = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
    return from_c @ rs @ to_c @ m


def transform_pose(pose: PoseInstance, m: np.ndarray, width: int, height: int, flip: bool, perm: Optional[np.ndarray] = None) -> PoseInstance:
    pts = np.c_[pose.coords, np.ones(len(pose.coords))] @ m.T
    coords = pts[:, :2]
    vis = pose.visibility.copy()
    if flip:
        perm = flip_permutation(len(coords)) if perm is None else perm
        coords, vis = coords[perm], vis[perm]
    inside = (coords[:, 0] >= 0) & (coords[:, 0] < width) & (coords[:, 1] >= 0) & (coords[:, 1] < height)
    vis = np.where(inside, vis, 0)
    return PoseInstance(coords, vis, area=pose.area * float(abs(np.linalg.det(m[:2, :2]))), head_size=None if pose.head_size is None else pose.head_size * math.sqrt(abs(np.linalg.det(m[:2, :2]))))


def warp_image(image: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Bilinear resampling of an HxWxC image under the source->target map ``m``."""
    inv = np.linalg.inv(m)
    # ndimage works in (row, col) = (y, x) order and maps output -> input
    swap = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1.0]])
    rc = swap @ inv @ swap
    out = np.empty(image.shape, dtype=np.float64)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.affine_transform(
            image[..., c].astype(np.float64), rc[:2, :2], offset=rc[:2, 2], order=1, mode="constant", cval=0.0
        )
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def augment(image: np.ndarray, pose: PoseInstance, cfg: AugmentConfig, rng: np.random.Generator) -> Tuple[np.ndarray, PoseInstance]:
    """Random horizontal flip, scale and rotation about the crop centre."""
    if not cfg.enabled:
        return image, pose
    h, w = image.shape[:2]
    flip = bool(cfg.flip and rng.random() < 0.5)
    scale = float(rng.uniform(*cfg.scale))
    angle = float(rng.uniform(*cfg.rotation))
    m = affine_matrix(w, h, flip, scale, angle)
    return warp_image(image, m), transform_pose(pose, m, w, h, flip)
