"""HRPVT assembly: HRPM v1 stem, PVT v2 stages with HRPM v2 insertions, SimCC head."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .backbone import Stage, run_stage
from .config import ModelConfig
from .hrpm import HRPMv1, HRPMv2
from .nn import Conv2d, Module, ModuleList, count_params as _count, load_arrays, param_breakdown, state_arrays
from .simcc import PoseInstance, SimCCHead, decode_coords
from .tensor import Tensor

MAGIC = b"HRPVTW01"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    pass


class HRPVT(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype).type
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        dims = [s.dim for s in cfg.stages]
        use_v1 = cfg.strategy != "none" and cfg.hrpm_v1.enabled
        self.stem = HRPMv1(3, dims[0], cfg.hrpm_v1, rng, dtype) if use_v1 else None

        stages = []
        for i, scfg in enumerate(cfg.stages):
            if i == 0:
                stages.append(Stage(scfg, 3, 4, rng, use_embed=not use_v1, form=cfg.layer_form, dtype=dtype))
            else:
                stages.append(Stage(scfg, dims[i - 1], 2, rng, form=cfg.layer_form, dtype=dtype))
        self.stages = ModuleList(stages)

        self.sites: List[Tuple[str, int]] = insertion_sites(cfg)
        self.inserts = ModuleList(
            HRPMv2(dims[0] if kind == "layer" else dims[idx], cfg.hrpm_v2, rng, dtype) for kind, idx in self.sites
        )
        self.head_proj = Conv2d(dims[3], cfg.simcc.num_keypoints, 1, rng, dtype=dtype)
        h4, w4 = cfg.simcc.input_h // 32, cfg.simcc.input_w // 32
        self.head = SimCCHead(h4 * w4, cfg.simcc, rng, dtype)
        self.last_shapes: Dict[str, tuple] = {}

    def _insert(self, kind: str, idx: int) -> Optional[HRPMv2]:
        for (k, i), m in zip(self.sites, self.inserts):
            if k == kind and i == idx:
                return m
        return None

    def _layer_hook(self, shapes: Dict[str, tuple]):
        """Stage-1 callback that routes tokens through an HRPM v2 as a feature map."""

        def hook(j, s, h, w):
            out = self._insert("layer", j)(T.seq2img(s, h, w))
            shapes[f"insert.layer{j}"] = out.shape
            return T.img2seq(out)

        return hook

    def features(self, x: Tensor) -> List[Tensor]:
        """Feature maps f1..f4 after any HRPM v2 insertions."""
        shapes: Dict[str, tuple] = {}
        f = x
        if self.stem is not None:
            f = self.stem(x)
            shapes["hrpm_v1"] = f.shape
        feats = []
        for i, stage in enumerate(self.stages):
            layer_hook = self._layer_hook(shapes) if i == 0 and any(k == "layer" for k, _ in self.sites) else None
            _, f = run_stage(self.stages[i], f, layer_hook)
            shapes[f"f{i + 1}.stage"] = f.shape
            block = self._insert("stage", i)
            if block is not None:
                f = block(f)
                shapes[f"insert.stage{i}"] = f.shape
            shapes[f"f{i + 1}"] = f.shape
            feats.append(f)
        self.last_shapes = shapes
        return feats

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        f4 = self.features(x)[-1]
        return self.head(self.head_proj(f4))


def insertion_sites(cfg: ModelConfig) -> List[Tuple[str, int]]:
    """Where HRPM v2 blocks go: ("layer", j) after stage-1 layer j, ("stage", i) after stage i."""
    if cfg.strategy == "none":
        return []
    if cfg.strategy == "vanilla":
        return [("stage", 0)]
    if cfg.strategy == "layer_wise":
        return [("layer", j) for j in range(cfg.stages[0].depth)]
    last = 4 if cfg.stage_wise_includes_last else 3
    return [("stage", i) for i in range(last)]


def build_model(cfg: ModelConfig) -> HRPVT:
    return HRPVT(cfg)


def _as_input(images, model: HRPVT) -> Tensor:
    if isinstance(images, Tensor):
        return images if images.dtype == model.dtype else Tensor(images.data, dtype=model.dtype)
    return Tensor(np.asarray(images), dtype=model.dtype)


def forward_pose(model: HRPVT, images, areas=None) -> Tuple[np.ndarray, np.ndarray, List[PoseInstance]]:
    """Full forward pass and SimCC decoding; returns logits and one PoseInstance per image."""
    x = _as_input(images, model)
    cfg = model.cfg.simcc
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.input_h or x.shape[3] != cfg.input_w:
        raise ValueError(f"forward_pose: images {x.shape} do not match configured crop (N, 3, {cfg.input_h}, {cfg.input_w})")
    xl, yl = model(x)
    coords, conf = decode_coords(xl.data, yl.data, cfg)
    poses = []
    for b in range(coords.shape[0]):
        area = float(areas[b]) if areas is not None else float(cfg.input_w * cfg.input_h)
        poses.append(
            PoseInstance(
                coords[b], np.full(cfg.num_keypoints, 2), area=area,
                score=float(conf[b].mean()), confidences=conf[b],
            )
        )
    return xl.data, yl.data, poses


def count_params(model: Module) -> Tuple[int, Dict[str, int]]:
    return _count(model), param_breakdown(model, depth=2)


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------


def save_weights(model: HRPVT, path) -> None:
    """Write ``MAGIC | u64 manifest length | UTF-8 JSON manifest | raw LE blobs``.

    The file is written to a temporary sibling and renamed, so an interrupted
    save never leaves a partial file at ``path``.
    """
    arrays = state_arrays(model)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format_version": FORMAT_VERSION, "config": model.cfg.to_dict(), "tensors": entries}).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_weight_file(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise WeightFileError(f"{path}: bad magic header (expected {MAGIC.decode()})")
    (mlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + mlen > len(data):
        raise WeightFileError(f"{path}: truncated manifest: needs bytes [{start}, {start + mlen}) but file ends at byte {len(data)}")
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"{path}: unreadable manifest: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    base = start + mlen
    arrays = {}
    for entry in manifest["tensors"]:
        lo = base + entry["offset"]
        hi = lo + entry["length"]
        if hi > len(data):
            raise WeightFileError(
                f"{path}: truncated blob for tensor {entry['name']!r}: needs bytes [{lo}, {hi}) but file ends at byte {len(data)}"
            )
        dtype = np.dtype(entry["dtype"])
        expected = int(np.prod(entry["shape"])) * dtype.itemsize
        if entry["length"] != expected:
            raise WeightFileError(f"{path}: tensor {entry['name']!r} has {entry['length']} bytes, shape implies {expected}")
        arrays[entry["name"]] = np.frombuffer(data[lo:hi], dtype=dtype).reshape(entry["shape"])
    return manifest, arrays


def load_weights(path, cfg: Optional[ModelConfig] = None) -> HRPVT:
    """Rebuild a model from a weight file; ``cfg`` (if given) must produce identical tensor shapes."""
    manifest, arrays = read_weight_file(path)
    stored = ModelConfig.from_dict(manifest["config"])
    model = build_model(cfg if cfg is not None else stored)
    expected = state_arrays(model)
    for name, arr in arrays.items():
        if name not in expected:
            raise WeightFileError(f"{path}: tensor {name!r} is not part of the configured model")
        if tuple(expected[name].shape) != arr.shape:
            raise WeightFileError(f"{path}: tensor {name!r} has shape {arr.shape}, configured model expects {tuple(expected[name].shape)}")
    missing = [n for n in expected if n not in arrays]
    if missing:
        raise WeightFileError(f"{path}: missing tensor {missing[0]!r}")
    load_arrays(model, {k: v.astype(expected[k].dtype) for k, v in arrays.items()})
    return model
