"""Command-line entry point: ``hrpvt <subcommand> ...``.

Failures print one line ``error: <kind>: <message>`` to stderr and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics as M
from .config import AugmentConfig, ConfigError, DataConfig, HDCConfig, ModelConfig, RunConfig, SceneSpec, dump_json, load_run_config
from .data import KEYPOINT_NAMES, DataError, gen_synthetic, load_coco_json, load_results, results_document, to_input, write_dataset
from .model import WeightFileError, build_model, count_params, forward_pose, load_weights
from .simcc import PoseInstance, quantization_sweep

logger = logging.getLogger("hrpvt")


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _write_csv(path, header: Sequence[str], rows: Sequence[Dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def _figure_path(out, suffix: str = ".png") -> Path:
    out = Path(out)
    return out.with_suffix(suffix)


# ---------------------------------------------------------------------------
# train / predict / eval
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .plotting import plot_history
    from .train import train

    run = load_run_config(args.config)
    if args.seed is not None:
        run.seed = args.seed
        run.model.seed = args.seed
    if args.output_dir:
        run.output_dir = args.output_dir
    result = train(run, on_epoch=lambda r: print(json.dumps(r)))
    out = Path(run.output_dir)
    _write_csv(out / "history.csv", ["epoch", "step", "lr", "loss", "train_pck@0.1"], result.history)
    plot_history(result.history, out / "history.png")
    print(json.dumps({"checkpoint": str(result.checkpoint), **result.final}))
    return 0


def predict_images(model, images: List[np.ndarray], areas: Optional[Sequence[float]] = None, batch: int = 16) -> List[PoseInstance]:
    model.eval()
    poses: List[PoseInstance] = []
    for i in range(0, len(images), batch):
        chunk = images[i : i + batch]
        a = None if areas is None else areas[i : i + batch]
        poses += forward_pose(model, to_input(chunk, model.dtype), a)[2]
    return poses


def _read_image_dir(path: Path):
    from PIL import Image

    ann = path / "annotations.json"
    if not ann.exists() and path.name == "images":
        ann = path.parent / "annotations.json"
    ids = {}
    if ann.exists():
        ds = load_coco_json(ann)
        ids = {im["file_name"]: i for i, im in ds.images.items()}
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise CLIError("data", f"no images found in {path}")
    out = []
    for n, f in enumerate(files):
        out.append((ids.get(f.name, n + 1), np.asarray(Image.open(f).convert("RGB"))))
    return out


def cmd_predict(args) -> int:
    model = load_weights(args.weights)
    items = _read_image_dir(Path(args.images))
    poses = predict_images(model, [im for _, im in items])
    doc = results_document({iid: [p] for (iid, _), p in zip(items, poses)})
    Path(args.out).write_text(json.dumps(doc))
    print(json.dumps({"predictions": len(doc), "out": args.out}))
    return 0


def cmd_eval(args) -> int:
    data = Path(args.data)
    ann = data / "annotations.json" if data.is_dir() else data
    ds = load_coco_json(ann)
    if args.preds:
        preds = load_results(args.preds, ds.num_keypoints)
    else:
        model = load_weights(args.weights)
        samples = ds.load_samples()
        poses = predict_images(model, [s.image for s in samples], [s.pose.area for s in samples])
        preds = {}
        for s, p in zip(samples, poses):
            preds.setdefault(s.image_id, []).append(p)
    per_joint = None
    if args.metric == "oks":
        records = [M.EvalRecord(iid, gts, preds.get(iid, [])) for iid, gts in sorted(ds.poses.items())]
        result = M.evaluate_ap_ar(records, M.OKSParams(), workers=M.worker_count())
    else:
        gts, ps = [], []
        for iid, g in sorted(ds.poses.items()):
            p = preds.get(iid, [])
            if len(p) != len(g):
                raise CLIError("data", f"image {iid}: {len(g)} ground truths but {len(p)} predictions (PCKh needs one per instance)")
            gts += g
            ps += p
        per_joint, mean = M.pckh(gts, ps, args.alpha)
        result = {f"PCKh@{args.alpha:g}": mean}
    print(json.dumps(result))
    if args.report:
        report = Path(args.report)
        report.parent.mkdir(parents=True, exist_ok=True)
        payload = dict(result)
        if per_joint is not None:
            payload["per_joint"] = {n: (None if np.isnan(v) else float(v)) for n, v in zip(KEYPOINT_NAMES, per_joint)}
        report.write_text(json.dumps(payload, indent=2) + "\n")
        M.write_metrics(result, csv_path=report.with_suffix(".csv"))
        from .plotting import plot_metrics

        plot_metrics(result, _figure_path(report), per_joint if per_joint is not None else (), KEYPOINT_NAMES)
    return 0


# ---------------------------------------------------------------------------
# verification and reporting
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .gradsuite import full_model_check, run_cases, suite

    results = run_cases(suite(args.module, args.seed), args.tol)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}\t{r.group}\t{r.name}\t{r.error:.3e}")
    if args.module == "all" and not args.skip_model:
        err = full_model_check(n_weights=args.weights, seed=args.seed)
        ok = err <= args.model_tol
        failed += not ok
        print(f"{'ok' if ok else 'FAIL'}\tmodel\tfull_model.{args.weights}_weights\t{err:.3e}")
    if failed:
        raise CLIError("gradcheck", f"{failed} gradient check(s) exceeded tolerance")
    return 0


def _parse_list(text: str, conv=float) -> list:
    try:
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CLIError("usage", f"cannot parse list {text!r}") from None


def cmd_simcc_sweep(args) -> int:
    from .plotting import plot_sweep

    rows = [quantization_sweep(k, args.extent, args.step, args.sigma) for k in _parse_list(args.k)]
    header = ["k", "bound", "n_points", "max_err", "mean_err", "max_err_full_range"]
    _write_csv(args.out, header, rows)
    plot_sweep(rows, _figure_path(args.out))
    for r in rows:
        print(",".join(repr(r[h]) for h in header))
    return 0


def _ablation_config(base: ModelConfig, axis: str, value: str, target: str) -> ModelConfig:
    cfg = copy.deepcopy(base)
    if axis == "strategy":
        cfg.strategy = value
        return cfg.validate()
    field = "depth" if axis == "hdc-depth" else "width"
    try:
        n = int(value)
    except ValueError:
        raise CLIError("usage", f"{axis} values must be integers, got {value!r}") from None
    blocks = {"v1": [cfg.hrpm_v1], "v2": [cfg.hrpm_v2], "both": [cfg.hrpm_v1, cfg.hrpm_v2]}[target]
    for b in blocks:
        setattr(b, field, n)
    return cfg.validate()


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation
    from .train import evaluate_samples, train

    base = ModelConfig(strategy=args.strategy, layer_form=args.layer_form, dtype=args.dtype, seed=args.seed)
    base.stages[0].depth = args.stage1_depth
    base.hrpm_v1 = HDCConfig(depth=args.hdc_v1_depth, width=args.hdc_v1_width, mode=args.hdc_mode)
    base.hrpm_v2 = HDCConfig(depth=args.hdc_v2_depth, width=args.hdc_v2_width, mode=args.hdc_mode, merge="sum")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise CLIError("usage", "--values is empty")
    samples = None
    rows = []
    for value in values:
        cfg = _ablation_config(base, args.axis, value, args.hdc_target)
        model = build_model(cfg)
        total, _ = count_params(model)
        row = {"axis": args.axis, "value": value, "params": total, "insertions": len(model.inserts)}
        if args.epochs > 0:
            if samples is None:
                samples = gen_synthetic(SceneSpec(canvas_w=cfg.simcc.input_w, canvas_h=cfg.simcc.input_h, seed=args.seed), args.count)
            run = RunConfig(model=cfg, epochs=args.epochs, batch_size=args.batch_size, augment=AugmentConfig(enabled=False), seed=args.seed,
                            data=DataConfig(count=args.count, scene=SceneSpec(canvas_w=cfg.simcc.input_w, canvas_h=cfg.simcc.input_h, seed=args.seed)))
            res = train(run, samples=samples, write=False)
            row.update({"final_loss": res.history[-1]["loss"], **evaluate_samples(res.model, samples)})
        rows.append(row)
        print(json.dumps(row))
    header = ["axis", "value", "params", "insertions"] + (["final_loss", "mean_error_px", "pck@0.1", "pck@0.05"] if args.epochs > 0 else [])
    _write_csv(args.out, header, rows)
    plot_ablation(rows, args.axis, _figure_path(args.out))
    return 0


def cmd_gen_data(args) -> int:
    spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    samples = gen_synthetic(spec, args.count)
    path = write_dataset(samples, args.out, spec.canvas_w, spec.canvas_h)
    print(json.dumps({"count": len(samples), "annotations": str(path)}))
    return 0


def cmd_init_config(args) -> int:
    run = RunConfig()
    if args.epochs is not None:
        run.epochs = args.epochs
    dump_json(run.to_dict(), args.out)
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrpvt", description="HRPVT pose estimation: training, evaluation and verification tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score predictions against COCO-format ground truth")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights")
    src.add_argument("--preds", help="COCO results JSON instead of running a model")
    e.add_argument("--data", required=True, help="dataset directory or annotations JSON")
    e.add_argument("--metric", choices=["oks", "pckh"], default="oks")
    e.add_argument("--alpha", type=float, default=0.5, help="PCKh threshold")
    e.add_argument("--report", help="write JSON (plus .csv and .png siblings)")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="run a checkpoint over a directory of crops")
    pr.add_argument("--weights", required=True)
    pr.add_argument("--images", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="autodiff vs central differences")
    g.add_argument("--module", choices=["all", "tensor", "backbone", "hrpm", "head"], default="all")
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--model-tol", type=float, default=1e-3)
    g.add_argument("--weights", type=int, default=50, help="sampled weights for the full-model check")
    g.add_argument("--skip-model", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("simcc-sweep", help="SimCC round-trip quantisation error per K")
    s.add_argument("--k", default="2,4,6")
    s.add_argument("--out", required=True)
    s.add_argument("--extent", type=int, default=64)
    s.add_argument("--step", type=float, default=0.01)
    s.add_argument("--sigma", type=float, default=6.0)
    s.set_defaults(func=cmd_simcc_sweep)

    a = sub.add_parser("ablate", help="parameter count (and optional short training) per setting")
    a.add_argument("--axis", choices=["hdc-depth", "hdc-width", "strategy"], required=True)
    a.add_argument("--values", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--strategy", choices=["none", "vanilla", "layer_wise", "stage_wise"], default="vanilla")
    a.add_argument("--hdc-v1-depth", type=int, default=6)
    a.add_argument("--hdc-v1-width", type=int, default=16)
    a.add_argument("--hdc-v2-depth", type=int, default=3)
    a.add_argument("--hdc-v2-width", type=int, default=32)
    a.add_argument("--hdc-mode", choices=["chain", "parallel"], default="chain")
    a.add_argument("--hdc-target", choices=["v1", "v2", "both"], default="both", help="which HRPM the hdc axes vary")
    a.add_argument("--stage1-depth", type=int, default=1)
    a.add_argument("--layer-form", choices=["standard", "literal"], default="standard")
    a.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    a.add_argument("--epochs", type=int, default=0, help="train each variant this many epochs (0: count only)")
    a.add_argument("--count", type=int, default=16)
    a.add_argument("--batch-size", type=int, default=16)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("gen-data", help="render a synthetic COCO-format dataset")
    d.add_argument("--spec", help="scene spec JSON (defaults when omitted)")
    d.add_argument("--count", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("init-config", help="write a default run config")
    c.add_argument("--out", required=True)
    c.add_argument("--epochs", type=int)
    c.set_defaults(func=cmd_init_config)
    return p


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    kinds = [
        (CLIError, None),
        (ConfigError, "config"),
        (WeightFileError, "weights"),
        (DataError, "data"),
        (FileNotFoundError, "io"),
        (OSError, "io"),
        (json.JSONDecodeError, "json"),
        (ValueError, "value"),
    ]
    try:
        return args.func(args)
    except tuple(k for k, _ in kinds) as exc:
        kind = next((getattr(exc, "kind", None) or name) for cls, name in kinds if isinstance(exc, cls))
        print(f"error: {kind}: {_one_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
