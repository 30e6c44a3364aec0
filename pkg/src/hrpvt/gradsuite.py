"""Gradient-check suites over ops, HRPM blocks, the head and the full model.

Each case reduces its output to a scalar through a fixed random weighting so
every output entry contributes a distinct gradient, then compares reverse-mode
gradients with central differences in 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import CFFN, SRA, Stage, run_stage
from .config import HDCConfig, ModelConfig, SimCCConfig, StageConfig
from .gradcheck import autodiff_grad, finite_diff_grad, relative_error
from .hrpm import HDC, HRPMv1, HRPMv2
from .simcc import PoseInstance, SimCCHead, encode_targets, simcc_loss
from .tensor import Tensor

GROUPS = ("tensor", "backbone", "hrpm", "head")


@dataclass
class GradCase:
    name: str
    group: str
    fn: Callable[[Tensor], Tensor]
    x: Tensor


@dataclass
class GradResult:
    name: str
    group: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


def _projector(rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    cache = {}

    def project(y: Tensor) -> Tensor:
        if y.shape not in cache:
            cache[y.shape] = rng.standard_normal(y.shape)
        return T.sum_(T.mul(y, cache[y.shape]))

    return project


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, x + np.sign(x) * margin, x)


def tensor_cases(seed: int = 0) -> List[GradCase]:
    rng = np.random.default_rng(seed)
    P = _projector(rng)

    def t(*shape):
        return Tensor(rng.standard_normal(shape))

    cases: List[GradCase] = []

    def add(name, fn, x):
        cases.append(GradCase(name, "tensor", fn, x))

    b, c = t(1, 4), t(3, 1)
    add("add.broadcast", lambda x: P(x + b), t(3, 4))
    add("sub", lambda x: P(T.sub(b, x)), t(3, 4))
    add("mul.broadcast", lambda x: P(x * c), t(3, 4))
    den = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    add("div.numerator", lambda x: P(x / den), t(3, 4))
    add("div.denominator", lambda x: P(T.div(b, x)), Tensor(rng.uniform(0.5, 2.0, (3, 4))))
    add("sum.axis", lambda x: P(T.sum_(x, axis=1, keepdims=True)), t(2, 3, 4))
    add("mean", lambda x: P(T.mean(x, axis=(0, 2))), t(2, 3, 4))
    add("reshape.permute", lambda x: P(T.permute(T.reshape(x, (4, 6)), (1, 0))), t(2, 3, 4))
    m = t(2, 4, 5)
    add("matmul.left", lambda x: P(T.matmul(x, m)), t(2, 3, 4))
    add("matmul.right", lambda x: P(T.matmul(m, x)), t(2, 5, 3))
    other = t(2, 2, 4)
    add("concat", lambda x: P(T.concat([x, other, x], axis=1)), t(2, 3, 4))
    add("stack_sum", lambda x: P(T.stack_sum([x, x * 2.0, other])), t(2, 2, 4))
    add("relu", lambda x: P(T.relu(x)), Tensor(_away_from_zero(rng, (3, 5))))
    add("gelu", lambda x: P(T.gelu(x)), t(3, 5))
    add("softmax", lambda x: P(T.softmax_last(x)), t(3, 6))
    add("log_softmax", lambda x: P(T.log_softmax_last(x)), t(3, 6))

    g, o, ln_in = t(6), t(6), t(2, 3, 6)
    add("layer_norm.input", lambda x: P(T.layer_norm(x, g, o)), t(2, 3, 6))
    add("layer_norm.gain", lambda x: P(T.layer_norm(ln_in, x, o)), t(6))
    add("layer_norm.offset", lambda x: P(T.layer_norm(ln_in, g, x)), t(6))

    bg, bo, bn_in = t(3), t(3), t(2, 3, 4, 4)
    add("batch_norm.train", lambda x: P(T.batch_norm(x, bg, bo, np.zeros(3), np.ones(3), True)), t(2, 3, 4, 4))
    add("batch_norm.train.gain", lambda x: P(T.batch_norm(bn_in, x, bo, np.zeros(3), np.ones(3), True)), t(3))
    add("batch_norm.eval", lambda x: P(T.batch_norm(x, bg, bo, np.full(3, 0.2), np.full(3, 1.5), False)), t(2, 3, 4, 4))

    lw, lb, lin_in = t(6, 5), t(5), t(2, 3, 6)
    add("linear.input", lambda x: P(T.linear(x, lw, lb)), t(2, 3, 6))
    add("linear.weight", lambda x: P(T.linear(lin_in, x, lb)), t(6, 5))
    add("linear.bias", lambda x: P(T.linear(lin_in, lw, x)), t(5))
    add("seq2patches", lambda x: P(T.seq2patches(x, 4, 6, 2)), t(2, 24, 3))
    add("img2seq.seq2img", lambda x: P(T.seq2img(T.img2seq(x) * 2.0, 3, 4)), t(2, 5, 3, 4))

    cin = 4
    for stride in (1, 2):
        for dil in (1, 2, 3):
            for groups in (1, cin):
                w = t(6 if groups == 1 else cin, cin // groups, 3, 3)
                bias = t(w.shape[0])
                xin = t(2, cin, 9, 8)
                tag = f"s{stride}.d{dil}.g{groups}"

                def fwd_x(x, w=w, bias=bias, s=stride, d=dil, gr=groups):
                    return P(T.conv2d(x, w, bias, s, d, d, gr))

                def fwd_w(x, xin=xin, bias=bias, s=stride, d=dil, gr=groups):
                    return P(T.conv2d(xin, x, bias, s, d, d, gr))

                def fwd_b(x, xin=xin, w=w, s=stride, d=dil, gr=groups):
                    return P(T.conv2d(xin, w, x, s, d, d, gr))

                add(f"conv2d.input.{tag}", fwd_x, xin)
                add(f"conv2d.weight.{tag}", fwd_w, w)
                add(f"conv2d.bias.{tag}", fwd_b, bias)
    for groups in (1, cin):
        w = t(cin, 6 if groups == 1 else 1, 4, 4)
        bias = t(6 if groups == 1 else cin)
        xin = t(2, cin, 5, 4)
        add(f"deconv2d.input.g{groups}", lambda x, w=w, b=bias, gr=groups: P(T.deconv2d(x, w, b, 2, 1, 1, gr)), xin)
        add(f"deconv2d.weight.g{groups}", lambda x, xin=xin, b=bias, gr=groups: P(T.deconv2d(xin, x, b, 2, 1, 1, gr)), w)
    return cases


def _param_case(name, group, module, param_name, fn) -> GradCase:
    params = dict(module.named_parameters())
    return GradCase(name, group, lambda _x: fn(), params[param_name])


def backbone_cases(seed: int = 0) -> List[GradCase]:
    rng = np.random.default_rng(seed)
    P = _projector(rng)
    cases: List[GradCase] = []
    for r in (1, 2):
        sra = SRA(8, 2, r, rng)
        cases.append(GradCase(f"sra.r{r}.input", "backbone", lambda x, m=sra: P(m(x, 4, 4)), Tensor(rng.standard_normal((2, 16, 8)))))
    s_in = Tensor(rng.standard_normal((2, 16, 8)))
    sra = SRA(8, 2, 2, rng)
    cases.append(_param_case("sra.r2.sr.weight", "backbone", sra, "sr.weight", lambda: P(sra(s_in, 4, 4))))
    ffn = CFFN(8, 2, rng)
    cases.append(GradCase("cffn.input", "backbone", lambda x: P(ffn(x, 4, 4)), Tensor(rng.standard_normal((2, 16, 8)))))
    cases.append(_param_case("cffn.dwconv.weight", "backbone", ffn, "dwconv.weight", lambda: P(ffn(s_in, 4, 4))))
    for form in ("standard", "literal"):
        stage = Stage(StageConfig(depth=1, dim=8, heads=2, reduction=2), 3, 4, rng, form=form)
        cases.append(GradCase(f"stage.{form}.input", "backbone", lambda x, m=stage: P(run_stage(m, x)[1]), Tensor(rng.standard_normal((2, 3, 16, 16)))))
    return cases


def hrpm_cases(seed: int = 0) -> List[GradCase]:
    rng = np.random.default_rng(seed)
    P = _projector(rng)
    cases: List[GradCase] = []
    for mode in ("chain", "parallel"):
        for merge in ("concat", "sum"):
            hdc = HDC(4, HDCConfig(depth=3, width=4, mode=mode, merge=merge), rng)
            cases.append(GradCase(f"hdc.{mode}.{merge}.input", "hrpm", lambda x, m=hdc: P(m(x)), Tensor(rng.standard_normal((2, 4, 8, 8)))))
    v1 = HRPMv1(3, 8, HDCConfig(depth=3, width=4), rng)
    x1 = Tensor(rng.standard_normal((2, 3, 16, 16)))
    cases.append(GradCase("hrpm_v1.input", "hrpm", lambda x: P(v1(x)), x1))
    cases.append(_param_case("hrpm_v1.fuse.conv.weight", "hrpm", v1, "fuse.conv.weight", lambda: P(v1(x1))))
    v2 = HRPMv2(8, HDCConfig(depth=3, width=4, merge="sum"), rng)
    x2 = Tensor(rng.standard_normal((2, 8, 6, 6)))
    cases.append(GradCase("hrpm_v2.input", "hrpm", lambda x: P(v2(x)), x2))
    cases.append(_param_case("hrpm_v2.up.conv.weight", "hrpm", v2, "up.conv.weight", lambda: P(v2(x2))))
    return cases


def head_cases(seed: int = 0) -> List[GradCase]:
    rng = np.random.default_rng(seed)
    cfg = SimCCConfig(k=2.0, sigma=2.0, input_w=8, input_h=6, num_keypoints=3)
    head = SimCCHead(4, cfg, rng)
    gts = [PoseInstance(rng.uniform(0, 5.5, (3, 2)), [2, 1, 0]) for _ in range(2)]
    tx, ty, mask = (np.stack(a) for a in zip(*(encode_targets(g, cfg) for g in gts)))
    f4 = Tensor(rng.standard_normal((2, 3, 2, 2)))

    def loss_of(x):
        xl, yl = head(x)
        return simcc_loss(xl, yl, tx, ty, mask)

    logits = Tensor(rng.standard_normal((2, 3, cfg.x_bins)))
    ylog = Tensor(rng.standard_normal((2, 3, cfg.y_bins)))
    return [
        GradCase("head.loss.input", "head", loss_of, f4),
        _param_case("head.fc_x.weight", "head", head, "fc_x.weight", lambda: loss_of(f4)),
        _param_case("head.fc_y.bias", "head", head, "fc_y.bias", lambda: loss_of(f4)),
        GradCase("simcc_loss.logits", "head", lambda x: simcc_loss(x, ylog, tx, ty, mask), logits),
    ]


def run_cases(cases: Sequence[GradCase], tol: float, h: float = 1e-5) -> List[GradResult]:
    out = []
    for c in cases:
        analytic = autodiff_grad(c.fn, c.x)
        numeric = finite_diff_grad(c.fn, c.x, h)
        out.append(GradResult(c.name, c.group, relative_error(analytic, numeric), tol))
    return out


def suite(module: str = "all", seed: int = 0) -> List[GradCase]:
    builders = {"tensor": tensor_cases, "backbone": backbone_cases, "hrpm": hrpm_cases, "head": head_cases}
    if module != "all" and module not in builders:
        raise ValueError(f"unknown gradient suite {module!r}; choose from all, {', '.join(builders)}")
    chosen = builders.values() if module == "all" else [builders[module]]
    return [case for b in chosen for case in b(seed)]


def full_model_check(cfg: Optional[ModelConfig] = None, n_weights: int = 50, seed: int = 0, h: float = 1e-5) -> float:
    """Relative error over ``n_weights`` randomly sampled scalar weights of the whole model.

    The loss is the SimCC KL on random in-frame targets; batch norm runs in
    training mode so its batch statistics are part of the checked graph.
    """
    from .model import build_model

    cfg = cfg or ModelConfig(dtype="float64", strategy="vanilla")
    if cfg.dtype != "float64":
        raise ValueError("full-model gradient checks require float64")
    rng = np.random.default_rng(seed)
    model = build_model(cfg)
    sc = cfg.simcc
    x = Tensor(rng.standard_normal((2, 3, sc.input_h, sc.input_w)))
    gts = [
        PoseInstance(np.stack([rng.uniform(0, sc.input_w - 1, sc.num_keypoints), rng.uniform(0, sc.input_h - 1, sc.num_keypoints)], 1), np.full(sc.num_keypoints, 2))
        for _ in range(2)
    ]
    tx, ty, mask = (np.stack(a) for a in zip(*(encode_targets(g, sc) for g in gts)))

    def loss():
        xl, yl = model(x)
        return simcc_loss(xl, yl, tx, ty, mask)

    named = list(model.named_parameters())
    sizes = np.array([p.size for _, p in named])
    flat_ids = rng.choice(sizes.sum(), size=n_weights, replace=False)
    bounds = np.cumsum(sizes)
    model.zero_grad()
    loss().backward()
    analytic, numeric = [], []
    for fid in flat_ids:
        k = int(np.searchsorted(bounds, fid, side="right"))
        local = int(fid - (bounds[k] - sizes[k]))
        _, p = named[k]
        analytic.append(p.grad.reshape(-1)[local])
        numeric.append(finite_diff_grad(lambda _p: loss(), p, h, indices=[local]).reshape(-1)[local])
    return relative_error(np.array(analytic), np.array(numeric))
