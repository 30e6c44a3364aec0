"""PVT v2 encoder: overlapping patch embedding, spatial-reduction attention
(SRA), convolutional feed-forward network (CFFN) and four-stage assembly."""

from __future__ import annotations

from typing import Callable, Optional, Tuple

import numpy as np

from . import tensor as T
from .config import StageConfig
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList
from .tensor import Tensor


class OverlapPatchEmbed(Module):
    """Strided conv with kernel ``2*stride-1`` and padding ``stride-1``, then LayerNorm."""

    def __init__(self, cin: int, dim: int, stride: int, rng, dtype=np.float64):
        super().__init__()
        if stride not in (2, 4):
            raise ValueError(f"patch embedding stride must be 2 or 4, got {stride}")
        self.stride = stride
        self.proj = Conv2d(cin, dim, 2 * stride - 1, rng, stride=stride, padding=stride - 1, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, f: Tensor) -> Tuple[Tensor, int, int]:
        _, _, h, w = f.shape
        if h % self.stride or w % self.stride:
            raise ValueError(f"patch embedding: input {h}x{w} not divisible by stride {self.stride}")
        x = self.proj(f)
        ho, wo = x.shape[2], x.shape[3]
        return self.norm(T.img2seq(x)), ho, wo


def spatial_reduction(s: Tensor, h: int, w: int, r: int, proj: Linear, norm: LayerNorm) -> Tensor:
    """Shrink a token sequence by ``r*r``: gather r x r blocks, project back to
    the token dim, layer-normalise."""
    if r == 1:
        return norm(proj(s))
    return norm(proj(T.seq2patches(s, h, w, r)))


class SRA(Module):
    def __init__(self, dim: int, heads: int, reduction: int, rng, dtype=np.float64):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.reduction = dim, heads, reduction
        self.scale = (dim // heads) ** -0.5
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        if reduction > 1:
            self.sr = Linear(reduction * reduction * dim, dim, rng, dtype)
            self.sr_norm = LayerNorm(dim, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self.last_attn: Optional[np.ndarray] = None

    def forward(self, s: Tensor, h: int, w: int) -> Tensor:
        n, t, c = s.shape
        nh, d = self.heads, c // self.heads
        q = self.q(s).reshape(n, t, nh, d).permute(0, 2, 1, 3)
        src = spatial_reduction(s, h, w, self.reduction, self.sr, self.sr_norm) if self.reduction > 1 else s
        tk = src.shape[1]
        k = self.k(src).reshape(n, tk, nh, d).permute(0, 2, 3, 1)
        v = self.v(src).reshape(n, tk, nh, d).permute(0, 2, 1, 3)
        attn = T.softmax_last(T.matmul(q, k) * self.scale)
        self.last_attn = attn.data
        out = T.matmul(attn, v).permute(0, 2, 1, 3).reshape(n, t, c)
        return self.proj(out)


class CFFN(Module):
    """Linear expand, 3x3 depth-wise conv (pad 1) on the token grid, GELU, linear contract."""

    def __init__(self, dim: int, mlp_ratio: int, rng, dtype=np.float64):
        super().__init__()
        hidden = dim * mlp_ratio
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.dwconv = Conv2d(hidden, hidden, 3, rng, padding=1, groups=hidden, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, s: Tensor, h: int, w: int) -> Tensor:
        x = self.fc1(s)
        x = T.img2seq(self.dwconv(T.seq2img(x, h, w)))
        return self.fc2(T.gelu(x))


class EncoderLayer(Module):
    """One SRA + CFFN layer.

    ``standard`` is the pre-norm residual form ``s + SRA(LN s)`` then
    ``s + CFFN(LN s)``. ``literal`` is ``CFFN(SRA(s)) + SRA(s)`` with no
    normalisation and no identity path around the attention.
    """

    def __init__(self, cfg: StageConfig, rng, form: str = "standard", dtype=np.float64):
        super().__init__()
        if form not in ("standard", "literal"):
            raise ValueError(f"unknown layer form {form!r}")
        self.form = form
        if form == "standard":
            self.norm1 = LayerNorm(cfg.dim, dtype=dtype)
        self.attn = SRA(cfg.dim, cfg.heads, cfg.reduction, rng, dtype)
        if form == "standard":
            self.norm2 = LayerNorm(cfg.dim, dtype=dtype)
        self.ffn = CFFN(cfg.dim, cfg.mlp_ratio, rng, dtype)

    def forward(self, s: Tensor, h: int, w: int) -> Tensor:
        if self.form == "literal":
            a = self.attn(s, h, w)
            return self.ffn(a, h, w) + a
        s = s + self.attn(self.norm1(s), h, w)
        return s + self.ffn(self.norm2(s), h, w)


class Stage(Module):
    def __init__(self, cfg: StageConfig, cin: int, stride: int, rng, use_embed: bool = True, form: str = "standard", dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.embed = OverlapPatchEmbed(cin, cfg.dim, stride, rng, dtype) if use_embed else None
        self.layers = ModuleList(EncoderLayer(cfg, rng, form, dtype) for _ in range(cfg.depth))

    def tokens(self, f: Tensor) -> Tuple[Tensor, int, int]:
        if self.embed is not None:
            return self.embed(f)
        _, _, h, w = f.shape
        return T.img2seq(f), h, w


def run_stage(
    stage: Stage,
    f: Tensor,
    after_layer: Optional[Callable[[int, Tensor, int, int], Tensor]] = None,
) -> Tuple[Tensor, Tensor]:
    """Tokenise ``f``, apply every encoder layer and return ``(tokens, feature map)``.

    ``after_layer(j, s, h, w)`` may replace the token sequence after layer ``j``.
    """
    s, h, w = stage.tokens(f)
    for j, layer in enumerate(stage.layers):
        s = layer(s, h, w)
        if after_layer is not None:
            s = after_layer(j, s, h, w)
    return s, T.seq2img(s, h, w)
