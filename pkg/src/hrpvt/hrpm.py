"""High-resolution pyramid modules built on hybrid-dilated convolution (HDC).

HRPM v1 replaces the stride-4 patch embedding with two stride-2 conv blocks
around a concatenated HDC pyramid. HRPM v2 is a shape-preserving residual
block: upsample 2x, summed HDC pyramid, strided conv back down, add input.
"""

from __future__ import annotations

from typing import List

import numpy as np

from . import tensor as T
from .config import HDCConfig
from .nn import ConvBlock, Module, ModuleList
from .tensor import Tensor


class HDC(Module):
    """``depth`` 3x3 conv blocks with dilation ``d_i`` and padding ``d_i``.

    In ``chain`` mode layer i consumes layer i-1's output; in ``parallel``
    mode every layer consumes the input. Tap outputs are concatenated along
    channels or summed.
    """

    def __init__(self, cin: int, cfg: HDCConfig, rng, dtype=np.float64):
        super().__init__()
        self.mode, self.merge = cfg.mode, cfg.merge
        self.rates = cfg.rates()
        self.width = cfg.width
        layers = []
        for i, d in enumerate(self.rates):
            src = cin if (i == 0 or cfg.mode == "parallel") else cfg.width
            layers.append(ConvBlock(src, cfg.width, 3, rng, padding=d, dilation=d, dtype=dtype))
        self.layers = ModuleList(layers)
        self.last_taps: List[tuple] = []

    @property
    def out_channels(self) -> int:
        return self.width * len(self.rates) if self.merge == "concat" else self.width

    def taps(self, f: Tensor) -> List[Tensor]:
        out = []
        x = f
        for layer in self.layers:
            x = layer(f if self.mode == "parallel" else x)
            out.append(x)
        return out

    def forward(self, f: Tensor) -> Tensor:
        taps = self.taps(f)
        self.last_taps = [t.shape for t in taps]
        if len(taps) == 1:
            return taps[0]
        if self.merge == "concat":
            return T.concat(taps, axis=1)
        widths = {t.shape[1] for t in taps}
        if len(widths) != 1:
            raise ValueError(f"sum merge needs equal tap widths, got {sorted(widths)}")
        return T.stack_sum(taps)


def hdc_chain(f: Tensor, hdc: HDC) -> Tensor:
    return hdc(f)


class HRPMv1(Module):
    """Stem: stride-2 conv block, concatenated HDC at H/2, GELU, stride-2 fuse conv block."""

    def __init__(self, cin: int, out_dim: int, cfg: HDCConfig, rng, dtype=np.float64):
        super().__init__()
        if cfg.merge != "concat":
            raise ValueError("HRPM v1 merges its pyramid by concatenation")
        self.stem = ConvBlock(cin, cfg.width, 3, rng, stride=2, padding=1, dtype=dtype)
        self.hdc = HDC(cfg.width, cfg, rng, dtype)
        self.fuse = ConvBlock(self.hdc.out_channels, out_dim, 3, rng, stride=2, padding=1, dtype=dtype)
        self.last_shapes: dict = {}

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if h % 4 or w % 4:
            raise ValueError(f"HRPM v1: input {h}x{w} must be divisible by 4")
        half = self.stem(x)
        pyramid = self.hdc(half)
        out = self.fuse(T.gelu(pyramid))
        self.last_shapes = {"stem": half.shape, "pyramid": pyramid.shape, "out": out.shape}
        return out


class HRPMv2(Module):
    """Residual pyramid block, ``f + Conv(GELU(sum HDC(entry(deconv(f)))))``.

    The deconv (kernel 4, stride 2, pad 1) doubles resolution and halves
    channels; a 1x1 entry conv block maps C/2 to the HDC width; the stride-2
    fuse conv block returns to the input's shape.
    """

    def __init__(self, channels: int, cfg: HDCConfig, rng, dtype=np.float64):
        super().__init__()
        if channels % 2:
            raise ValueError(f"HRPM v2 needs an even channel count, got {channels}")
        if cfg.merge != "sum":
            raise ValueError("HRPM v2 merges its pyramid by summation")
        half = channels // 2
        self.up = ConvBlock(channels, half, 4, rng, stride=2, padding=1, dtype=dtype, transposed=True)
        self.entry = ConvBlock(half, cfg.width, 1, rng, dtype=dtype)
        self.hdc = HDC(cfg.width, cfg, rng, dtype)
        self.fuse = ConvBlock(cfg.width, channels, 3, rng, stride=2, padding=1, dtype=dtype)
        self.last_shapes: dict = {}

    def forward(self, f: Tensor) -> Tensor:
        _, _, h, w = f.shape
        if h % 2 or w % 2:
            raise ValueError(f"HRPM v2: feature map {h}x{w} must have even extents")
        up = self.up(f)
        pyramid = self.hdc(self.entry(up))
        branch = self.fuse(T.gelu(pyramid))
        self.last_shapes = {"up": up.shape, "pyramid": pyramid.shape, "branch": branch.shape}
        return branch + f
