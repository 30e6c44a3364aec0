"""Dense numpy-backed tensors with define-by-run reverse-mode differentiation.

Every differentiable operation produces a new :class:`Tensor` carrying a
:class:`Node` that references its inputs and a closure mapping the output
gradient to input gradients. :class:`Tape` orders those nodes topologically
so a single :func:`backward` call populates ``.grad`` on every tensor that
requires it.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_DEFAULT_DTYPE = np.float64
SUPPORTED_DTYPES = (np.float32, np.float64)


def set_default_dtype(dtype) -> None:
    """Set the dtype used when constructing tensors from Python scalars/lists."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; expected float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class Node:
    """One recorded operation: its inputs and the vector-Jacobian product."""

    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """A real-valued array with an optional gradient accumulator.

    ``data`` should be treated as immutable once the tensor has been used in a
    recorded computation; the optimizer is the only component that writes
    into parameter buffers in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.type in SUPPORTED_DTYPES else _DEFAULT_DTYPE
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def backward(self, tape: Optional["Tape"] = None) -> None:
        backward(self, tape)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, recording a node only when some input needs grads."""
    out = Tensor(data, dtype=data.dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), vjp)
    return out


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the operations reachable from a tensor."""

    def __init__(self, nodes: Sequence[Tuple[Tensor, Node]]):
        self.entries = list(nodes)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in reversed(t.node.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls([(t, t.node) for t in order if t.node is not None])

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self):
        return [node.op for _, node in self.entries]


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` of every grad-requiring ancestor of a scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise RuntimeError("backward called on a tensor with no recorded computation (no tape)")
    if tape is None:
        tape = Tape.record(loss)

    grads = {id(loss): np.ones_like(loss.data)}
    for t, node in reversed(tape.entries):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        _accumulate_into(t, g)
        in_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise RuntimeError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
            key = id(inp)
            if inp.node is None:
                _accumulate_into(inp, ig)
            elif key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig


def _accumulate_into(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.dtype, copy=False)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data
    return _make(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data
    return _make(out, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "div", (a, b), vjp)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, "permute", (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(out, "concat", tensors, vjp)


def stack_sum(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of equally shaped tensors recorded as a single op."""
    tensors = list(tensors)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"stack_sum shape mismatch: {shape} vs {t.shape}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    return _make(out, "stack_sum", tensors, lambda g: tuple(g for _ in tensors))


# ---------------------------------------------------------------------------
# activations and normalisation
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _make(out, "relu", (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU with the exact Gaussian CDF, ``x * Phi(x)``."""
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return _make(out, "gelu", (x,), vjp)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def softmax_last(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax", (x,), vjp)


def log_softmax_last(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (x,), vjp)


def layer_norm(x: Tensor, gain: Optional[Tensor], offset: Optional[Tensor], eps: float = 1e-6) -> Tensor:
    """Normalise over the last dimension, then apply ``gain`` and ``offset``."""
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gain.data if gain is not None else 1.0
    out = xhat * g_ + (offset.data if offset is not None else 0.0)
    inputs = [x] + [t for t in (gain, offset) if t is not None]
    red = tuple(range(x.ndim - 1))

    def vjp(g):
        dxhat = g * g_
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        res = [dx]
        if gain is not None:
            res.append((g * xhat).sum(axis=red))
        if offset is not None:
            res.append(g.sum(axis=red))
        return tuple(res)

    return _make(out.astype(x.dtype, copy=False), "layer_norm", inputs, vjp)


def batch_norm(
    x: Tensor,
    gain: Tensor,
    offset: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of an NCHW map.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, PyTorch convention); in inference mode
    the running buffers are used and the op is affine.
    """
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    n, c, h, w = x.shape
    shape = (1, c, 1, 1)
    axes = (0, 2, 3)
    gd = gain.data.reshape(shape)
    if training:
        m = n * h * w
        if m <= 1:
            raise ValueError(f"batch norm in training mode needs more than one value per channel, got {x.shape}")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * (m / (m - 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gd + offset.data.reshape(shape)

        def vjp(g):
            dxhat = g * gd
            dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv
        out = xhat * gd + offset.data.reshape(shape)

        def vjp(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out.astype(x.dtype, copy=False), "batch_norm", (x, gain, offset), vjp)


def normalize(x: Tensor, kind: str, gain=None, offset=None, epsilon: float = 1e-5, **kw) -> Tensor:
    if kind == "layer":
        return layer_norm(x, gain, offset, eps=epsilon)
    if kind == "batch":
        return batch_norm(x, gain, offset, eps=epsilon, **kw)
    raise ValueError(f"unknown normalisation kind {kind!r}")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis; ``weight`` has shape ``(Din, Dout)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input trailing extent {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[1])
        res = [
            (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None,
            x2.T @ g2 if weight.requires_grad else None,
        ]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return _make(out, "linear", inputs, vjp)


# ---------------------------------------------------------------------------
# sequence / image reshaping
# ---------------------------------------------------------------------------


def img2seq(f: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H*W, C), row-major over space."""
    n, c, h, w = f.shape
    return reshape(permute(f, (0, 2, 3, 1)), (n, h * w, c))


def seq2img(s: Tensor, h: int, w: int) -> Tensor:
    """(N, H*W, C) -> (N, C, H, W); inverse of :func:`img2seq`."""
    n, t, c = s.shape
    if t != h * w:
        raise ValueError(f"seq2img: token count {t} does not equal {h}x{w}={h * w}")
    return permute(reshape(s, (n, h, w, c)), (0, 3, 1, 2))


def seq2patches(s: Tensor, h: int, w: int, r: int) -> Tensor:
    """Gather non-overlapping r x r token blocks into single wide tokens.

    (N, H*W, C) -> (N, (H/r)*(W/r), r*r*C) where the feature axis is ordered
    (row within block, column within block, channel).
    """
    n, t, c = s.shape
    if t != h * w:
        raise ValueError(f"seq2patches: token count {t} does not equal {h}x{w}")
    if h % r or w % r:
        raise ValueError(f"spatial extents {h}x{w} not divisible by reduction ratio {r}")
    hr, wr = h // r, w // r
    x6 = s.data.reshape(n, hr, r, wr, r, c)
    out = np.ascontiguousarray(x6.transpose(0, 1, 3, 2, 4, 5)).reshape(n, hr * wr, r * r * c)

    def vjp(g):
        g6 = g.reshape(n, hr, wr, r, r, c).transpose(0, 1, 3, 2, 4, 5)
        return (np.ascontiguousarray(g6).reshape(n, t, c),)

    return _make(out, "seq2patches", (s,), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _tap_slice(i: int, dil: int, stride: int, n_out: int) -> slice:
    start = i * dil
    return slice(start, start + stride * (n_out - 1) + 1, stride)


def _conv_forward(x, w, stride, pad, dil, groups):
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    dh, dw = dil
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(wd, kw, sw, pw, dw)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: empty output for input {x.shape} and weight {w.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    og = cout // groups
    out = np.zeros((n, groups, og, ho, wo), dtype=x.dtype)
    xg = xp.reshape(n, groups, cg, xp.shape[2], xp.shape[3])
    wg = w.reshape(groups, og, cg, kh, kw)
    for i in range(kh):
        rs = _tap_slice(i, dh, sh, ho)
        for j in range(kw):
            cs = _tap_slice(j, dw, sw, wo)
            patch = xg[:, :, :, rs, cs]
            if cg == 1:
                out += wg[None, :, :, 0, i, j, None, None] * patch
            else:
                out += np.matmul(wg[:, :, :, i, j], patch.reshape(n, groups, cg, ho * wo)).reshape(out.shape)
    return out.reshape(n, cout, ho, wo)


def _conv_backward_input(gy, w, x_shape, stride, pad, dil, groups):
    n, cin, h, wd = x_shape
    cout, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    dh, dw = dil
    _, _, ho, wo = gy.shape
    og = cout // groups
    gxp = np.zeros((n, groups, cg, h + 2 * ph, wd + 2 * pw), dtype=gy.dtype)
    gyg = gy.reshape(n, groups, og, ho, wo)
    wg = w.reshape(groups, og, cg, kh, kw)
    gy_flat = gyg.reshape(n, groups, og, ho * wo)
    for i in range(kh):
        rs = _tap_slice(i, dh, sh, ho)
        for j in range(kw):
            cs = _tap_slice(j, dw, sw, wo)
            if cg == 1 and og == 1:
                gxp[:, :, 0, rs, cs] += wg[None, :, 0, 0, i, j, None, None] * gyg[:, :, 0]
            else:
                wt = np.swapaxes(wg[:, :, :, i, j], -1, -2)
                gxp[:, :, :, rs, cs] += np.matmul(wt, gy_flat).reshape(n, groups, cg, ho, wo)
    gxp = gxp.reshape(n, cin, h + 2 * ph, wd + 2 * pw)
    return gxp[:, :, ph : ph + h, pw : pw + wd]


def _conv_backward_weight(gy, x, w_shape, stride, pad, dil, groups):
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w_shape
    sh, sw = stride
    ph, pw = pad
    dh, dw = dil
    _, _, ho, wo = gy.shape
    og = cout // groups
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    xg = xp.reshape(n, groups, cg, xp.shape[2], xp.shape[3])
    gyg = gy.reshape(n, groups, og, ho * wo)
    gw = np.zeros((groups, og, cg, kh, kw), dtype=gy.dtype)
    for i in range(kh):
        rs = _tap_slice(i, dh, sh, ho)
        for j in range(kw):
            cs = _tap_slice(j, dw, sw, wo)
            patch = xg[:, :, :, rs, cs].reshape(n, groups, cg, ho * wo)
            if cg == 1 and og == 1:
                gw[:, 0, 0, i, j] = (gyg[:, :, 0] * patch[:, :, 0]).sum(axis=(0, 2))
            else:
                gw[:, :, :, i, j] = np.matmul(gyg, np.swapaxes(patch, -1, -2)).sum(axis=0)
    return gw.reshape(w_shape)


# ---- im2col / GEMM kernels (used unless the convolution is depth-wise) ----


def _im2col(x, kh, kw, stride, pad, dil):
    """(N, C, H, W) -> columns (C, kh, kw, N, Ho, Wo)."""
    n, c, h, wd = x.shape
    (sh, sw), (ph, pw), (dh, dw) = stride, pad, dil
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(wd, kw, sw, pw, dw)
    xt = x.transpose(1, 0, 2, 3)
    if ph or pw:
        xt = np.pad(xt, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        rs = _tap_slice(i, dh, sh, ho)
        for j in range(kw):
            cols[:, i, j] = xt[:, :, rs, _tap_slice(j, dw, sw, wo)]
    return cols, ho, wo


def _gemm_forward(x, w, stride, pad, dil, groups):
    n = x.shape[0]
    cout, cg, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad, dil)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: empty output for input {x.shape} and weight {w.shape}")
    cols = cols.reshape(groups, cg * kh * kw, n * ho * wo)
    out = np.matmul(w.reshape(groups, cout // groups, cg * kh * kw), cols)
    return np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))


def _gemm_backward_input(gy, w, x_shape, stride, pad, dil, groups):
    n, cin, h, wd = x_shape
    cout, cg, kh, kw = w.shape
    (sh, sw), (ph, pw), (dh, dw) = stride, pad, dil
    _, _, ho, wo = gy.shape
    gyt = gy.transpose(1, 0, 2, 3).reshape(groups, cout // groups, n * ho * wo)
    wt = np.swapaxes(w.reshape(groups, cout // groups, cg * kh * kw), -1, -2)
    gcols = np.matmul(wt, gyt).reshape(cin, kh, kw, n, ho, wo)
    gxt = np.zeros((cin, n, h + 2 * ph, wd + 2 * pw), dtype=gy.dtype)
    for i in range(kh):
        rs = _tap_slice(i, dh, sh, ho)
        for j in range(kw):
            gxt[:, :, rs, _tap_slice(j, dw, sw, wo)] += gcols[:, i, j]
    return np.ascontiguousarray(gxt[:, :, ph : ph + h, pw : pw + wd].transpose(1, 0, 2, 3))


def _gemm_backward_weight(gy, x, w_shape, stride, pad, dil, groups):
    cout, cg, kh, kw = w_shape
    n = x.shape[0]
    cols, ho, wo = _im2col(x, kh, kw, stride, pad, dil)
    cols = cols.reshape(groups, cg * kh * kw, n * ho * wo)
    gyt = gy.transpose(1, 0, 2, 3).reshape(groups, cout // groups, n * ho * wo)
    return np.matmul(gyt, np.swapaxes(cols, -1, -2)).reshape(w_shape)


CONV_IMPL = "gemm"


def set_conv_impl(name: str) -> None:
    """Select ``gemm`` (im2col + matmul) or ``direct`` (per-tap loop) kernels."""
    global CONV_IMPL
    if name not in ("gemm", "direct"):
        raise ValueError(f"unknown convolution implementation {name!r}")
    CONV_IMPL = name


def _kernels(w_shape):
    # depth-wise convolutions are elementwise per tap; the direct loop is already optimal
    if CONV_IMPL == "direct" or w_shape[1] == 1:
        return _conv_forward, _conv_backward_input, _conv_backward_weight
    return _gemm_forward, _gemm_backward_input, _gemm_backward_weight


def _check_conv(x_shape, w_shape, groups, who):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ValueError(f"{who}: expected 4-D input and weight, got input {x_shape} and weight {w_shape}")
    if groups < 1 or x_shape[1] % groups:
        raise ValueError(f"{who}: input channels of {x_shape} not divisible by groups={groups}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0, dilation=1, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    The kernel loops over taps and contracts each shifted input view with the
    matching weight slice, so the cost is ``kh*kw`` batched matmuls.
    """
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    _check_conv(x.shape, weight.shape, groups, "conv2d")
    if weight.shape[1] * groups != x.shape[1] or weight.shape[0] % groups:
        raise ValueError(f"conv2d: weight {weight.shape} incompatible with input {x.shape} (groups={groups})")
    if min(dilation) < 1 or min(stride) < 1:
        raise ValueError("conv2d: stride and dilation must be >= 1")
    fwd, bwd_in, bwd_w = _kernels(weight.shape)
    out = fwd(x.data, weight.data, stride, padding, dilation, groups)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        res = [
            bwd_in(g, weight.data, x.shape, stride, padding, dilation, groups) if x.requires_grad else None,
            bwd_w(g, x.data, weight.shape, stride, padding, dilation, groups) if weight.requires_grad else None,
        ]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    return _make(out, "conv2d", inputs, vjp)


def deconv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0, dilation=1, groups: int = 1) -> Tensor:
    """Transposed convolution; ``weight`` has shape ``(Cin, Cout/groups, kh, kw)``.

    This is exactly the adjoint of :func:`conv2d` with the same weight and
    geometry, so ``<conv2d(a, w), b> == <a, deconv2d(b, w)>``.
    """
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    _check_conv(x.shape, weight.shape, groups, "deconv2d")
    if weight.shape[0] != x.shape[1]:
        raise ValueError(f"deconv2d: weight {weight.shape} incompatible with input {x.shape}")
    if min(stride) < 1 or min(dilation) < 1:
        raise ValueError("deconv2d: stride and dilation must be >= 1")
    n, cin, h, w = x.shape
    _, cg, kh, kw = weight.shape
    ho = (h - 1) * stride[0] - 2 * padding[0] + dilation[0] * (kh - 1) + 1
    wo = (w - 1) * stride[1] - 2 * padding[1] + dilation[1] * (kw - 1) + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"deconv2d: empty output for input {x.shape} and weight {weight.shape}")
    out_shape = (n, cg * groups, ho, wo)
    fwd, bwd_in, bwd_w = _kernels((weight.shape[0], cg, kh, kw))
    out = bwd_in(x.data, weight.data, out_shape, stride, padding, dilation, groups)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        res = [
            fwd(g, weight.data, stride, padding, dilation, groups) if x.requires_grad else None,
            bwd_w(x.data, g, weight.shape, stride, padding, dilation, groups) if weight.requires_grad else None,
        ]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    return _make(out, "deconv2d", inputs, vjp)

