"""Differentiable operations over :class:`~keepcore.tensor.Tensor`.

Only the op set needed by the segmentation oracle and the adversarial gate
search is provided. Tensor-tensor elementwise ops require equal shapes; the
only broadcasting is against Python scalars (plus the explicit
:func:`expand`).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, record


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return record("mul", x * y, (a, b), lambda g: (g * y, g * x))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record("scalar_mul", a.data * s, (a,), lambda g: (g * s,))


def scalar_add(a: Tensor, s: float) -> Tensor:
    return record("scalar_add", a.data + float(s), (a,), lambda g: (g,))


def elementwise(kind: str, a: Tensor, b: Tensor | float) -> Tensor:
    """Dispatch by name: add, sub, mul, scalar_mul, scalar_add."""
    table = {"add": add, "sub": sub, "mul": mul, "scalar_mul": scalar_mul, "scalar_add": scalar_add}
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](a, b)


def sigmoid(a: Tensor) -> Tensor:
    # exp(-log(1 + exp(-x))) never overflows
    y = np.exp(-np.logaddexp(0.0, -a.data))
    return record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return record("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is 1 strictly inside, 0 at or past the bounds."""
    if not lo < hi:
        raise ValueError(f"clamp requires lo < hi, got lo={lo}, hi={hi}")
    inside = (a.data > lo) & (a.data < hi)
    return record("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def l1_norm(a: Tensor) -> Tensor:
    """Sum of absolute values. Backward uses sign(0) = 0."""
    s = np.sign(a.data)
    return record("l1_norm", np.array(np.abs(a.data).sum()), (a,), lambda g: (g * s,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return record("reshape", a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


def expand(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return record("expand", out, (a,), lambda g: (g.sum(axis=0),))


def upsample_nearest(a: Tensor, factor_h: int, factor_w: int) -> Tensor:
    """Replicate each element of the last two axes into a factor_h x factor_w block."""
    if factor_h < 1 or factor_w < 1:
        raise ValueError("upsample factors must be >= 1")
    if a.data.ndim < 2:
        raise ShapeError(f"upsample_nearest needs rank >= 2, got {list(a.shape)}")
    out = np.repeat(np.repeat(a.data, factor_h, axis=-2), factor_w, axis=-1)
    lead = a.shape[:-2]
    h, w = a.shape[-2:]

    def back(g):
        return (g.reshape(lead + (h, factor_h, w, factor_w)).sum(axis=(-3, -1)),)

    return record("upsample_nearest", out, (a,), back)


def block_mean(a: np.ndarray, factor_h: int, factor_w: int) -> np.ndarray:
    """Average-pool the last two axes by non-overlapping blocks (no tape)."""
    h, w = a.shape[-2:]
    if h % factor_h or w % factor_w:
        raise ShapeError(f"extent {(h, w)} not divisible by block {(factor_h, factor_w)}")
    lead = a.shape[:-2]
    return a.reshape(lead + (h // factor_h, factor_h, w // factor_w, factor_w)).mean(axis=(-3, -1))


def _im2col(xd: np.ndarray, k: int) -> np.ndarray:
    """``N x C x H x W`` -> ``(C*k*k) x (N*H*W)`` patches under zero same-padding."""
    n, c, h, w = xd.shape
    r = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (r, r), (r, r)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N C H W k k
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * h * w)


def _correlate(xd: np.ndarray, wd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, w = xd.shape
    o, _, k, _ = wd.shape
    cols = _im2col(xd, k)
    out = (wd.reshape(o, -1) @ cols).reshape(o, n, h, w).transpose(1, 0, 2, 3)
    return out, cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    ``x`` is ``C x H x W`` or ``N x C x H x W``; ``weight`` is ``O x C x k x k``
    with odd ``k``; ``bias`` has length ``O``.
    """
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be O x C x k x k, got {list(weight.shape)}")
    o, c, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {list(bias.shape)} does not match {o} output channels")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be C x H x W or N x C x H x W, got {list(x.shape)}")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != c:
        raise ShapeError(f"conv2d channel mismatch: input has {xd.shape[1]}, weight expects {c}")
    wd = weight.data
    out, cols = _correlate(xd, wd)
    out = out + bias.data[None, :, None, None]
    need_x, need_w = x.tracked, weight.tracked or bias.tracked

    def back(g):
        gd = g if batched else g[None]
        gx = gw = gb = None
        if need_x:
            # input gradient is a correlation with the flipped, channel-transposed kernel
            gx, _ = _correlate(gd, wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = gx if batched else gx[0]
        if need_w:
            gm = gd.transpose(1, 0, 2, 3).reshape(o, -1)
            gw = (gm @ cols.T).reshape(wd.shape)
            gb = gd.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return record("conv2d", out if batched else out[0], (x, weight, bias), back)


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def one_hot(labels: np.ndarray, num_classes: int, class_axis: int = -3) -> np.ndarray:
    """Integer label grid -> float one-hot with classes on ``class_axis``."""
    lab = np.asarray(labels)
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.round(lab)):
            raise ValueError("labels must be integers")
        lab = lab.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes}), got [{lab.min()}, {lab.max()}]")
    oh = np.eye(num_classes)[lab]  # (..., H, W, K)
    return np.moveaxis(oh, -1, class_axis)


def _target(logits: Tensor, target) -> np.ndarray:
    """Accept integer labels (logits shape minus class axis) or a soft target of logits' shape."""
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    k = logits.shape[-3]
    if arr.shape == logits.shape:
        return arr.astype(np.float64)
    expect = logits.shape[:-3] + logits.shape[-2:]
    if arr.shape != expect:
        raise ShapeError(f"labels shape {list(arr.shape)} incompatible with logits {list(logits.shape)}")
    return one_hot(arr, k)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean per-pixel softmax cross-entropy. Classes on axis -3."""
    g = _target(logits, target)
    logp = _log_softmax(logits.data, axis=-3)
    npix = logp.size // logits.shape[-3]
    ce = -(g * logp).sum() / npix
    p = np.exp(logp)

    def back(up):
        # (p - g) assumes each pixel's target sums to one
        return (up * (p * g.sum(axis=-3, keepdims=True) - g) / npix,)

    return record("cross_entropy", np.array(ce), (logits,), back)


def soft_dice_loss(logits: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - mean over classes of (2 sum p g + s) / (sum p + sum g + s), p = softmax."""
    g = _target(logits, target)
    p = np.exp(_log_softmax(logits.data, axis=-3))
    k = logits.shape[-3]
    axes = tuple(a for a in range(p.ndim) if a != p.ndim - 3)
    inter = (p * g).sum(axis=axes)
    denom = p.sum(axis=axes) + g.sum(axis=axes) + smooth
    loss = 1.0 - ((2.0 * inter + smooth) / denom).mean()

    def back(up):
        shape = [1] * p.ndim
        shape[-3] = k
        num = (2.0 * inter + smooth).reshape(shape)
        den = denom.reshape(shape)
        dp = -(2.0 * g * den - num) / (den * den) / k
        dz = p * (dp - (p * dp).sum(axis=-3, keepdims=True))
        return (up * dz,)

    return record("soft_dice_loss", np.array(loss), (logits,), back)


def seg_losses(logits: Tensor, target, smooth: float = 1.0) -> tuple[Tensor, Tensor]:
    """Return ``(cross_entropy, soft_dice_loss)`` for class-axis -3 logits."""
    return cross_entropy(logits, target), soft_dice_loss(logits, target, smooth)
