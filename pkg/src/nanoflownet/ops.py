"""Layer primitives (forward and backward) on NHWC float tensors.

Padding follows the TensorFlow ``SAME`` rule: output size is
``ceil(n / stride)`` and the total padding is split with the extra pixel
at the bottom/right. ``valid`` means no padding.

Every backward function takes the upstream gradient plus the forward
inputs and returns ``(grad_input, grad_params)``; ``grad_params`` is a
dict keyed like the parameter container.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .tensor import DTYPE, sigmoid

BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


@dataclass
class ConvParams:
    """Convolution weights.

    ``weight`` is ``(kh, kw, in_ch, out_ch)`` for dense convolutions,
    ``(kh, kw, ch)`` for depthwise ones and ``(1, 1, in_ch, out_ch)`` for
    pointwise ones. ``bias`` may be ``None`` (a normalization follows).
    """

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.stride < 1:
            raise ShapeError("stride must be positive")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"unknown padding {self.padding!r}")
        if self.bias is not None and len(self.bias) != self.weight.shape[-1]:
            raise ShapeError("bias length must equal the number of output channels")

    @property
    def kh(self) -> int:
        return self.weight.shape[0]

    @property
    def kw(self) -> int:
        return self.weight.shape[1]


@dataclass
class BNStats:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = BN_EPS


def out_and_pads(n: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Output length and (before, after) padding along one axis."""
    if padding == "valid":
        if n < k:
            raise ShapeError(f"input extent {n} smaller than kernel {k}")
        return (n - k) // stride + 1, 0, 0
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def _pad(x: np.ndarray, kh: int, kw: int, stride: int, padding: str):
    n, h, w, c = x.shape
    ho, pt, pb = out_and_pads(h, kh, stride, padding)
    wo, pl, pr = out_and_pads(w, kw, stride, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return x, ho, wo, (pt, pb, pl, pr)


def _tap(xp: np.ndarray, i: int, j: int, ho: int, wo: int, s: int) -> np.ndarray:
    return xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]


def _unpad(gp: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    h, w = gp.shape[1], gp.shape[2]
    return gp[:, pt:h - pb, pl:w - pr, :]


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: str):
    xp, ho, wo, pads = _pad(x, kh, kw, stride, padding)
    taps = [_tap(xp, i, j, ho, wo, stride) for i in range(kh) for j in range(kw)]
    # (N, Ho, Wo, kh*kw, C): flattening order kh -> kw -> in_ch
    cols = np.stack(taps, axis=3)
    n = x.shape[0]
    return cols.reshape(n * ho * wo, kh * kw * x.shape[3]), ho, wo, xp.shape, pads


# --------------------------------------------------------------------------
# dense / depthwise / pointwise convolution


def conv2d_dense(x: np.ndarray, p: ConvParams) -> np.ndarray:
    kh, kw, cin, cout = p.weight.shape
    if x.shape[3] != cin:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    if p.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
        raise ShapeError("same padding requires odd kernel sizes")
    cols, ho, wo, _, _ = _im2col(x, kh, kw, p.stride, p.padding)
    out = cols @ p.weight.reshape(kh * kw * cin, cout)
    if p.bias is not None:
        out = out + p.bias
    return out.reshape(x.shape[0], ho, wo, cout)


def backward_conv2d_dense(grad_out: np.ndarray, x: np.ndarray, p: ConvParams):
    kh, kw, cin, cout = p.weight.shape
    cols, ho, wo, pshape, pads = _im2col(x, kh, kw, p.stride, p.padding)
    if grad_out.shape != (x.shape[0], ho, wo, cout):
        raise ShapeError("grad_out shape does not match forward output")
    g = grad_out.reshape(-1, cout)
    grads = {"weight": (cols.T @ g).reshape(p.weight.shape)}
    if p.bias is not None:
        grads["bias"] = g.sum(axis=0)
    gcols = (g @ p.weight.reshape(kh * kw * cin, cout).T).reshape(
        x.shape[0], ho, wo, kh, kw, cin)
    gp = np.zeros(pshape, dtype=DTYPE)
    s = p.stride
    for i in range(kh):
        for j in range(kw):
            _tap(gp, i, j, ho, wo, s)[...] += gcols[:, :, :, i, j, :]
    return _unpad(gp, pads), grads


def conv2d_pointwise(x: np.ndarray, p: ConvParams) -> np.ndarray:
    w = p.weight
    if w.ndim == 2:
        w = w.reshape(1, 1, *w.shape)
    if w.shape[:2] != (1, 1):
        raise ShapeError("pointwise convolution needs a 1x1 kernel")
    cin, cout = w.shape[2:]
    if x.shape[3] != cin:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    if p.stride > 1:
        x = x[:, ::p.stride, ::p.stride, :]
    n, h, wd, _ = x.shape
    # same matmul layout as conv2d_dense with a 1x1 kernel -> bitwise equal
    cols = np.ascontiguousarray(x).reshape(n * h * wd, cin)
    out = cols @ w.reshape(cin, cout)
    if p.bias is not None:
        out = out + p.bias
    return out.reshape(n, h, wd, cout)


def backward_conv2d_pointwise(grad_out: np.ndarray, x: np.ndarray, p: ConvParams):
    w = p.weight.reshape(p.weight.shape[-2], p.weight.shape[-1])
    cin, cout = w.shape
    xs = x[:, ::p.stride, ::p.stride, :] if p.stride > 1 else x
    if grad_out.shape != xs.shape[:3] + (cout,):
        raise ShapeError("grad_out shape does not match forward output")
    g = grad_out.reshape(-1, cout)
    grads = {"weight": (xs.reshape(-1, cin).T @ g).reshape(p.weight.shape)}
    if p.bias is not None:
        grads["bias"] = g.sum(axis=0)
    gx = (g @ w.T).reshape(xs.shape)
    if p.stride > 1:
        full = np.zeros_like(x)
        full[:, ::p.stride, ::p.stride, :] = gx
        gx = full
    return gx, grads


def conv2d_depthwise(x: np.ndarray, p: ConvParams) -> np.ndarray:
    kh, kw, c = p.weight.shape
    if x.shape[3] != c:
        raise ShapeError(f"input has {x.shape[3]} channels, depthwise kernel has {c}")
    if p.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
        raise ShapeError("same padding requires odd kernel sizes")
    xp, ho, wo, _ = _pad(x, kh, kw, p.stride, p.padding)
    out = np.zeros((x.shape[0], ho, wo, c), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, ho, wo, p.stride) * p.weight[i, j]
    if p.bias is not None:
        out += p.bias
    return out


def backward_conv2d_depthwise(grad_out: np.ndarray, x: np.ndarray, p: ConvParams):
    kh, kw, c = p.weight.shape
    xp, ho, wo, pads = _pad(x, kh, kw, p.stride, p.padding)
    if grad_out.shape != (x.shape[0], ho, wo, c):
        raise ShapeError("grad_out shape does not match forward output")
    gw = np.empty_like(p.weight)
    gp = np.zeros(xp.shape, dtype=DTYPE)
    g2 = grad_out.reshape(-1, c)
    for i in range(kh):
        for j in range(kw):
            tap = _tap(xp, i, j, ho, wo, p.stride)
            gw[i, j] = np.einsum("mc,mc->c", tap.reshape(-1, c), g2)
            _tap(gp, i, j, ho, wo, p.stride)[...] += grad_out * p.weight[i, j]
    grads = {"weight": gw}
    if p.bias is not None:
        grads["bias"] = g2.sum(axis=0)
    return _unpad(gp, pads), grads


def depthwise_separable(x: np.ndarray, dw: ConvParams, pw: ConvParams) -> np.ndarray:
    return conv2d_pointwise(conv2d_depthwise(x, dw), pw)


def backward_depthwise_separable(grad_out, x, dw: ConvParams, pw: ConvParams):
    mid = conv2d_depthwise(x, dw)
    gmid, gpw = backward_conv2d_pointwise(grad_out, mid, pw)
    gx, gdw = backward_conv2d_depthwise(gmid, x, dw)
    return gx, {"depthwise": gdw, "pointwise": gpw}


def conv_macs(out_h: int, out_w: int, kh: int, kw: int, in_ch: int, out_ch: int) -> int:
    return out_h * out_w * kh * kw * in_ch * out_ch


def depthwise_macs(out_h: int, out_w: int, kh: int, kw: int, ch: int) -> int:
    return out_h * out_w * kh * kw * ch


def depthwise_separable_macs(out_h, out_w, kh, kw, in_ch, out_ch) -> int:
    return depthwise_macs(out_h, out_w, kh, kw, in_ch) + conv_macs(out_h, out_w, 1, 1, in_ch, out_ch)


# --------------------------------------------------------------------------
# pooling, resampling, concatenation


def avg_pool(x: np.ndarray, window: int, stride: int, padding: str = "same") -> np.ndarray:
    """Average pooling; the divisor is always ``window**2`` (padded zeros count)."""
    if window < 1:
        raise ShapeError("window must be >= 1")
    xp, ho, wo, _ = _pad(x, window, window, stride, padding)
    out = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=DTYPE)
    for i in range(window):
        for j in range(window):
            out += _tap(xp, i, j, ho, wo, stride)
    return out / (window * window)


def backward_avg_pool(grad_out, x, window: int, stride: int, padding: str = "same"):
    xp, ho, wo, pads = _pad(x, window, window, stride, padding)
    gp = np.zeros(xp.shape, dtype=DTYPE)
    g = grad_out / (window * window)
    for i in range(window):
        for j in range(window):
            _tap(gp, i, j, ho, wo, stride)[...] += g
    return _unpad(gp, pads), {}


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the bilinear weights of output sample i (half-pixel centres)."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    n, h, w, c = x.shape
    if out_h < h or out_w < w:
        raise ShapeError("bilinear_upsample only enlarges")
    if (out_h, out_w) == (h, w):
        return x.copy()
    ah = interp_matrix(h, out_h)
    aw = interp_matrix(w, out_w)
    tmp = np.einsum("ah,nhwc->nawc", ah, x)
    return np.einsum("bw,nawc->nabc", aw, tmp)


def backward_bilinear_upsample(grad_out, x, out_h: int, out_w: int):
    n, h, w, c = x.shape
    if (out_h, out_w) == (h, w):
        return grad_out.copy(), {}
    ah = interp_matrix(h, out_h)
    aw = interp_matrix(w, out_w)
    tmp = np.einsum("bw,nabc->nawc", aw, grad_out)
    return np.einsum("ah,nawc->nhwc", ah, tmp), {}


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ShapeError("nothing to concatenate")
    base = xs[0].shape[:3]
    for t in xs[1:]:
        if t.shape[:3] != base:
            raise ShapeError(f"spatial mismatch {t.shape[:3]} vs {base}")
    if len(xs) == 1:
        return xs[0].copy()
    return np.concatenate(xs, axis=3)


def backward_concat_channels(grad_out: np.ndarray, xs: list[np.ndarray]):
    splits = np.cumsum([t.shape[3] for t in xs])[:-1]
    return [g.copy() for g in np.split(grad_out, splits, axis=3)], {}


# --------------------------------------------------------------------------
# activations


def backward_relu(grad_out: np.ndarray, x: np.ndarray):
    return grad_out * (x > 0), {}


def backward_sigmoid(grad_out: np.ndarray, x: np.ndarray):
    y = sigmoid(x)
    return grad_out * y * (1.0 - y), {}


# --------------------------------------------------------------------------
# batch normalization


def batchnorm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = BN_EPS):
    """Normalize with batch statistics. Returns ``(y, mean, var)``."""
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    xhat = (x - mean) / np.sqrt(var + eps)
    return gamma * xhat + beta, mean, var


def batchnorm_infer(x: np.ndarray, bn: BNStats) -> np.ndarray:
    return bn.gamma * (x - bn.mean) / np.sqrt(bn.var + bn.eps) + bn.beta


def backward_batchnorm_train(grad_out, x, gamma, eps: float = BN_EPS):
    m = x.shape[0] * x.shape[1] * x.shape[2]
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    gbeta = grad_out.sum(axis=(0, 1, 2))
    ggamma = (grad_out * xhat).sum(axis=(0, 1, 2))
    gxhat = grad_out * gamma
    gx = inv / m * (m * gxhat - gxhat.sum(axis=(0, 1, 2)) - xhat * (gxhat * xhat).sum(axis=(0, 1, 2)))
    return gx, {"gamma": ggamma, "beta": gbeta}


def batchnorm_fold(p: ConvParams, bn: BNStats) -> ConvParams:
    """Fold inference-time normalization into the preceding convolution."""
    if np.any(bn.var <= 0):
        raise ValueError("batch-norm variance must be positive to fold")
    scale = bn.gamma / np.sqrt(bn.var + bn.eps)
    bias = p.bias if p.bias is not None else np.zeros_like(bn.mean)
    # the last weight axis is the output channel for every conv flavour
    return replace(p, weight=p.weight * scale, bias=(bias - bn.mean) * scale + bn.beta)


# --------------------------------------------------------------------------
# channel attention


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(1, 2), keepdims=True)


def channel_attention(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """``x * sigmoid(pointwise(global_avg_pool(x)))`` broadcast per channel."""
    c = x.shape[3]
    if p.weight.shape[-2:] != (c, c):
        raise ShapeError("attention weights must map C -> C")
    logits = conv2d_pointwise(global_avg_pool(x), p)
    return x * sigmoid(logits)


def backward_channel_attention(grad_out: np.ndarray, x: np.ndarray, p: ConvParams):
    h, w = x.shape[1], x.shape[2]
    gap = global_avg_pool(x)
    logits = conv2d_pointwise(gap, p)
    a = sigmoid(logits)
    ga = (grad_out * x).sum(axis=(1, 2), keepdims=True)
    glogits = ga * a * (1.0 - a)
    ggap, grads = backward_conv2d_pointwise(glogits, gap, p)
    gx = grad_out * a + ggap / (h * w)
    return gx, grads
