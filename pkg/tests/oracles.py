"""Naive loop implementations used as independent references in the tests."""
import math

import numpy as np


def same_pads(n, k, s):
    out = (n + s - 1) // s
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2


def conv_dense_loop(x, w, b=None, stride=1):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, pt = same_pads(h, kh, stride)
    wo, pl = same_pads(wd, kw, stride)
    out = np.zeros((n, ho, wo, cout))
    for bi in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            iy, ix = oy * stride + i - pt, ox * stride + j - pl
                            if 0 <= iy < h and 0 <= ix < wd:
                                for ci in range(cin):
                                    acc += x[bi, iy, ix, ci] * w[i, j, ci, co]
                    out[bi, oy, ox, co] = acc + (0.0 if b is None else b[co])
    return out


def conv_depthwise_loop(x, w, b=None, stride=1):
    n, h, wd, c = x.shape
    kh, kw, _ = w.shape
    ho, pt = same_pads(h, kh, stride)
    wo, pl = same_pads(wd, kw, stride)
    out = np.zeros((n, ho, wo, c))
    for bi in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for ch in range(c):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            iy, ix = oy * stride + i - pt, ox * stride + j - pl
                            if 0 <= iy < h and 0 <= ix < wd:
                                acc += x[bi, iy, ix, ch] * w[i, j, ch]
                    out[bi, oy, ox, ch] = acc + (0.0 if b is None else b[ch])
    return out


def conv_pointwise_loop(x, w, b=None, stride=1):
    xs = x[:, ::stride, ::stride, :]
    n, h, wd, cin = xs.shape
    cout = w.shape[-1]
    w2 = w.reshape(cin, cout)
    out = np.zeros((n, h, wd, cout))
    for bi in range(n):
        for y in range(h):
            for xx in range(wd):
                for co in range(cout):
                    acc = 0.0
                    for ci in range(cin):
                        acc += xs[bi, y, xx, ci] * w2[ci, co]
                    out[bi, y, xx, co] = acc + (0.0 if b is None else b[co])
    return out


def avg_pool_loop(x, window, stride):
    n, h, wd, c = x.shape
    ho, pt = same_pads(h, window, stride)
    wo, pl = same_pads(wd, window, stride)
    out = np.zeros((n, ho, wo, c))
    for bi in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for ch in range(c):
                    acc = 0.0
                    for i in range(window):
                        for j in range(window):
                            iy, ix = oy * stride + i - pt, ox * stride + j - pl
                            if 0 <= iy < h and 0 <= ix < wd:
                                acc += x[bi, iy, ix, ch]
                    out[bi, oy, ox, ch] = acc / (window * window)
    return out


def _src(i, n_in, n_out):
    s = (i + 0.5) * n_in / n_out - 0.5
    s = min(max(s, 0.0), n_in - 1)
    lo = int(math.floor(s))
    return lo, min(lo + 1, n_in - 1), s - lo


def upsample_loop(x, out_h, out_w):
    n, h, w, c = x.shape
    out = np.zeros((n, out_h, out_w, c))
    for bi in range(n):
        for oy in range(out_h):
            y0, y1, fy = _src(oy, h, out_h)
            for ox in range(out_w):
                x0, x1, fx = _src(ox, w, out_w)
                for ch in range(c):
                    top = (1 - fx) * x[bi, y0, x0, ch] + fx * x[bi, y0, x1, ch]
                    bot = (1 - fx) * x[bi, y1, x0, ch] + fx * x[bi, y1, x1, ch]
                    out[bi, oy, ox, ch] = (1 - fy) * top + fy * bot
    return out


def attention_loop(x, w, b=None):
    n, h, wd, c = x.shape
    w2 = w.reshape(c, c)
    out = np.zeros_like(x)
    for bi in range(n):
        gap = [sum(x[bi, y, xx, ch] for y in range(h) for xx in range(wd)) / (h * wd) for ch in range(c)]
        for co in range(c):
            logit = sum(gap[ci] * w2[ci, co] for ci in range(c)) + (0.0 if b is None else b[co])
            gate = 1.0 / (1.0 + math.exp(-logit))
            out[bi, :, :, co] = x[bi, :, :, co] * gate
    return out


def laplacian_loop(flow):
    """``|lap u| + |lap v|`` with the 4-neighbour kernel and edge replication."""
    h, w, c = flow.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for ch in range(c):
                centre = flow[y, x, ch]
                nb = (flow[max(y - 1, 0), x, ch] + flow[min(y + 1, h - 1), x, ch]
                      + flow[y, max(x - 1, 0), ch] + flow[y, min(x + 1, w - 1), ch])
                lap = nb - 4 * centre
                acc += abs(lap)
            out[y, x] = acc
    return out


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g
