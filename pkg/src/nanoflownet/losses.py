"""Flow and detail-guidance losses, and boundary ground-truth synthesis.

Flow fields are ``(..., H, W, 2)`` arrays; boundary maps are ``(..., H, W)``
(a trailing singleton channel is accepted). Each loss returns
``(value, gradient w.r.t. the prediction)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPE_EPS = 1e-8
FOCAL_CLAMP = 1e-6
MIN_EDGE = 1e-9
GUIDANCE_MODES = ("none", "edge-detect", "motion-boundary")

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class FocalLossCfg:
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("focal alpha must lie in (0, 1)")


def epe_loss(pred: np.ndarray, gt: np.ndarray, eps: float = EPE_EPS):
    """Mean endpoint error ``mean(sqrt(du^2 + dv^2 + eps^2))`` and its gradient."""
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ValueError(f"flow shape mismatch: {pred.shape} vs {gt.shape}")
    d = pred - gt
    mag = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2 + eps * eps)
    count = mag.size
    return float(mag.mean()), d / mag[..., None] / count


def endpoint_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Plain mean EPE, no stabilizing epsilon (evaluation metric)."""
    d = pred - gt
    return float(np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2).mean())


def _squeeze(m: np.ndarray) -> np.ndarray:
    return m[..., 0] if m.shape[-1] == 1 and m.ndim >= 3 else m


def laplacian_magnitude(flow: np.ndarray) -> np.ndarray:
    """``|lap(u)| + |lap(v)|`` with the 4-neighbour kernel.

    Borders are edge-replicated so that a constant field has zero response
    everywhere, including the frame border.
    """
    pad = [(0, 0)] * (flow.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    fp = np.pad(flow, pad, mode="edge")
    h, w = flow.shape[-3], flow.shape[-2]
    lap = np.zeros(flow.shape)
    for i in range(3):
        for j in range(3):
            if LAPLACIAN[i, j]:
                lap += LAPLACIAN[i, j] * fp[..., i:i + h, j:j + w, :]
    return np.abs(lap[..., 0]) + np.abs(lap[..., 1])


def edge_detect_gt(gt_flow: np.ndarray, threshold: float | None = None,
                   percentile: float = 95.0) -> np.ndarray:
    """Binary edge map from the flow Laplacian.

    With ``threshold=None`` each frame is thresholded at its own
    ``percentile`` of the Laplacian magnitude. A pixel is an edge when its
    magnitude reaches the threshold and is non-zero, so a constant field
    yields no edges.
    """
    mag = laplacian_magnitude(gt_flow)
    if threshold is None:
        thr = np.percentile(mag, percentile, axis=(-2, -1), keepdims=True)
    else:
        thr = threshold
    return ((mag >= thr) & (mag > MIN_EDGE)).astype(np.float64)


def downscale_boundary(boundary: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a boundary map so thin boundaries survive downscaling."""
    b = _squeeze(boundary)
    h, w = b.shape[-2] // factor, b.shape[-1] // factor
    b = b[..., :h * factor, :w * factor]
    return b.reshape(b.shape[:-2] + (h, factor, w, factor)).max(axis=(-3, -1))


def focal_detail_loss(pred: np.ndarray, gt: np.ndarray, cfg: FocalLossCfg | None = None):
    """Mean focal loss ``-alpha_t (1 - p_t)^gamma log(p_t)`` and its gradient.

    Gradient is zero where the clamp to ``[1e-6, 1 - 1e-6]`` is active.
    """
    cfg = cfg or FocalLossCfg()
    shape = pred.shape
    p_raw, y = _squeeze(pred), _squeeze(gt)
    if p_raw.shape != y.shape:
        raise ValueError(f"boundary shape mismatch: {pred.shape} vs {gt.shape}")
    p = np.clip(p_raw, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    pos = y >= 0.5
    pt = np.where(pos, p, 1.0 - p)
    at = np.where(pos, cfg.alpha, 1.0 - cfg.alpha)
    g = cfg.gamma
    one_m = 1.0 - pt
    logp = np.log(pt)
    loss = -at * one_m ** g * logp
    n = loss.size
    # d/dpt of -a (1-pt)^g log pt
    if g == 0:
        dpt = -at / pt
    else:
        dpt = at * (g * one_m ** (g - 1) * logp - one_m ** g / pt)
    grad = np.where(pos, dpt, -dpt) / n
    grad = np.where((p_raw > FOCAL_CLAMP) & (p_raw < 1.0 - FOCAL_CLAMP), grad, 0.0)
    return float(loss.mean()), grad.reshape(shape)


def combined_loss(pred_flow, pred_detail, gt_flow, gt_boundary, lambda_detail: float = 1.0,
                  mode: str = "motion-boundary", focal: FocalLossCfg | None = None):
    """``epe + lambda * focal``.

    Returns ``(total, parts, grad_flow, grad_detail)`` where ``parts`` has
    the ``epe`` and ``detail`` terms. ``mode="none"`` drops the detail term
    (``grad_detail`` is ``None``). In ``edge-detect`` mode a missing
    boundary map is synthesized from ``gt_flow``.
    """
    if mode not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance mode {mode!r}")
    epe, g_flow = epe_loss(pred_flow, gt_flow)
    if mode == "none" or lambda_detail == 0:
        return epe, {"epe": epe, "detail": 0.0}, g_flow, None
    if pred_detail is None:
        raise ValueError("guided training needs a detail prediction")
    if gt_boundary is None:
        if mode == "motion-boundary":
            raise ValueError("motion-boundary guidance needs boundary ground truth")
        gt_boundary = edge_detect_gt(gt_flow)
    det, g_det = focal_detail_loss(pred_detail, gt_boundary, focal)
    return epe + lambda_detail * det, {"epe": epe, "detail": det}, g_flow, lambda_detail * g_det
