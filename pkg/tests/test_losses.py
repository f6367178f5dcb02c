import math

import numpy as np
import pytest

from nanoflownet.losses import (FocalLossCfg, combined_loss, downscale_boundary, edge_detect_gt,
                                endpoint_error, epe_loss, focal_detail_loss, laplacian_magnitude)
from oracles import central_difference, laplacian_loop


def _focal_scalar(p, y, gamma=2.0, alpha=0.25):
    p = min(max(p, 1e-6), 1 - 1e-6)
    pt = p if y >= 0.5 else 1 - p
    at = alpha if y >= 0.5 else 1 - alpha
    return -at * (1 - pt) ** gamma * math.log(pt)


def test_epe_hand_value():
    pred = np.zeros((1, 1, 2, 2))
    gt = np.array([[[[3.0, 4.0], [0.0, 0.0]]]])
    val, _ = epe_loss(pred, gt)
    # the stabilizing eps contributes at the zero-error pixel
    assert val == pytest.approx((5.0 + 1e-8) / 2, abs=1e-12)
    assert endpoint_error(pred, gt) == 2.5


def test_epe_gradient_fd():
    rng = np.random.default_rng(0)
    pred, gt = rng.normal(size=(1, 3, 4, 2)), rng.normal(size=(1, 3, 4, 2))
    _, g = epe_loss(pred, gt)
    fd = central_difference(lambda: epe_loss(pred, gt)[0], pred)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_focal_matches_scalar_formula():
    rng = np.random.default_rng(1)
    p = rng.uniform(0, 1, size=(2, 5, 6))
    y = (rng.random((2, 5, 6)) < 0.3).astype(float)
    val, _ = focal_detail_loss(p, y)
    ref = np.mean([_focal_scalar(a, b) for a, b in zip(p.ravel(), y.ravel())])
    assert val == pytest.approx(ref, rel=1e-12)


def test_focal_known_point():
    # p=0.5 on a positive pixel: 0.25 * 0.25 * ln 2
    val, _ = focal_detail_loss(np.array([[0.5]]), np.array([[1.0]]))
    assert val == pytest.approx(0.25 * 0.25 * math.log(2.0))


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
def test_focal_gradient_fd(gamma):
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, size=(4, 5))
    y = (rng.random((4, 5)) < 0.5).astype(float)
    cfg = FocalLossCfg(gamma=gamma)
    _, g = focal_detail_loss(p, y, cfg)
    fd = central_difference(lambda: focal_detail_loss(p, y, cfg)[0], p)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)


def test_focal_clamped_region_has_zero_gradient():
    _, g = focal_detail_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
    assert np.all(g == 0)


def test_focal_config_errors():
    with pytest.raises(ValueError):
        FocalLossCfg(gamma=-1)
    with pytest.raises(ValueError):
        FocalLossCfg(alpha=1.0)


def test_laplacian_matches_loop_exactly():
    flow = np.random.default_rng(3).integers(-5, 5, size=(7, 9, 2)).astype(float)
    np.testing.assert_array_equal(laplacian_magnitude(flow), laplacian_loop(flow))


def test_edge_gt_constant_field_has_no_edges():
    assert edge_detect_gt(np.full((8, 8, 2), 1.5)).sum() == 0


def test_edge_gt_step_marks_discontinuity():
    flow = np.zeros((8, 10, 2))
    flow[:, 5:, 0] = 2.0
    e = edge_detect_gt(flow)
    assert set(np.nonzero(e.any(axis=0))[0]) == {4, 5}


def test_downscale_keeps_thin_boundary():
    b = np.zeros((8, 8))
    b[3, :] = 1
    d = downscale_boundary(b, 4)
    assert d.shape == (2, 2) and d[0].all() and not d[1].any()


def test_combined_modes():
    rng = np.random.default_rng(4)
    pf, gf = rng.normal(size=(1, 4, 4, 2)), rng.normal(size=(1, 4, 4, 2))
    pd = rng.uniform(0.1, 0.9, size=(1, 4, 4, 1))
    bnd = (rng.random((1, 4, 4)) < 0.3).astype(float)
    t0, parts0, _, gd0 = combined_loss(pf, pd, gf, bnd, mode="none")
    assert gd0 is None and t0 == parts0["epe"]
    t1, parts1, _, gd1 = combined_loss(pf, pd, gf, bnd, 0.5, mode="motion-boundary")
    assert t1 == pytest.approx(parts1["epe"] + 0.5 * parts1["detail"])
    assert gd1.shape == pd.shape
    t2, parts2, _, _ = combined_loss(pf, pd, gf, None, mode="edge-detect")
    assert parts2["detail"] > 0
    with pytest.raises(ValueError):
        combined_loss(pf, pd, gf, None, mode="motion-boundary")
    with pytest.raises(ValueError):
        combined_loss(pf, pd, gf, bnd, mode="bogus")
