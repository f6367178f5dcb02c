import numpy as np
import pytest

from nanoflownet.synthetic import (SyntheticCfg, backwarp, generate_synthetic, load_dataset,
                                   non_occluded, photometric_error, save_dataset)

CFG = SyntheticCfg(height=32, width=48, max_displacement=3, octaves=(8, 4))


def test_same_seed_bitwise_reproducible():
    a = generate_synthetic(3, CFG, seed=5)
    b = generate_synthetic(3, CFG, seed=5)
    for s, t in zip(a, b):
        for k in ("frame0", "frame1", "flow", "boundary"):
            assert getattr(s, k).tobytes() == getattr(t, k).tobytes()


def test_different_seeds_differ():
    a = generate_synthetic(1, CFG, seed=5)[0]
    b = generate_synthetic(1, CFG, seed=6)[0]
    assert not np.array_equal(a.flow, b.flow)


def test_shapes_and_ranges():
    s = generate_synthetic(1, CFG, seed=0)[0]
    assert s.frame0.shape == (32, 48) and s.flow.shape == (32, 48, 2)
    assert 0 <= s.frame0.min() and s.frame0.max() <= 1
    assert set(np.unique(s.boundary)) <= {0.0, 1.0}


def test_flow_is_consistent_with_frames():
    # warping frame1 by the ground-truth flow reproduces frame0 where visible
    errs = [photometric_error(s) for s in generate_synthetic(4, CFG, seed=2)]
    assert max(errs) < 0.02
    s = generate_synthetic(1, CFG, seed=2)[0]
    assert non_occluded(s).mean() > 0.5


def test_backwarp_integer_shift():
    img = np.random.default_rng(0).random((6, 8))
    flow = np.zeros((6, 8, 2))
    flow[..., 0] = 1
    out = backwarp(img, flow)
    np.testing.assert_array_equal(out[:, :-1], img[:, 1:])


def test_boundaries_sit_on_flow_jumps():
    s = generate_synthetic(1, CFG, seed=3)[0]
    if s.boundary.sum() == 0:
        pytest.skip("scene without foreground")
    jump = np.zeros(s.boundary.shape, bool)
    d = np.linalg.norm(np.diff(s.flow, axis=1), axis=-1) > 0.5
    jump[:, :-1] |= d
    jump[:, 1:] |= d
    d = np.linalg.norm(np.diff(s.flow, axis=0), axis=-1) > 0.5
    jump[:-1] |= d
    jump[1:] |= d
    assert jump[s.boundary > 0].mean() > 0.9


def test_dataset_disk_round_trip(tmp_path):
    samples = generate_synthetic(2, CFG, seed=1)
    save_dataset(samples, tmp_path, CFG, seed=1)
    back = load_dataset(tmp_path)
    assert len(back) == 2
    for s, t in zip(samples, back):
        assert np.array_equal(s.flow.astype(np.float32), t.flow)
        assert np.abs(s.frame0 - t.frame0).max() <= 0.5 / 255 + 1e-12
        assert np.array_equal(s.boundary, t.boundary)


def test_config_validation():
    with pytest.raises(ValueError):
        generate_synthetic(1, SyntheticCfg(height=0))
