import struct

import numpy as np
import pytest

from nanoflownet import flowio
from nanoflownet.flowio import FlowFormatError


def test_flo_round_trip_bitwise(tmp_path):
    flow = np.random.default_rng(0).normal(scale=10, size=(13, 17, 2)).astype(np.float32)
    flowio.save_flo(tmp_path / "a.flo", flow)
    back = flowio.load_flo(tmp_path / "a.flo")
    assert back.dtype == np.float32 and back.tobytes() == flow.tobytes()


def test_flo_header_layout():
    data = flowio.write_flo(np.zeros((3, 5, 2)))
    assert data[:4] == b"PIEH"
    assert struct.unpack("<f", data[:4])[0] == 202021.25
    assert struct.unpack("<ii", data[4:12]) == (5, 3)
    assert len(data) == 12 + 3 * 5 * 2 * 4


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:-1],
    lambda d: d + b"\0",
    lambda d: d[:8],
    lambda d: d[:4] + struct.pack("<ii", 0, 3) + d[12:],
])
def test_flo_rejects_corrupt(mutate):
    data = flowio.write_flo(np.zeros((3, 5, 2)))
    with pytest.raises(FlowFormatError):
        flowio.read_flo(mutate(data))


def test_flo_rejects_bad_arrays():
    with pytest.raises(FlowFormatError):
        flowio.write_flo(np.zeros((3, 5, 3)))
    bad = np.zeros((2, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(FlowFormatError):
        flowio.write_flo(bad)


def test_pgm_ppm_round_trip():
    img = np.random.default_rng(1).integers(0, 256, size=(6, 7)).astype(np.uint8)
    back = flowio.read_pgm(flowio.write_pgm(img))
    assert np.array_equal(flowio.to_uint8(back), img)
    rgb = np.random.default_rng(2).integers(0, 256, size=(4, 5, 3)).astype(np.uint8)
    assert np.array_equal(flowio.to_uint8(flowio.read_ppm(flowio.write_ppm(rgb))), rgb)
    with pytest.raises(FlowFormatError):
        flowio.read_ppm(flowio.write_pgm(img))


def test_flow_color_zero_is_white_and_hue_rotates():
    z = flowio.flow_to_color(np.zeros((2, 2, 2)))
    assert np.allclose(z, 1.0)
    f = np.array([[[1.0, 0.0], [-1.0, 0.0]]])
    c = flowio.flow_to_color(f)
    assert not np.allclose(c[0, 0], c[0, 1])


def test_atomic_write_leaves_no_temp(tmp_path):
    flowio.atomic_write(tmp_path / "sub" / "x.txt", "hi")
    assert (tmp_path / "sub" / "x.txt").read_text() == "hi"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.txt"]


def test_evaluate_epe_directory(tmp_path):
    gt = np.zeros((4, 4, 2), np.float32)
    pred = gt.copy()
    pred[..., 0] = 3
    pred[..., 1] = 4
    (tmp_path / "gt").mkdir()
    (tmp_path / "pred").mkdir()
    flowio.save_flo(tmp_path / "gt" / "a.flo", gt)
    flowio.save_flo(tmp_path / "pred" / "a.flo", pred)
    rows, mean, text = flowio.evaluate_epe(tmp_path / "pred", tmp_path / "gt")
    assert rows == [("a.flo", 5.0)] and mean == 5.0
    assert text.splitlines()[-1] == "mean,5.000000"
    (tmp_path / "gt" / "b.flo").write_bytes(flowio.write_flo(gt))
    with pytest.raises(FlowFormatError):
        flowio.evaluate_epe(tmp_path / "pred", tmp_path / "gt")
