import json

import numpy as np
import pytest

from nanoflownet import analysis
from nanoflownet.graph import Graph, LayerNode
from nanoflownet.stdc import (ConfigError, NetworkConfig, StdcModuleCfg, build_nanoflownet,
                              build_stdc_module, nanoflownet_config, nanoflownet_s_config,
                              stack_frames)

TARGET_PARAMS = {"nanoflownet": 170_881, "nanoflownet-s": 46_749}


@pytest.mark.parametrize("variant", ["original", "modified"])
def test_strided_module_shape(variant):
    g = build_stdc_module(StdcModuleCfg(8, 32, strided=True, variant=variant), np.random.default_rng(0))
    assert g.infer_shapes(16, 20)["module/cat"] == (8, 10, 32)
    y = g.forward(np.random.default_rng(1).random((1, 16, 20, 8)))["out"]
    assert y.shape == (1, 8, 10, 32)


def test_plain_module_keeps_resolution():
    g = build_stdc_module(StdcModuleCfg(32, 32), None)
    assert g.infer_shapes(8, 10)["module/cat"] == (8, 10, 32)


def test_module_config_errors():
    with pytest.raises(ConfigError):
        StdcModuleCfg(8, 30).widths()
    with pytest.raises(ConfigError):
        StdcModuleCfg(8, 32, block_filter_fractions=(0.5, 0.25)).widths()
    with pytest.raises(ConfigError):
        StdcModuleCfg(8, 32, variant="other").widths()
    assert StdcModuleCfg(8, 32).widths() == [16, 8, 4, 4]


def _hand_stage1_macs():
    # stem output for 112x160 is 56x80x16; stage-1 module widths 32, 16, 8, 8
    hw_in, hw_out = 56 * 80, 28 * 40
    tail = hw_out * (9 * 16 + 16 * 8) + hw_out * (9 * 8 + 8 * 8)
    original = hw_in * 16 * 32 + hw_out * (9 * 32 + 32 * 16) + tail
    modified = hw_out * 16 * 32 + hw_out * (9 * 16 + 16 * 16) + tail
    return original, modified


def test_stage1_module_macs_match_hand_count():
    rows = analysis.strided_redesign_report(nanoflownet_config())
    orig, mod = _hand_stage1_macs()
    assert rows[0]["module_macs_original"] == orig
    assert rows[0]["module_macs_modified"] == mod
    assert mod / orig <= 0.5


def test_stage_2_3_reduction_over_ten_percent():
    rows = analysis.strided_redesign_report(nanoflownet_config())
    for r in rows[1:]:
        assert r["module_macs_modified"] / r["module_macs_original"] <= 0.9
    for r in rows:
        assert r["module_macs_modified"] < r["module_macs_original"]


def test_pointwise_mac_hand_count():
    nodes = [LayerNode("input", "input"), LayerNode("pw", "pwconv", ("input",), stage="s")]
    g = Graph(nodes, {"pw.weight": np.zeros((1, 1, 4, 8))}, {}, {"flow": "pw"}, 4)
    assert analysis.count_macs(g, 8, 8)["total"] == 8 * 8 * 4 * 8 == 2048
    assert analysis.count_params(g) == 32


@pytest.mark.parametrize("name,factory", [("nanoflownet", nanoflownet_config),
                                          ("nanoflownet-s", nanoflownet_s_config)])
def test_param_budget_within_ten_percent(name, factory):
    n = analysis.count_params(build_nanoflownet(factory(), rng=None))
    assert abs(n - TARGET_PARAMS[name]) / TARGET_PARAMS[name] <= 0.10


def test_small_preset_halves_widths():
    full, small = nanoflownet_config(), nanoflownet_s_config()
    assert [s.width for s in small.stages] == [s.width // 2 for s in full.stages]
    assert small.stem_channels * 2 == full.stem_channels
    nf = analysis.count_params(build_nanoflownet(full, rng=None))
    ns = analysis.count_params(build_nanoflownet(small, rng=None))
    assert ns < nf


def test_flow_output_shape_full_resolution():
    cfg = nanoflownet_s_config()
    g = build_nanoflownet(cfg, rng=0, training=False)
    assert g.infer_shapes(112, 160)[g.outputs["flow"]] == (112, 160, 2)
    f0 = np.random.default_rng(0).random((112, 160))
    x = stack_frames(f0, f0)
    assert x.shape == (1, 112, 160, 2)
    y = g.forward(x)["flow"]
    assert y.shape == (1, 112, 160, 2) and np.all(np.isfinite(y))


def test_zero_network_outputs_bias():
    g = build_nanoflownet(nanoflownet_s_config(input_height=32, input_width=48), rng=None)
    y = g.forward(np.random.default_rng(0).random((1, 32, 48, 2)))["flow"]
    assert np.all(y == y.flat[0])


def test_forward_is_deterministic():
    g = build_nanoflownet(nanoflownet_s_config(input_height=32, input_width=48), rng=4)
    x = np.random.default_rng(0).random((2, 32, 48, 2))
    assert np.array_equal(g.forward(x)["flow"], g.forward(x)["flow"])


def test_detail_head_is_train_only():
    cfg = nanoflownet_s_config(input_height=32, input_width=48)
    guided = build_nanoflownet(cfg, rng=0, training=True).inference_graph()
    plain = build_nanoflownet(NetworkConfig.from_dict({**cfg.to_dict(), "detail_head": False}), rng=0)
    assert [n.to_dict() for n in guided.nodes] == [n.to_dict() for n in plain.nodes]
    assert {k: v.shape for k, v in guided.params.items()} == {k: v.shape for k, v in plain.params.items()}


def test_config_json_round_trip(tmp_path):
    cfg = nanoflownet_s_config(input_height=48, input_width=64)
    cfg.save(tmp_path / "c.json")
    assert NetworkConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(ConfigError):
        nanoflownet_config(input_height=100).validate()
    json.loads((tmp_path / "c.json").read_text())


def test_analyzer_report_lists_exact_counts():
    rep = analysis.analyze(nanoflownet_config())
    text = analysis.format_report(rep)
    assert f"{rep['params_train_graph']:,}" in text
    csv_text = analysis.report_csv(rep)
    assert csv_text.splitlines()[0].startswith("section,key")
