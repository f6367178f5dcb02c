import numpy as np
import pytest

from nanoflownet.graph import Graph, GraphError, LayerNode, NonFiniteError
from nanoflownet.stdc import build_nanoflownet, nanoflownet_s_config


def _tiny(weight=1.0):
    nodes = [LayerNode("input", "input"), LayerNode("a/pw", "pwconv", ("input",)),
             LayerNode("a/relu", "relu", ("a/pw",))]
    params = {"a/pw.weight": np.full((1, 1, 2, 2), weight)}
    return Graph(nodes, params, {}, {"flow": "a/relu"}, 2)


def test_forward_and_shapes():
    g = _tiny()
    y = g.forward(np.ones((1, 3, 4, 2)))["flow"]
    assert y.shape == (1, 3, 4, 2) and np.all(y == 2.0)
    assert g.infer_shapes(3, 4)["a/relu"] == (3, 4, 2)


def test_structure_errors():
    with pytest.raises(GraphError):
        Graph([LayerNode("input", "input"), LayerNode("a", "relu", ("b",)), LayerNode("b", "relu", ("a",))],
              {}, {}, {"flow": "b"}, 1)
    with pytest.raises(GraphError):
        Graph([LayerNode("input", "input"), LayerNode("input", "relu", ("input",))], {}, {}, {"flow": "input"}, 1)
    with pytest.raises(GraphError):
        Graph([LayerNode("input", "input")], {}, {}, {"flow": "nope"}, 1)
    with pytest.raises(GraphError):
        _tiny().forward(np.ones((1, 3, 4, 3)))


def test_non_finite_reports_node():
    g = _tiny(weight=1e308)
    with pytest.raises(NonFiniteError) as exc:
        g.forward(np.full((1, 2, 2, 2), 1e308))
    assert exc.value.node_id == "a/pw"


def test_param_names_use_node_ids():
    g = build_nanoflownet(nanoflownet_s_config(input_height=32, input_width=48), rng=0)
    ids = {n.id for n in g.nodes}
    for k in list(g.params) + list(g.buffers):
        nid, slot = k.rsplit(".", 1)
        assert nid in ids and "." not in nid


def test_inference_graph_prunes_detail_head():
    g = build_nanoflownet(nanoflownet_s_config(input_height=32, input_width=48), rng=0)
    inf = g.inference_graph()
    assert set(inf.outputs) == {"flow"}
    assert not any(n.head == "detail" for n in inf.nodes)
    x = np.random.default_rng(0).random((1, 32, 48, 2))
    assert np.array_equal(inf.forward(x)["flow"], g.forward(x)["flow"])


def test_backward_matches_finite_difference_on_input():
    g = build_nanoflownet(nanoflownet_s_config(input_height=16, input_width=16, stem_channels=4,
                                               stages=[{"width": 8}, {"width": 16}, {"width": 16}],
                                               attention_channels=8, fusion_channels=8), rng=3)
    x = np.random.default_rng(1).random((2, 16, 16, 2))
    gout = np.random.default_rng(2).standard_normal((2, 16, 16, 2))
    outs, cache = g.forward(x, training=False, keep_cache=True)
    _, gx = g.backward(cache, {"flow": gout}, training=False, want_input_grad=True)
    rng = np.random.default_rng(5)
    for _ in range(10):
        idx = tuple(int(rng.integers(0, d)) for d in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += 1e-6
        xm[idx] -= 1e-6
        fd = (np.sum(g.forward(xp)["flow"] * gout) - np.sum(g.forward(xm)["flow"] * gout)) / 2e-6
        assert abs(fd - gx[idx]) <= 1e-4 * max(1.0, abs(fd))


def test_running_stats_update_uses_momentum():
    g = build_nanoflownet(nanoflownet_s_config(input_height=32, input_width=48), rng=0)
    x = np.random.default_rng(0).random((2, 32, 48, 2))
    _, cache = g.forward(x, training=True, keep_cache=True)
    bn = next(n for n in g.nodes if n.kind == "bn")
    mean, var = cache[f"{bn.id}:stats"]
    m = cache[bn.inputs[0]].shape[0] * cache[bn.inputs[0]].shape[1] * cache[bn.inputs[0]].shape[2]
    g.update_running_stats(cache)
    assert np.allclose(g.buffers[f"{bn.id}.mean"], 0.1 * mean)
    assert np.allclose(g.buffers[f"{bn.id}.var"], 0.9 + 0.1 * var * m / (m - 1))


def test_copy_is_deep():
    g = _tiny()
    h = g.copy()
    h.params["a/pw.weight"][...] = 0
    assert np.all(g.params["a/pw.weight"] == 1.0)
