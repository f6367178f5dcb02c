"""Parameter and MAC accounting for layer graphs.

MAC rules: dense conv ``Ho*Wo*kh*kw*Cin*Cout``, depthwise
``Ho*Wo*kh*kw*C``, pointwise ``Ho*Wo*Cin*Cout``. Pooling, resampling,
activations and normalization cost nothing. Channel attention is counted
as its pointwise layer applied to the 1x1 pooled map (``C*C``).
"""
from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import replace

from . import ops
from .graph import Graph
from .stdc import NetworkConfig, build_nanoflownet


def count_params(graph: Graph) -> int:
    """Trainable parameters (weights, biases, batch-norm scale and shift)."""
    return int(sum(v.size for v in graph.params.values()))


def node_macs(graph: Graph, height: int, width: int) -> dict[str, int]:
    shapes = graph.infer_shapes(height, width)
    macs = {}
    for n in graph.nodes:
        ho, wo, cout = shapes[n.id]
        if n.kind == "conv":
            kh, kw, cin, _ = graph.params[f"{n.id}.weight"].shape
            macs[n.id] = ops.conv_macs(ho, wo, kh, kw, cin, cout)
        elif n.kind == "dwconv":
            kh, kw, c = graph.params[f"{n.id}.weight"].shape
            macs[n.id] = ops.depthwise_macs(ho, wo, kh, kw, c)
        elif n.kind == "pwconv":
            cin = graph.params[f"{n.id}.weight"].shape[2]
            macs[n.id] = ops.conv_macs(ho, wo, 1, 1, cin, cout)
        elif n.kind == "attention":
            macs[n.id] = cout * cout
        else:
            macs[n.id] = 0
    return macs


def count_macs(graph: Graph, height: int, width: int, by: str = "stage") -> "OrderedDict[str, int]":
    """MACs grouped by ``stage`` or ``module`` (insertion order), plus ``total``."""
    per_node = node_macs(graph, height, width)
    table: OrderedDict[str, int] = OrderedDict()
    for n in graph.nodes:
        key = getattr(n, by) or "input"
        table[key] = table.get(key, 0) + per_node[n.id]
    table.pop("input", None)
    table["total"] = sum(per_node.values())
    return table


def params_by(graph: Graph, by: str = "stage") -> "OrderedDict[str, int]":
    table: OrderedDict[str, int] = OrderedDict()
    for n in graph.nodes:
        key = getattr(n, by) or "input"
        size = sum(v.size for k, v in graph.params.items() if k.split(".")[0] == n.id)
        table[key] = table.get(key, 0) + size
    table.pop("input", None)
    table["total"] = count_params(graph)
    return table


def strided_redesign_report(cfg: NetworkConfig) -> list[dict]:
    """Original vs modified strided modules, per encoder stage.

    Rows carry MACs of the strided module alone and of the whole stage,
    plus the fractional reduction ``1 - modified/original``.
    """
    h, w = cfg.input_height, cfg.input_width
    orig = build_nanoflownet(replace(cfg, strided_variant="original"), rng=None, training=False)
    mod = build_nanoflownet(replace(cfg, strided_variant="modified"), rng=None, training=False)
    om, mm = count_macs(orig, h, w, by="module"), count_macs(mod, h, w, by="module")
    os_, ms = count_macs(orig, h, w, by="stage"), count_macs(mod, h, w, by="stage")
    rows = []
    for si in range(len(cfg.stages)):
        key = f"s{si + 1}m0"
        stage = f"stage{si + 1}"
        rows.append({
            "stage": stage,
            "module_macs_original": om[key],
            "module_macs_modified": mm[key],
            "module_reduction": 1.0 - mm[key] / om[key],
            "stage_macs_original": os_[stage],
            "stage_macs_modified": ms[stage],
            "stage_reduction": 1.0 - ms[stage] / os_[stage],
        })
    return rows


def analyze(cfg: NetworkConfig) -> dict:
    train_graph = build_nanoflownet(cfg, rng=None, training=True)
    infer_graph = train_graph.inference_graph()
    h, w = cfg.input_height, cfg.input_width
    return {
        "name": cfg.name,
        "params_train_graph": count_params(train_graph),
        "params_inference_graph": count_params(infer_graph),
        "params_by_stage": dict(params_by(infer_graph)),
        "macs_by_stage": dict(count_macs(infer_graph, h, w)),
        "redesign": strided_redesign_report(cfg),
    }


def format_report(report: dict) -> str:
    lines = [f"network: {report['name']}",
             f"parameters (with detail head): {report['params_train_graph']:,}",
             f"parameters (inference graph):  {report['params_inference_graph']:,}",
             "", f"{'stage':<10}{'params':>12}{'MACs':>16}"]
    for k, v in report["macs_by_stage"].items():
        lines.append(f"{k:<10}{report['params_by_stage'].get(k, 0):>12,}{v:>16,}")
    lines += ["", f"{'stage':<10}{'strided orig':>14}{'strided mod':>14}{'reduction':>11}"
                  f"{'stage orig':>14}{'stage mod':>14}{'reduction':>11}"]
    for r in report["redesign"]:
        lines.append(f"{r['stage']:<10}{r['module_macs_original']:>14,}{r['module_macs_modified']:>14,}"
                     f"{r['module_reduction']:>10.1%} {r['stage_macs_original']:>14,}"
                     f"{r['stage_macs_modified']:>14,}{r['stage_reduction']:>10.1%}")
    return "\n".join(lines)


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(["section", "key", "params", "macs", "module_macs_original", "module_macs_modified",
                 "module_reduction", "stage_macs_original", "stage_macs_modified", "stage_reduction"])
    wr.writerow(["total", "train_graph", report["params_train_graph"], "", "", "", "", "", "", ""])
    wr.writerow(["total", "inference_graph", report["params_inference_graph"],
                 report["macs_by_stage"]["total"], "", "", "", "", "", ""])
    for k, v in report["macs_by_stage"].items():
        if k != "total":
            wr.writerow(["stage", k, report["params_by_stage"].get(k, 0), v, "", "", "", "", "", ""])
    for r in report["redesign"]:
        wr.writerow(["redesign", r["stage"], "", "", r["module_macs_original"], r["module_macs_modified"],
                     f"{r['module_reduction']:.6f}", r["stage_macs_original"], r["stage_macs_modified"],
                     f"{r['stage_reduction']:.6f}"])
    return buf.getvalue()
