"""Layer graph: nodes, validation, forward execution and reverse-mode backward.

A :class:`Graph` is an ordered (topologically sorted) list of
:class:`LayerNode` plus a flat parameter dictionary. Parameters are named
``"<node id>.<slot>"``; batch-norm running statistics live in
``Graph.buffers`` under the same naming scheme.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import ConvParams, BNStats
from .tensor import DTYPE, relu, sigmoid

BN_MOMENTUM = 0.9

PARAM_SLOTS = {
    "conv": ("weight", "bias"),
    "dwconv": ("weight", "bias"),
    "pwconv": ("weight", "bias"),
    "attention": ("weight", "bias"),
    "bn": ("gamma", "beta"),
}


class GraphError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, node_id: str):
        super().__init__(f"non-finite activation produced by node {node_id!r}")
        self.node_id = node_id


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    # bookkeeping for analysis: encoder stage index / module name / head tag
    stage: str | None = None
    module: str | None = None
    head: str | None = None

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "inputs": list(self.inputs),
                "attrs": dict(self.attrs), "stage": self.stage,
                "module": self.module, "head": self.head}


@dataclass
class Graph:
    nodes: list[LayerNode]
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    outputs: dict[str, str]
    input_channels: int
    config: dict | None = None

    def __post_init__(self):
        self._by_id = {n.id: n for n in self.nodes}
        self.validate_structure()

    # ---------------------------------------------------------------- access
    def node(self, node_id: str) -> LayerNode:
        return self._by_id[node_id]

    def param(self, node: LayerNode, slot: str) -> np.ndarray | None:
        return self.params.get(f"{node.id}.{slot}")

    def conv_params(self, node: LayerNode) -> ConvParams:
        return ConvParams(self.params[f"{node.id}.weight"], self.params.get(f"{node.id}.bias"),
                          node.attrs.get("stride", 1), node.attrs.get("padding", "same"))

    def bn_stats(self, node: LayerNode) -> BNStats:
        return BNStats(self.params[f"{node.id}.gamma"], self.params[f"{node.id}.beta"],
                       self.buffers[f"{node.id}.mean"], self.buffers[f"{node.id}.var"])

    def copy(self) -> "Graph":
        return Graph([copy.deepcopy(n) for n in self.nodes],
                     {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.buffers.items()},
                     dict(self.outputs), self.input_channels, copy.deepcopy(self.config))

    # ------------------------------------------------------------ validation
    def validate_structure(self) -> None:
        """Reject duplicate ids, dangling inputs and cycles.

        Nodes must be listed so that every input precedes its consumer; a
        back-reference is exactly what a cycle needs, so ordering doubles as
        the acyclicity check.
        """
        seen: set[str] = set()
        for n in self.nodes:
            if n.id in seen:
                raise GraphError(f"duplicate node id {n.id!r}")
            for i in n.inputs:
                if i not in self._by_id:
                    raise GraphError(f"node {n.id!r} references unknown input {i!r}")
                if i not in seen:
                    raise GraphError(f"cycle or misordering: {n.id!r} consumes {i!r} before it is defined")
            seen.add(n.id)
        for name, nid in self.outputs.items():
            if nid not in self._by_id:
                raise GraphError(f"output {name!r} refers to unknown node {nid!r}")

    def infer_shapes(self, height: int, width: int) -> dict[str, tuple[int, int, int]]:
        """Per-node (H, W, C) for a given input size; raises on any mismatch."""
        shapes: dict[str, tuple[int, int, int]] = {}
        for n in self.nodes:
            ins = [shapes[i] for i in n.inputs]
            shapes[n.id] = self._node_shape(n, ins, height, width, shapes)
        return shapes

    def _node_shape(self, n, ins, height, width, shapes):
        k = n.kind
        if k == "input":
            return (height, width, self.input_channels)
        (h, w, c) = ins[0]
        stride = n.attrs.get("stride", 1)
        pad = n.attrs.get("padding", "same")
        if k in ("conv", "dwconv", "pwconv"):
            wt = self.params[f"{n.id}.weight"]
            kh, kw = wt.shape[0], wt.shape[1]
            cin = wt.shape[2]
            if cin != c:
                raise GraphError(f"node {n.id!r}: expects {cin} input channels, got {c}")
            cout = c if k == "dwconv" else wt.shape[3]
            ho = ops.out_and_pads(h, kh, stride, pad)[0]
            wo = ops.out_and_pads(w, kw, stride, pad)[0]
            return (ho, wo, cout)
        if k == "avgpool":
            win = n.attrs["window"]
            return (ops.out_and_pads(h, win, stride, pad)[0], ops.out_and_pads(w, win, stride, pad)[0], c)
        if k == "upsample":
            th, tw = shapes[n.attrs["size_of"]][:2]
            if th < h or tw < w:
                raise GraphError(f"node {n.id!r}: upsample target smaller than input")
            return (th, tw, c)
        if k == "concat":
            if any(s[:2] != (h, w) for s in ins):
                raise GraphError(f"node {n.id!r}: spatial mismatch in concat {ins}")
            return (h, w, sum(s[2] for s in ins))
        if k == "add":
            if any(s != ins[0] for s in ins):
                raise GraphError(f"node {n.id!r}: shape mismatch in add {ins}")
            return ins[0]
        if k == "bn":
            if self.params[f"{n.id}.gamma"].shape != (c,):
                raise GraphError(f"node {n.id!r}: bn width mismatch")
            return ins[0]
        if k == "attention":
            if self.params[f"{n.id}.weight"].shape[-2:] != (c, c):
                raise GraphError(f"node {n.id!r}: attention must map {c} -> {c}")
            return ins[0]
        if k in ("relu", "sigmoid"):
            return ins[0]
        raise GraphError(f"unknown node kind {k!r}")

    # -------------------------------------------------------------- pruning
    def ancestors(self, node_ids) -> set[str]:
        keep: set[str] = set()
        stack = list(node_ids)
        while stack:
            nid = stack.pop()
            if nid in keep:
                continue
            keep.add(nid)
            stack.extend(self._by_id[nid].inputs)
        return keep

    def subgraph(self, output_names) -> "Graph":
        outs = {k: self.outputs[k] for k in output_names}
        keep = self.ancestors(outs.values())
        nodes = [copy.deepcopy(n) for n in self.nodes if n.id in keep]
        params = {k: v.copy() for k, v in self.params.items() if k.split(".")[0] in keep}
        buffers = {k: v.copy() for k, v in self.buffers.items() if k.split(".")[0] in keep}
        return Graph(nodes, params, buffers, outs, self.input_channels, copy.deepcopy(self.config))

    def inference_graph(self) -> "Graph":
        """The deployable graph: only ancestors of the flow output."""
        return self.subgraph(["flow"])

    def node_list(self) -> list[dict]:
        return [n.to_dict() for n in self.nodes]

    # ------------------------------------------------------------- execution
    def forward(self, x: np.ndarray, training: bool = False, keep_cache: bool = False,
                check_finite: bool = True):
        """Run the graph on an NHWC batch.

        Returns ``{output name: array}``; with ``keep_cache`` also the dict
        of all node activations (needed by :meth:`backward`). In training
        mode batch-norm uses batch statistics, which are stored in the cache
        under ``"<id>:stats"`` for :meth:`update_running_stats`.
        """
        if x.ndim != 4 or x.shape[3] != self.input_channels:
            raise GraphError(f"expected NHWC input with {self.input_channels} channels, got {x.shape}")
        acts: dict[str, np.ndarray] = {}
        extra: dict[str, tuple] = {}
        for n in self.nodes:
            ins = [acts[i] for i in n.inputs]
            # overflow surfaces as NonFiniteError below, not as a warning
            with np.errstate(over="ignore", invalid="ignore"):
                out = self._forward_node(n, ins, x, acts, training, extra)
            if check_finite and not np.all(np.isfinite(out)):
                raise NonFiniteError(n.id)
            acts[n.id] = out
        result = {name: acts[nid] for name, nid in self.outputs.items()}
        if keep_cache:
            cache = dict(acts)
            cache.update({f"{k}:stats": v for k, v in extra.items()})
            return result, cache
        return result

    def _forward_node(self, n, ins, x, acts, training, extra):
        k = n.kind
        if k == "input":
            return np.asarray(x, dtype=DTYPE)
        if k == "conv":
            return ops.conv2d_dense(ins[0], self.conv_params(n))
        if k == "dwconv":
            return ops.conv2d_depthwise(ins[0], self.conv_params(n))
        if k == "pwconv":
            return ops.conv2d_pointwise(ins[0], self.conv_params(n))
        if k == "bn":
            if training:
                y, mean, var = ops.batchnorm_train(ins[0], self.params[f"{n.id}.gamma"],
                                                   self.params[f"{n.id}.beta"])
                extra[n.id] = (mean, var)
                return y
            return ops.batchnorm_infer(ins[0], self.bn_stats(n))
        if k == "relu":
            return relu(ins[0])
        if k == "sigmoid":
            return sigmoid(ins[0])
        if k == "avgpool":
            return ops.avg_pool(ins[0], n.attrs["window"], n.attrs.get("stride", 1),
                                n.attrs.get("padding", "same"))
        if k == "upsample":
            th, tw = acts[n.attrs["size_of"]].shape[1:3]
            return ops.bilinear_upsample(ins[0], th, tw)
        if k == "concat":
            return ops.concat_channels(ins)
        if k == "add":
            out = ins[0].copy()
            for t in ins[1:]:
                out += t
            return out
        if k == "attention":
            return ops.channel_attention(ins[0], self.conv_params(n))
        raise GraphError(f"unknown node kind {k!r}")

    def update_running_stats(self, cache: dict, momentum: float = BN_MOMENTUM) -> None:
        for n in self.nodes:
            key = f"{n.id}:stats"
            if key in cache:
                mean, var = cache[key]
                m = cache[n.inputs[0]]
                count = m.shape[0] * m.shape[1] * m.shape[2]
                unbiased = var * count / max(count - 1, 1)
                self.buffers[f"{n.id}.mean"] = momentum * self.buffers[f"{n.id}.mean"] + (1 - momentum) * mean
                self.buffers[f"{n.id}.var"] = momentum * self.buffers[f"{n.id}.var"] + (1 - momentum) * unbiased

    def backward(self, cache: dict, output_grads: dict[str, np.ndarray], training: bool = True,
                 want_input_grad: bool = False):
        """Reverse-mode pass. Returns ``{param name: gradient}``.

        ``training`` must match the mode of the forward pass that produced
        ``cache`` (it selects the batch-norm derivative).
        """
        grads: dict[str, np.ndarray] = {}
        pgrads: dict[str, np.ndarray] = {}
        for name, g in output_grads.items():
            if g is None:
                continue
            nid = self.outputs[name]
            if g.shape != cache[nid].shape:
                raise GraphError(f"gradient for {name!r} has shape {g.shape}, expected {cache[nid].shape}")
            grads[nid] = grads.get(nid, 0) + g
        for n in reversed(self.nodes):
            g = grads.pop(n.id, None)
            if g is None or n.kind == "input":
                if n.kind == "input" and g is not None:
                    grads["__input__"] = g
                continue
            ins = [cache[i] for i in n.inputs]
            gin, gp = self._backward_node(n, g, ins, training)
            for slot, val in gp.items():
                key = f"{n.id}.{slot}"
                pgrads[key] = pgrads.get(key, 0) + val
            for i, gi in zip(n.inputs, gin):
                if gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        if want_input_grad:
            return pgrads, grads.get("__input__")
        return pgrads

    def _backward_node(self, n, g, ins, training):
        k = n.kind
        x = ins[0]
        if k == "conv":
            gx, gp = ops.backward_conv2d_dense(g, x, self.conv_params(n))
        elif k == "dwconv":
            gx, gp = ops.backward_conv2d_depthwise(g, x, self.conv_params(n))
        elif k == "pwconv":
            gx, gp = ops.backward_conv2d_pointwise(g, x, self.conv_params(n))
        elif k == "attention":
            gx, gp = ops.backward_channel_attention(g, x, self.conv_params(n))
        elif k == "bn":
            if training:
                gx, gp = ops.backward_batchnorm_train(g, x, self.params[f"{n.id}.gamma"])
            else:
                st = self.bn_stats(n)
                inv = 1.0 / np.sqrt(st.var + st.eps)
                gx = g * st.gamma * inv
                gp = {"gamma": (g * (x - st.mean) * inv).sum(axis=(0, 1, 2)),
                      "beta": g.sum(axis=(0, 1, 2))}
        elif k == "relu":
            gx, gp = ops.backward_relu(g, x)
        elif k == "sigmoid":
            gx, gp = ops.backward_sigmoid(g, x)
        elif k == "avgpool":
            gx, gp = ops.backward_avg_pool(g, x, n.attrs["window"], n.attrs.get("stride", 1),
                                           n.attrs.get("padding", "same"))
        elif k == "upsample":
            gx, gp = ops.backward_bilinear_upsample(g, x, g.shape[1], g.shape[2])
        elif k == "concat":
            gs, _ = ops.backward_concat_channels(g, ins)
            return gs, {}
        elif k == "add":
            return [g] * len(ins), {}
        else:
            raise GraphError(f"no backward for kind {k!r}")
        return [gx], gp

    def trainable_names(self) -> list[str]:
        return sorted(self.params)
