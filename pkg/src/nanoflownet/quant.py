"""8-bit post-training quantization.

Scheme: per-output-channel symmetric int8 weights, per-tensor affine int8
activations calibrated by min/max, int32 biases at ``w_scale * act_scale``.
Spatial convolutions accumulate in int32; requantization multiplies by the
float64 scale and rounds half away from zero.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .graph import Graph, LayerNode
from .ops import ConvParams
from .tensor import DTYPE, QuantTensor, relu, sigmoid

QMIN, QMAX = -128, 127
DEGENERATE_SCALE = 1e-8
SQNR_SENTINEL_RATIO = sys.float_info.max
SQNR_SENTINEL_DB = 10.0 * np.log10(SQNR_SENTINEL_RATIO)
CONV_KINDS = ("conv", "dwconv", "pwconv")


class QuantizationError(ValueError):
    pass


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(t: np.ndarray, scale, zero_point=0) -> np.ndarray:
    q = round_half_away(np.asarray(t, dtype=DTYPE) / scale) + zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def affine_params(lo: float, hi: float) -> tuple[float, int]:
    """Per-tensor affine parameters covering ``[lo, hi]`` (always including 0)."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi == lo:
        return DEGENERATE_SCALE, 0
    scale = (hi - lo) / (QMAX - QMIN)
    zp = int(np.clip(round_half_away(np.array(QMIN - lo / scale)), QMIN, QMAX))
    return scale, zp


def symmetric_params(absmax) -> np.ndarray:
    absmax = np.asarray(absmax, dtype=DTYPE)
    return np.where(absmax > 0, absmax / QMAX, DEGENERATE_SCALE)


def quantize_tensor(t: np.ndarray, scheme: str = "affine", axis: int | None = None,
                    value_range: tuple[float, float] | None = None) -> QuantTensor:
    """Quantize with ``scheme`` ``"affine"`` (per-tensor) or ``"symmetric"``.

    ``axis`` selects per-channel symmetric scales. ``value_range`` overrides
    the observed min/max for the affine scheme (calibrated ranges).
    """
    t = np.asarray(t, dtype=DTYPE)
    if not np.all(np.isfinite(t)):
        raise QuantizationError("cannot quantize non-finite values")
    if scheme == "symmetric":
        if axis is None:
            scale = float(symmetric_params(np.abs(t).max() if t.size else 0.0))
            return QuantTensor(quantize(t, scale), scale, 0)
        red = tuple(a for a in range(t.ndim) if a != axis % t.ndim)
        scale = symmetric_params(np.abs(t).max(axis=red))
        shape = [1] * t.ndim
        shape[axis] = -1
        return QuantTensor(quantize(t, scale.reshape(shape)), scale, np.zeros_like(scale, dtype=np.int64), axis % t.ndim)
    if scheme != "affine":
        raise QuantizationError(f"unknown scheme {scheme!r}")
    lo, hi = value_range if value_range is not None else (t.min(initial=0.0), t.max(initial=0.0))
    scale, zp = affine_params(lo, hi)
    return QuantTensor(quantize(t, scale, zp), scale, zp)


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.dequantize()


def sqnr(reference: np.ndarray, test: np.ndarray) -> tuple[float, float]:
    """Signal-to-quantization-noise ratio as ``(dB, raw ratio)``.

    Zero noise reports the sentinel maximum instead of infinity.
    """
    reference = np.asarray(reference, dtype=DTYPE)
    test = np.asarray(test, dtype=DTYPE)
    if reference.shape != test.shape:
        raise QuantizationError("sqnr operands differ in shape")
    signal = float(np.sum(reference ** 2))
    if signal == 0.0:
        raise QuantizationError("reference has zero energy")
    noise = float(np.sum((reference - test) ** 2))
    if noise == 0.0:
        return SQNR_SENTINEL_DB, SQNR_SENTINEL_RATIO
    ratio = signal / noise
    return 10.0 * np.log10(ratio), ratio


# --------------------------------------------------------------------------
# graph preparation


def fold_batchnorm(graph: Graph) -> Graph:
    """Inference graph with every conv->bn pair merged into one biased conv."""
    g = graph.copy()
    consumers: dict[str, int] = {}
    for n in g.nodes:
        for i in n.inputs:
            consumers[i] = consumers.get(i, 0) + 1
    rename: dict[str, str] = {}
    nodes: list[LayerNode] = []
    for n in g.nodes:
        n.inputs = tuple(rename.get(i, i) for i in n.inputs)
        if n.kind == "bn":
            src = g.node(n.inputs[0])
            if src.kind in CONV_KINDS and consumers.get(src.id, 0) == 1:
                folded = ops.batchnorm_fold(g.conv_params(src), g.bn_stats(n))
                g.params[f"{src.id}.weight"] = folded.weight
                g.params[f"{src.id}.bias"] = folded.bias
                for slot in ("gamma", "beta"):
                    del g.params[f"{n.id}.{slot}"]
                for slot in ("mean", "var"):
                    del g.buffers[f"{n.id}.{slot}"]
                rename[n.id] = src.id
                continue
        nodes.append(n)
    outputs = {k: rename.get(v, v) for k, v in g.outputs.items()}
    return Graph(nodes, g.params, g.buffers, outputs, g.input_channels, g.config)


def calibrate(graph: Graph, calibration_inputs) -> dict[str, tuple[float, float]]:
    """Per-node ``(min, max)`` of the activations over all calibration batches."""
    batches = list(calibration_inputs)
    if not batches:
        raise QuantizationError("empty calibration set")
    ranges: dict[str, tuple[float, float]] = {}
    for x in batches:
        _, acts = graph.forward(x, keep_cache=True)
        for n in graph.nodes:
            a = acts[n.id]
            lo, hi = float(a.min()), float(a.max())
            if n.id in ranges:
                plo, phi = ranges[n.id]
                lo, hi = min(lo, plo), max(hi, phi)
            ranges[n.id] = (lo, hi)
    return ranges


# --------------------------------------------------------------------------
# quantized graph


@dataclass
class QuantizedGraph:
    graph: Graph  # folded float graph providing structure
    act_params: dict[str, tuple[float, int]]
    weights: dict[str, QuantTensor] = field(default_factory=dict)
    biases: dict[str, np.ndarray] = field(default_factory=dict)  # int32

    def _conv_int(self, n: LayerNode, q_in: np.ndarray, in_scale: float, in_zp: int) -> np.ndarray:
        """int32 accumulation, then float64 rescale to real values."""
        qw = self.weights[n.id]
        w = qw.data.astype(np.int32)
        x = q_in.astype(np.int32) - np.int32(in_zp)
        stride = n.attrs.get("stride", 1)
        pad = n.attrs.get("padding", "same")
        p = ConvParams(w, None, stride, pad)
        if n.kind == "dwconv":
            acc = _int_depthwise(x, p)
        elif n.kind == "pwconv":
            acc = _int_pointwise(x, p)
        else:
            acc = _int_dense(x, p)
        if n.id in self.biases:
            acc = acc + self.biases[n.id]
        return acc.astype(DTYPE) * (in_scale * np.asarray(qw.scale))

    def forward(self, x: np.ndarray, return_all: bool = False):
        g = self.graph
        q: dict[str, np.ndarray] = {}
        for n in g.nodes:
            s, zp = self.act_params[n.id]
            if n.kind == "input":
                q[n.id] = quantize(x, s, zp)
                continue
            ins = [(q[i], *self.act_params[i]) for i in n.inputs]
            if n.kind in CONV_KINDS:
                real = self._conv_int(n, *ins[0])
            else:
                real = self._float_node(n, [(qi.astype(DTYPE) - zi) * si for qi, si, zi in ins], q)
            q[n.id] = quantize(real, s, zp)
        out = {}
        for name, nid in g.outputs.items():
            s, zp = self.act_params[nid]
            out[name] = (q[nid].astype(DTYPE) - zp) * s
        return (out, q) if return_all else out

    def _float_node(self, n: LayerNode, ins, q):
        k = n.kind
        if k == "relu":
            return relu(ins[0])
        if k == "sigmoid":
            return sigmoid(ins[0])
        if k == "avgpool":
            return ops.avg_pool(ins[0], n.attrs["window"], n.attrs.get("stride", 1), n.attrs.get("padding", "same"))
        if k == "upsample":
            th, tw = q[n.attrs["size_of"]].shape[1:3]
            return ops.bilinear_upsample(ins[0], th, tw)
        if k == "concat":
            return ops.concat_channels(ins)
        if k == "add":
            return sum(ins[1:], ins[0].copy())
        if k == "attention":
            qw = self.weights[n.id]
            b = self.graph.params.get(f"{n.id}.bias")
            return ops.channel_attention(ins[0], ConvParams(qw.dequantize(), b))
        raise QuantizationError(f"node kind {k!r} has no quantized implementation")

    def dequantized_graph(self) -> Graph:
        """Float graph whose weights/biases are the dequantized int8/int32 values."""
        g = self.graph.copy()
        for nid, qw in self.weights.items():
            g.params[f"{nid}.weight"] = qw.dequantize()
            if nid in self.biases:
                n = g.node(nid)
                s_in = self.act_params[n.inputs[0]][0]
                g.params[f"{nid}.bias"] = self.biases[nid].astype(DTYPE) * s_in * np.asarray(qw.scale)
        return g

    def tensors(self) -> dict[str, np.ndarray]:
        """Payload for the NFNW container (int8 data plus scale/zero-point records)."""
        out: dict[str, np.ndarray] = {}
        for nid, qw in self.weights.items():
            out[f"qweight/{nid}"] = qw.data
            out[f"qweight/{nid}:scale"] = np.atleast_1d(np.asarray(qw.scale, dtype=np.float64))
            out[f"qweight/{nid}:zero_point"] = np.atleast_1d(np.asarray(qw.zero_point, dtype=np.int32))
        for nid, b in self.biases.items():
            out[f"qbias/{nid}"] = b.astype(np.int32)
        for nid, (s, zp) in self.act_params.items():
            out[f"act/{nid}:scale"] = np.array([s], dtype=np.float64)
            out[f"act/{nid}:zero_point"] = np.array([zp], dtype=np.int32)
        for k, v in self.graph.params.items():
            nid = k.split(".")[0]
            if nid not in self.weights:
                out[f"param/{k}"] = v
        return out


def _int_pointwise(x: np.ndarray, p: ConvParams) -> np.ndarray:
    w = p.weight.reshape(p.weight.shape[-2], p.weight.shape[-1]).astype(np.int64)
    if p.stride > 1:
        x = x[:, ::p.stride, ::p.stride, :]
    n, h, wd, c = x.shape
    acc = x.reshape(-1, c).astype(np.int64) @ w
    return _to_int32(acc).reshape(n, h, wd, -1)


def _int_depthwise(x: np.ndarray, p: ConvParams) -> np.ndarray:
    kh, kw, c = p.weight.shape
    xp, ho, wo, _ = ops._pad(x, kh, kw, p.stride, p.padding)
    acc = np.zeros((x.shape[0], ho, wo, c), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            acc += ops._tap(xp, i, j, ho, wo, p.stride).astype(np.int64) * p.weight[i, j]
    return _to_int32(acc)


def _int_dense(x: np.ndarray, p: ConvParams) -> np.ndarray:
    kh, kw, cin, cout = p.weight.shape
    cols, ho, wo, _, _ = ops._im2col(x, kh, kw, p.stride, p.padding)
    acc = cols.astype(np.int64) @ p.weight.reshape(-1, cout).astype(np.int64)
    return _to_int32(acc).reshape(x.shape[0], ho, wo, cout)


def _to_int32(acc: np.ndarray) -> np.ndarray:
    info = np.iinfo(np.int32)
    if acc.size and (acc.max() > info.max or acc.min() < info.min):
        raise QuantizationError("int32 accumulator overflow")
    return acc.astype(np.int32)


def quantize_network(graph: Graph, calibration_inputs=None,
                     ranges: dict[str, tuple[float, float]] | None = None) -> QuantizedGraph:
    """Fold batch-norm, calibrate (unless ``ranges`` given) and quantize.

    ``graph`` is the float inference graph; any detail head is dropped.
    """
    g = graph.inference_graph() if "detail" in graph.outputs else graph
    g = fold_batchnorm(g)
    if ranges is None:
        if calibration_inputs is None:
            raise QuantizationError("quantize_network needs calibration inputs or ranges")
        ranges = calibrate(g, calibration_inputs)
    missing = [n.id for n in g.nodes if n.id not in ranges]
    if missing:
        raise QuantizationError(f"uncalibrated nodes: {missing[:5]}")
    act = {nid: affine_params(*ranges[nid]) for nid in (n.id for n in g.nodes)}
    qg = QuantizedGraph(g, act)
    for n in g.nodes:
        if n.kind in CONV_KINDS or n.kind == "attention":
            w = g.params[f"{n.id}.weight"]
            qg.weights[n.id] = quantize_tensor(w, "symmetric", axis=w.ndim - 1)
        if n.kind in CONV_KINDS and f"{n.id}.bias" in g.params:
            s_in = act[n.inputs[0]][0]
            bscale = s_in * np.asarray(qg.weights[n.id].scale)
            b = round_half_away(g.params[f"{n.id}.bias"] / bscale)
            info = np.iinfo(np.int32)
            qg.biases[n.id] = np.clip(b, info.min, info.max).astype(np.int32)
    return qg


def output_sqnr(float_graph: Graph, qgraph: QuantizedGraph, inputs, output: str = "flow") -> dict:
    """Per-batch SQNR of quantized vs float outputs, averaged in dB and as ratios."""
    ref_graph = float_graph.inference_graph() if "detail" in float_graph.outputs else float_graph
    dbs, ratios = [], []
    for x in inputs:
        ref = ref_graph.forward(x)[output]
        test = qgraph.forward(x)[output]
        for r, t in zip(ref, test):
            db, ratio = sqnr(r, t)
            dbs.append(db)
            ratios.append(ratio)
    return {"mean_db": float(np.mean(dbs)), "mean_ratio": float(np.mean(ratios)),
            "per_sample_db": dbs, "per_sample_ratio": ratios}


def quantized_from_tensors(config, tensors: dict[str, np.ndarray]) -> QuantizedGraph:
    """Rebuild a :class:`QuantizedGraph` from :meth:`QuantizedGraph.tensors` output."""
    from .stdc import NetworkConfig, build_nanoflownet

    cfg = config if isinstance(config, NetworkConfig) else NetworkConfig.from_dict(config)
    g = fold_batchnorm(build_nanoflownet(cfg, rng=None, training=False))
    qg = QuantizedGraph(g, {})
    try:
        for n in g.nodes:
            qg.act_params[n.id] = (float(tensors[f"act/{n.id}:scale"][0]),
                                   int(tensors[f"act/{n.id}:zero_point"][0]))
            if f"qweight/{n.id}" in tensors:
                scale = tensors[f"qweight/{n.id}:scale"].astype(DTYPE)
                data = tensors[f"qweight/{n.id}"]
                qg.weights[n.id] = QuantTensor(data, scale, np.zeros_like(scale, dtype=np.int64), data.ndim - 1)
            if f"qbias/{n.id}" in tensors:
                qg.biases[n.id] = tensors[f"qbias/{n.id}"].astype(np.int32)
        for k in g.params:
            if k.split(".")[0] not in qg.weights:
                g.params[k] = tensors[f"param/{k}"].astype(DTYPE)
    except KeyError as exc:
        raise QuantizationError(f"quantized checkpoint lacks {exc.args[0]}") from exc
    return qg
