"""STDC modules and the NanoFlowNet network builder.

Every spatial convolution is depthwise separable (3x3 depthwise followed
by a pointwise convolution) and every layer in a block is followed by
batch-norm and ReLU. Two strided module layouts are provided:

``original``
    pointwise M->N/2 at the input resolution, then a stride-2 DS chain on
    those features, plus a 3x3/2 average-pool skip of the N/2 features.
``modified``
    the DS chain (stride 2 first) runs directly on the M input features,
    while the pointwise convolution moves to a bottom path *after* the
    average pooling, so it runs at a quarter of the pixels.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .graph import Graph, LayerNode

DEFAULT_FRACTIONS = (0.5, 0.25, 0.125, 0.125)


class ConfigError(ValueError):
    pass


@dataclass
class StdcModuleCfg:
    in_ch: int
    out_ch: int
    strided: bool = False
    variant: str = "modified"
    block_filter_fractions: tuple[float, ...] = DEFAULT_FRACTIONS

    def widths(self) -> list[int]:
        """Output width of every block; validates the configuration."""
        if self.in_ch < 1 or self.out_ch < 1:
            raise ConfigError("module channel counts must be >= 1")
        if self.variant not in ("original", "modified"):
            raise ConfigError(f"unknown STDC variant {self.variant!r}")
        fr = [Fraction(f).limit_denominator(1024) for f in self.block_filter_fractions]
        if len(fr) < 2 or sum(fr) != 1 or any(f <= 0 for f in fr):
            raise ConfigError(f"block fractions must be positive and sum to 1: {self.block_filter_fractions}")
        widths = []
        for f in fr:
            w = self.out_ch * f
            if w.denominator != 1:
                raise ConfigError(f"out_ch={self.out_ch} not divisible by the fraction denominators")
            widths.append(int(w))
        return widths


@dataclass
class StageCfg:
    width: int
    modules: int = 2  # one strided + (modules - 1) plain


@dataclass
class NetworkConfig:
    name: str = "nanoflownet"
    input_height: int = 112
    input_width: int = 160
    input_channels: int = 1  # per frame; the two frames are stacked
    stem_channels: int = 16
    stages: list[StageCfg] = field(default_factory=lambda: [StageCfg(64), StageCfg(128), StageCfg(256)])
    strided_variant: str = "modified"
    block_filter_fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    attention_channels: int = 64
    fusion_channels: int = 128
    flow_channels: int = 2
    detail_head: bool = True
    detail_stage: int = 0  # index into ``stages``
    grayscale: bool = True

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageCfg) else StageCfg(**s) for s in self.stages]
        self.block_filter_fractions = tuple(self.block_filter_fractions)

    @property
    def network_input_channels(self) -> int:
        return 2 * self.input_channels

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.stages) + (1 if self.stem_channels else 0))

    def validate(self) -> None:
        if self.grayscale and self.input_channels != 1:
            raise ConfigError("grayscale configs take one channel per frame")
        if self.flow_channels != 2:
            raise ConfigError("the flow head must output 2 channels")
        if len(self.stages) < 2:
            raise ConfigError("need at least two encoder stages (deep + shallow)")
        if any(s.modules < 1 for s in self.stages):
            raise ConfigError("each stage needs at least one (strided) module")
        if not 0 <= self.detail_stage < len(self.stages):
            raise ConfigError("detail_stage out of range")
        d = self.downsampling
        if self.input_height % d or self.input_width % d:
            raise ConfigError(f"input {self.input_height}x{self.input_width} must be divisible by {d}")
        prev = self.stem_channels or self.network_input_channels
        for s in self.stages:
            StdcModuleCfg(prev, s.width, True, self.strided_variant, self.block_filter_fractions).widths()
            prev = s.width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_filter_fractions"] = list(self.block_filter_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    def save(self, path) -> None:
        from .flowio import atomic_write

        atomic_write(path, json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def nanoflownet_config(**overrides) -> NetworkConfig:
    return replace(NetworkConfig(), **overrides)


def nanoflownet_s_config(**overrides) -> NetworkConfig:
    """Half the filters of NanoFlowNet everywhere."""
    base = NetworkConfig(name="nanoflownet-s", stem_channels=8,
                         stages=[StageCfg(32), StageCfg(64), StageCfg(128)],
                         attention_channels=32, fusion_channels=64)
    return replace(base, **overrides)


PRESETS = {"nanoflownet": nanoflownet_config, "nanoflownet-s": nanoflownet_s_config}


# --------------------------------------------------------------------------
# builder


class _Builder:
    def __init__(self, rng: np.random.Generator | None):
        self.rng = rng
        self.nodes: list[LayerNode] = []
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.channels: dict[str, int] = {}
        self.stage: str | None = None
        self.module: str | None = None
        self.head: str | None = None

    def _add(self, nid, kind, inputs, channels, **attrs) -> str:
        self.nodes.append(LayerNode(nid, kind, tuple(inputs), attrs,
                                    self.stage, self.module, self.head))
        self.channels[nid] = channels
        return nid

    def _uniform(self, shape, fan_in):
        if self.rng is None:
            return np.zeros(shape)
        bound = np.sqrt(6.0 / fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def input(self, channels):
        return self._add("input", "input", [], channels)

    def dw(self, nid, x, stride=1, k=3, bias=False):
        c = self.channels[x]
        self.params[f"{nid}.weight"] = self._uniform((k, k, c), k * k)
        if bias:
            self.params[f"{nid}.bias"] = np.zeros(c)
        return self._add(nid, "dwconv", [x], c, stride=stride)

    def pw(self, nid, x, cout, stride=1, bias=False):
        cin = self.channels[x]
        self.params[f"{nid}.weight"] = self._uniform((1, 1, cin, cout), cin)
        if bias:
            self.params[f"{nid}.bias"] = np.zeros(cout)
        return self._add(nid, "pwconv", [x], cout, stride=stride)

    def bn(self, nid, x):
        c = self.channels[x]
        self.params[f"{nid}.gamma"] = np.ones(c)
        self.params[f"{nid}.beta"] = np.zeros(c)
        self.buffers[f"{nid}.mean"] = np.zeros(c)
        self.buffers[f"{nid}.var"] = np.ones(c)
        return self._add(nid, "bn", [x], c)

    def relu(self, nid, x):
        return self._add(nid, "relu", [x], self.channels[x])

    def pw_bn_relu(self, name, x, cout):
        return self.relu(f"{name}/relu", self.bn(f"{name}/bn", self.pw(f"{name}/pw", x, cout)))

    def ds_bn_relu(self, name, x, cout, stride=1):
        y = self.dw(f"{name}/dw", x, stride=stride)
        y = self.pw(f"{name}/pw", y, cout)
        return self.relu(f"{name}/relu", self.bn(f"{name}/bn", y))

    def avgpool(self, nid, x, window=3, stride=2):
        return self._add(nid, "avgpool", [x], self.channels[x], window=window, stride=stride)

    def concat(self, nid, xs):
        return self._add(nid, "concat", xs, sum(self.channels[x] for x in xs))

    def attention(self, nid, x):
        c = self.channels[x]
        # zero logits: every channel starts at a 0.5 gate
        self.params[f"{nid}.weight"] = np.zeros((1, 1, c, c))
        self.params[f"{nid}.bias"] = np.zeros(c)
        return self._add(nid, "attention", [x], c)

    def upsample(self, nid, x, size_of):
        return self._add(nid, "upsample", [x], self.channels[x], size_of=size_of)

    def add(self, nid, xs):
        return self._add(nid, "add", xs, self.channels[xs[0]])

    def sigmoid(self, nid, x):
        return self._add(nid, "sigmoid", [x], self.channels[x])


def _stdc_module(b: _Builder, name: str, x: str, cfg: StdcModuleCfg) -> str:
    widths = cfg.widths()
    if b.channels[x] != cfg.in_ch:
        raise ConfigError(f"{name}: input has {b.channels[x]} channels, cfg says {cfg.in_ch}")
    outs = []
    if not cfg.strided:
        y = b.pw_bn_relu(f"{name}/b0", x, widths[0])
        outs.append(y)
        for i, wdt in enumerate(widths[1:], start=1):
            y = b.ds_bn_relu(f"{name}/b{i}", y, wdt)
            outs.append(y)
    elif cfg.variant == "original":
        y = b.pw_bn_relu(f"{name}/b0", x, widths[0])
        outs.append(b.avgpool(f"{name}/skip", y))
        for i, wdt in enumerate(widths[1:], start=1):
            y = b.ds_bn_relu(f"{name}/b{i}", y, wdt, stride=2 if i == 1 else 1)
            outs.append(y)
    else:
        pooled = b.avgpool(f"{name}/pool", x)
        outs.append(b.pw_bn_relu(f"{name}/b0", pooled, widths[0]))
        y = x
        for i, wdt in enumerate(widths[1:], start=1):
            y = b.ds_bn_relu(f"{name}/b{i}", y, wdt, stride=2 if i == 1 else 1)
            outs.append(y)
    return b.concat(f"{name}/cat", outs)


def build_stdc_module(cfg: StdcModuleCfg, rng: np.random.Generator | None = None) -> Graph:
    """A standalone graph (``input -> module``) for one STDC module."""
    b = _Builder(rng)
    x = b.input(cfg.in_ch)
    b.module = "module"
    out = _stdc_module(b, "module", x, cfg)
    return Graph(b.nodes, b.params, b.buffers, {"out": out}, cfg.in_ch)


def build_nanoflownet(cfg: NetworkConfig, rng: np.random.Generator | int | None = 0,
                      training: bool = True) -> Graph:
    """Build the full network.

    ``rng=None`` leaves all weights at zero. With ``training=False`` the
    detail head is omitted entirely.
    """
    cfg.validate()
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    b = _Builder(rng)
    x = b.input(cfg.network_input_channels)
    y = x
    if cfg.stem_channels:
        b.stage = "stem"
        b.module = "stem"
        y = b.ds_bn_relu("stem", y, cfg.stem_channels, stride=2)
    stage_outs = []
    for si, st in enumerate(cfg.stages):
        b.stage = f"stage{si + 1}"
        for mi in range(st.modules):
            name = f"s{si + 1}m{mi}"
            b.module = name
            mcfg = StdcModuleCfg(b.channels[y], st.width, strided=(mi == 0),
                                 variant=cfg.strided_variant,
                                 block_filter_fractions=cfg.block_filter_fractions)
            y = _stdc_module(b, name, y, mcfg)
        stage_outs.append(y)

    b.stage = "head"
    deep, shallow = stage_outs[-1], stage_outs[-2]
    b.module = "arm"
    r = b.ds_bn_relu("arm/conv", deep, cfg.attention_channels)
    r = b.attention("arm/att", r)
    r = b.upsample("arm/up", r, size_of=shallow)
    b.module = "ffm"
    f = b.pw_bn_relu("ffm/conv", b.concat("ffm/cat", [r, shallow]), cfg.fusion_channels)
    f = b.add("ffm/res", [f, b.attention("ffm/att", f)])
    b.module = "flow"
    flow = b.pw("flow/pw", f, cfg.flow_channels, bias=True)
    flow = b.upsample("flow/up", flow, size_of=x)
    outputs = {"flow": flow}

    if training and cfg.detail_head:
        b.stage, b.module, b.head = "head", "detail", "detail"
        d = b.pw("detail/pw", stage_outs[cfg.detail_stage], 1, bias=True)
        d = b.sigmoid("detail/sig", d)
        outputs["detail"] = b.upsample("detail/up", d, size_of=x)
    g = Graph(b.nodes, b.params, b.buffers, outputs, cfg.network_input_channels, cfg.to_dict())
    g.infer_shapes(cfg.input_height, cfg.input_width)
    return g


def stack_frames(frame0: np.ndarray, frame1: np.ndarray) -> np.ndarray:
    """Stack two (H, W) or (N, H, W[, C]) frame batches into the network input."""
    f0, f1 = np.asarray(frame0, dtype=float), np.asarray(frame1, dtype=float)
    if f0.ndim == 2:
        f0, f1 = f0[None], f1[None]
    if f0.ndim == 3:
        f0, f1 = f0[..., None], f1[..., None]
    return np.concatenate([f0, f1], axis=3)
