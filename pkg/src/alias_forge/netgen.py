"""Random CIFAR-sized CNN generator used for attack corpora and defense evaluation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import LayerKind, LayerSpec, ModelGraph, infer_shapes, init_missing_weights

STAGE_KINDS = ("conv", "residual", "depthwise", "pool")


@dataclass(frozen=True)
class NetGenConfig:
    conv_range: tuple[int, int] = (4, 12)
    fc_range: tuple[int, int] = (1, 4)
    channel_choices: tuple[int, ...] = (16, 32, 64, 128, 256)
    fc_dim_choices: tuple[int, ...] = (64, 128, 256, 512)
    p_residual: float = 0.15
    p_depthwise: float = 0.15
    p_pool: float = 0.2
    input_shape: tuple[int, int, int] = (3, 32, 32)
    classes: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("conv_range", "fc_range"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name}={getattr(self, name)} is not a non-empty positive range")
        probs = (self.p_residual, self.p_depthwise, self.p_pool)
        if any(not 0.0 <= p <= 1.0 for p in probs) or sum(probs) > 1.0:
            raise ValueError(f"replacement probabilities {probs} must lie in [0, 1] and sum to <= 1")
        if not self.channel_choices or not self.fc_dim_choices:
            raise ValueError("channel and FC dimension choices must be non-empty")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "default": NetGenConfig(),
    # narrower nets, more pooling, fewer block swaps
    "compact": NetGenConfig(channel_choices=(8, 16, 32, 64), fc_dim_choices=(32, 64, 128),
                            p_residual=0.1, p_depthwise=0.1, p_pool=0.3),
}


@dataclass
class Layout:
    stages: list[tuple[str, int]] = field(default_factory=list)
    fc_dims: list[int] = field(default_factory=list)

    @property
    def n_conv(self) -> int:
        return len(self.stages)

    @property
    def n_fc(self) -> int:
        return len(self.fc_dims)


def draw_layout(cfg: NetGenConfig, rng: np.random.Generator) -> Layout:
    n_conv = int(rng.integers(cfg.conv_range[0], cfg.conv_range[1] + 1))
    n_fc = int(rng.integers(cfg.fc_range[0], cfg.fc_range[1] + 1))
    cut_res = cfg.p_residual
    cut_dw = cut_res + cfg.p_depthwise
    cut_pool = cut_dw + cfg.p_pool
    layout = Layout()
    for pos in range(n_conv):
        u = rng.random()
        ch = int(rng.choice(cfg.channel_choices))
        if pos == 0:
            kind = "conv"
        elif u < cut_res:
            kind = "residual"
        elif u < cut_dw:
            kind = "depthwise"
        elif u < cut_pool:
            kind = "pool"
        else:
            kind = "conv"
        layout.stages.append((kind, ch))
    layout.fc_dims = [int(rng.choice(cfg.fc_dim_choices)) for _ in range(n_fc - 1)] + [cfg.classes]
    return layout


class _Chain:
    def __init__(self, shape):
        self.nodes: list[LayerSpec] = []
        c, h, w = shape
        self.c, self.h, self.w = c, h, w
        self.tip = self._push(LayerSpec(id=0, kind=LayerKind.INPUT, c=c, j=c, in_h=h, in_w=w))

    def _push(self, node: LayerSpec) -> int:
        self.nodes.append(node)
        return node.id

    def add(self, kind: LayerKind, inputs=None, **kw) -> int:
        nid = len(self.nodes)
        ins = tuple(inputs) if inputs is not None else (self.tip,)
        self.tip = self._push(LayerSpec(id=nid, kind=kind, inputs=ins, **kw))
        return self.tip

    def conv(self, j: int, k: int = 3, stride: int = 1, groups: int = 1) -> int:
        nid = self.add(LayerKind.CONV2D, k1=k, k2=k, c=self.c, j=j, stride=stride,
                       groups=groups, in_h=self.h, in_w=self.w)
        self.c = j
        self.h, self.w = -(-self.h // stride), -(-self.w // stride)
        return nid

    def bn(self) -> int:
        return self.add(LayerKind.BATCH_NORM, c=self.c, j=self.c)

    def relu(self) -> int:
        return self.add(LayerKind.RELU)

    def pool(self, kind: LayerKind, k: int, stride: int) -> int:
        nid = self.add(kind, k1=k, k2=k, c=self.c, j=self.c, stride=stride, in_h=self.h, in_w=self.w)
        self.h = (self.h - k) // stride + 1
        self.w = (self.w - k) // stride + 1
        return nid

    def fc(self, j: int) -> int:
        nid = self.add(LayerKind.FULLY_CONNECTED, c=self.c * self.h * self.w, j=j,
                       in_h=self.h, in_w=self.w)
        self.c, self.h, self.w = j, 1, 1
        return nid

    def finish(self, name: str) -> ModelGraph:
        out = self.add(LayerKind.OUTPUT)
        return ModelGraph(self.nodes, 0, out, name)


def build(layout: Layout, cfg: NetGenConfig, name: str = "random") -> ModelGraph:
    net = _Chain(cfg.input_shape)
    for kind, ch in layout.stages:
        if kind == "pool" and min(net.h, net.w) < 2:
            kind = "conv"
        if kind == "conv":
            net.conv(ch)
            net.bn()
            net.relu()
        elif kind == "residual":
            entry = net.tip
            net.conv(net.c)
            net.bn()
            net.relu()
            net.conv(net.c)
            net.bn()
            net.add(LayerKind.ADD, inputs=(net.tip, entry))
            net.relu()
        elif kind == "depthwise":
            net.conv(net.c, groups=net.c)
            net.bn()
            net.relu()
            net.conv(ch, k=1)
            net.bn()
            net.relu()
        else:
            net.pool(LayerKind.MAX_POOL, 2, 2)
    if net.h > 1 or net.w > 1:
        # global average pool so the classifier sees a flat channel vector
        net.pool(LayerKind.AVG_POOL, net.h, net.h)
    for i, dim in enumerate(layout.fc_dims):
        net.fc(dim)
        if i < len(layout.fc_dims) - 1:
            net.bn()
            net.relu()
    return net.finish(name)


def generate(cfg: NetGenConfig, rng: np.random.Generator | int | None = None,
             with_weights: bool = True, name: str | None = None) -> ModelGraph:
    """Draw one random network. ``rng`` defaults to a stream seeded by ``cfg.seed``."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
    layout = draw_layout(cfg, rng)
    weight_seed = int(rng.integers(2**31))
    graph = infer_shapes(build(layout, cfg, name or "random"))
    if with_weights:
        graph = init_missing_weights(graph, weight_seed)
    return graph


def corpus(cfg: NetGenConfig, count: int, seed: int | None = None,
           with_weights: bool = False) -> list[ModelGraph]:
    """``count`` networks, network i drawn from its own stream (seed, i)."""
    base = cfg.seed if seed is None else seed
    return [generate(cfg, np.random.default_rng([base, i]), with_weights, name=f"net{i:05d}")
            for i in range(count)]


def resnet20_like(with_weights: bool = True, seed: int = 0) -> ModelGraph:
    """CIFAR ResNet in the ResNet-20 style: stem, three stages of two basic blocks, FC head.

    Stages two and three downsample with a strided first conv and a 1x1 projection
    shortcut. 22 kernel-emitting nodes.
    """
    net = _Chain((3, 32, 32))
    net.conv(16)
    net.bn()
    net.relu()
    for stage, width in enumerate((16, 32, 64)):
        for block in range(2):
            entry, entry_c, entry_h = net.tip, net.c, net.h
            stride = 2 if stage > 0 and block == 0 else 1
            net.conv(width, stride=stride)
            net.bn()
            net.relu()
            net.conv(width)
            main = net.bn()
            shortcut = entry
            if stride != 1 or entry_c != width:
                c, h, w = net.c, net.h, net.w
                net.c, net.h, net.w = entry_c, entry_h, entry_h
                net.tip = entry
                net.conv(width, k=1, stride=stride)
                shortcut = net.bn()
                net.c, net.h, net.w = c, h, w
            net.add(LayerKind.ADD, inputs=(main, shortcut))
            net.relu()
    net.fc(10)
    graph = infer_shapes(net.finish("resnet20-like"))
    return init_missing_weights(graph, seed) if with_weights else graph
