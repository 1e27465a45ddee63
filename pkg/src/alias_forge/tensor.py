"""Reference forward pass, used only to check that rewrites keep the network's function."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import GraphError, LayerKind, LayerSpec, ModelGraph, infer_shapes

BN_EPS = 1e-5


@dataclass(eq=False)
class Tensor3:
    """A (c, h, w) activation in channel-major order."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 1:
            raise ValueError("Tensor3 needs explicit (c, h, w) dimensions")
        if self.data.ndim != 3:
            raise ValueError(f"Tensor3 data must be 3-D, got shape {self.data.shape}")

    @classmethod
    def from_flat(cls, c: int, h: int, w: int, values) -> "Tensor3":
        values = np.asarray(values)
        if values.size != c * h * w:
            raise ValueError(f"{values.size} values do not fill a {c}x{h}x{w} tensor")
        return cls(values.reshape(c, h, w))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def c(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]


def write_tensor(path, t: Tensor3) -> None:
    """Raw tensor file: three little-endian uint32 dims, then float32 values."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *t.shape))
        fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_tensor(path) -> Tensor3:
    with open(path, "rb") as fh:
        c, h, w = struct.unpack("<3I", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    return Tensor3.from_flat(c, h, w, data.astype(np.float32))


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, groups: int = 1) -> np.ndarray:
    """Same-padded cross-correlation. x: (c, h, w), w: (k1, k2, c/groups, j)."""
    k1, k2, cg, j = w.shape
    c, h, wd = x.shape
    pt, pb = _same_pad(h, k1, stride)
    pl, pr = _same_pad(wd, k2, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    # windows: (c, oh, ow, k1, k2)
    win = sliding_window_view(xp, (k1, k2), axis=(1, 2))[:, ::stride, ::stride]
    w = w.astype(np.float64)
    if groups == 1:
        return np.einsum("cyxab,abcj->jyx", win, w, optimize=True)
    jg = j // groups
    outs = []
    for g in range(groups):
        xs = win[g * cg:(g + 1) * cg]
        ws = w[:, :, :, g * jg:(g + 1) * jg]
        outs.append(np.einsum("cyxab,abcj->jyx", xs, ws, optimize=True))
    return np.concatenate(outs, axis=0)


def _pool(x: np.ndarray, node: LayerSpec, reduce) -> np.ndarray:
    win = sliding_window_view(x, (node.k1, node.k2), axis=(1, 2))[:, ::node.stride, ::node.stride]
    return reduce(win, axis=(3, 4))


def _weights(node: LayerSpec) -> np.ndarray:
    if node.weights is None:
        raise GraphError(f"node {node.id} ({node.kind}) has no weights to evaluate")
    return node.weights


def eval_node(node: LayerSpec, args: list[np.ndarray]) -> np.ndarray:
    kind = node.kind
    if kind is LayerKind.CONV2D:
        w = _weights(node).reshape(node.expected_weight_shape())
        return conv2d(args[0], w, node.stride, node.groups)
    if kind is LayerKind.FULLY_CONNECTED:
        w = _weights(node).reshape(node.c, node.j).astype(np.float64)
        return (args[0].reshape(-1) @ w).reshape(node.j, 1, 1)
    if kind is LayerKind.RELU:
        return np.maximum(args[0], 0.0)
    if kind is LayerKind.BATCH_NORM:
        x = args[0]
        scale, shift, mean, var = _weights(node).reshape(4, x.shape[0]).astype(np.float64)
        inv = scale / np.sqrt(var + BN_EPS)
        return (x - mean[:, None, None]) * inv[:, None, None] + shift[:, None, None]
    if kind is LayerKind.MAX_POOL:
        return _pool(args[0], node, np.max)
    if kind is LayerKind.AVG_POOL:
        return _pool(args[0], node, np.mean)
    if kind is LayerKind.ADD:
        out = args[0].copy()
        for a in args[1:]:
            out += a
        return out
    if kind is LayerKind.CONCAT:
        return np.concatenate(args, axis=0)
    if kind is LayerKind.SLICE:
        return args[0][node.start:node.start + node.j]
    if kind is LayerKind.OUTPUT:
        return args[0]
    raise GraphError(f"cannot evaluate {kind}")


def forward(graph: ModelGraph, x: Tensor3) -> Tensor3:
    """Evaluate ``graph`` on one input. Activations are carried in float64."""
    graph = infer_shapes(graph)
    want = graph.shapes[graph.input_id]
    if x.shape != want:
        raise GraphError(f"input shape {x.shape} does not match model input {want}")
    values: dict[int, np.ndarray] = {graph.input_id: np.asarray(x.data, dtype=np.float64)}
    remaining = {nid: len(graph.consumers[nid]) for nid in graph.nodes}
    for nid in graph.topo_order:
        if nid == graph.input_id:
            continue
        node = graph.nodes[nid]
        values[nid] = eval_node(node, [values[s] for s in node.inputs])
        for s in set(node.inputs):
            remaining[s] -= 1
            if remaining[s] == 0 and s != graph.output_id:
                del values[s]
    return Tensor3(values[graph.output_id])


def outputs_close(a: Tensor3, b: Tensor3, rel_tol: float = 1e-4, abs_tol: float = 1e-6) -> bool:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    da = np.asarray(a.data, dtype=np.float64)
    db = np.asarray(b.data, dtype=np.float64)
    return bool(np.all(np.abs(da - db) <= abs_tol + rel_tol * np.abs(db)))
