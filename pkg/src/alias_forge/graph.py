"""DNN computation graph: node specs, validation, shape inference and JSON documents."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping

import numpy as np


class LayerKind(str, enum.Enum):
    CONV2D = "Conv2D"
    FULLY_CONNECTED = "FullyConnected"
    RELU = "ReLU"
    BATCH_NORM = "BatchNorm"
    MAX_POOL = "MaxPool2D"
    AVG_POOL = "AvgPool2D"
    ADD = "Add"
    CONCAT = "Concat"
    INPUT = "Input"
    OUTPUT = "Output"
    # zero-copy channel view used by input-channel branching; never emits a kernel
    SLICE = "Slice"

    def __str__(self) -> str:
        return self.value


KERNEL_KINDS = frozenset({
    LayerKind.CONV2D, LayerKind.FULLY_CONNECTED, LayerKind.MAX_POOL,
    LayerKind.AVG_POOL, LayerKind.ADD, LayerKind.CONCAT,
})
FUSED_KINDS = frozenset({LayerKind.RELU, LayerKind.BATCH_NORM})
WEIGHTED_KINDS = frozenset({LayerKind.CONV2D, LayerKind.FULLY_CONNECTED, LayerKind.BATCH_NORM})

Shape = tuple[int, int, int]
LayerSequence = tuple[LayerKind, ...]

WEIGHT_STREAM = 0x5EED


class GraphError(ValueError):
    """Raised when a graph or model document is malformed."""


def is_kernel(kind: LayerKind, include_fused: bool = False) -> bool:
    return kind in KERNEL_KINDS or (include_fused and kind in FUSED_KINDS)


@dataclass(frozen=True, eq=False)
class LayerSpec:
    id: int
    kind: LayerKind
    k1: int = 1
    k2: int = 1
    c: int = 0
    j: int = 0
    stride: int = 1
    in_h: int | None = None
    in_w: int | None = None
    inputs: tuple[int, ...] = ()
    weights: np.ndarray | None = None
    # depthwise convs use groups == c
    groups: int = 1
    # first channel of a Slice view
    start: int = 0

    def expected_weight_shape(self, channels: int | None = None) -> tuple[int, ...] | None:
        if self.kind is LayerKind.CONV2D:
            return (self.k1, self.k2, self.c // max(self.groups, 1), self.j)
        if self.kind is LayerKind.FULLY_CONNECTED:
            return (self.c, self.j)
        if self.kind is LayerKind.BATCH_NORM:
            return (4, self.c if channels is None else channels)
        return None

    def replace(self, **changes) -> "LayerSpec":
        return dataclasses.replace(self, **changes)

    def same_as(self, other: "LayerSpec") -> bool:
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name == "weights":
                if (a is None) != (b is None):
                    return False
                if a is not None and (a.dtype != b.dtype or a.shape != b.shape
                                      or a.tobytes() != b.tobytes()):
                    return False
            elif a != b:
                return False
        return True


@dataclass(eq=False)
class ValidationReport:
    violations: list[tuple[int | None, str, str]] = field(default_factory=list)

    def add(self, node_id: int | None, code: str, message: str) -> None:
        self.violations.append((node_id, code, message))

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self, node_id: int | None = None) -> set[str]:
        return {c for n, c, _ in self.violations if node_id is None or n == node_id}

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def __str__(self) -> str:
        return "\n".join(f"node {n}: [{c}] {m}" for n, c, m in self.violations) or "ok"


class ModelGraph:
    """Immutable DAG of :class:`LayerSpec` nodes with one Input and one Output."""

    def __init__(self, nodes: Mapping[int, LayerSpec] | Iterable[LayerSpec],
                 input_id: int, output_id: int, name: str = "model",
                 shapes: Mapping[int, Shape] | None = None):
        if not isinstance(nodes, Mapping):
            nodes = {n.id: n for n in nodes}
        self.nodes: dict[int, LayerSpec] = dict(nodes)
        self.input_id = input_id
        self.output_id = output_id
        self.name = name
        self.shapes: dict[int, Shape] | None = dict(shapes) if shapes is not None else None

    def __repr__(self) -> str:
        return f"ModelGraph(name={self.name!r}, nodes={len(self.nodes)})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelGraph):
            return NotImplemented
        return (self.name == other.name and self.input_id == other.input_id
                and self.output_id == other.output_id
                and self.nodes.keys() == other.nodes.keys()
                and all(self.nodes[k].same_as(other.nodes[k]) for k in self.nodes))

    __hash__ = None  # type: ignore[assignment]

    @cached_property
    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {nid: [] for nid in self.nodes}
        for nid in sorted(self.nodes):
            for src in self.nodes[nid].inputs:
                if src in out:
                    out[src].append(nid)
        return out

    @cached_property
    def topo_order(self) -> tuple[int, ...]:
        """Kahn order, ready nodes released by ascending id. Raises on cycles."""
        indeg = {nid: 0 for nid in self.nodes}
        for nid, node in self.nodes.items():
            indeg[nid] = sum(1 for s in node.inputs if s in self.nodes)
        heap = [nid for nid, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        order = []
        consumers = self.consumers
        while heap:
            nid = heapq.heappop(heap)
            order.append(nid)
            for dst in consumers[nid]:
                # a node may list the same source twice (x + x)
                indeg[dst] -= self.nodes[dst].inputs.count(nid)
                if indeg[dst] == 0:
                    heapq.heappush(heap, dst)
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return tuple(order)

    @property
    def has_weights(self) -> bool:
        return any(n.weights is not None for n in self.nodes.values())

    def kernel_ids(self, include_fused: bool = False) -> list[int]:
        return [nid for nid in self.topo_order if is_kernel(self.nodes[nid].kind, include_fused)]

    def input_shape(self) -> Shape:
        node = self.nodes[self.input_id]
        return (node.c, node.in_h or 1, node.in_w or 1)

    def strip_weights(self) -> "ModelGraph":
        nodes = {k: (v.replace(weights=None) if v.weights is not None else v)
                 for k, v in self.nodes.items()}
        return ModelGraph(nodes, self.input_id, self.output_id, self.name, self.shapes)

    def structure_hash(self) -> str:
        """Digest of everything but weight values; identifies a base model for genomes."""
        doc = serialize(self, include_weights=False)
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- shape rules

def _conv_out(size: int, stride: int) -> int:
    return math.ceil(size / stride)


def _pool_out(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def node_output_shape(node: LayerSpec, in_shapes: list[Shape]) -> Shape:
    """Output (channels, height, width) of ``node``; raises GraphError on mismatch."""
    kind = node.kind
    if kind is LayerKind.INPUT:
        return (node.c, node.in_h or 1, node.in_w or 1)
    if kind in (LayerKind.ADD, LayerKind.CONCAT):
        if len(in_shapes) < 2:
            raise GraphError(f"{kind} needs at least two inputs")
    elif len(in_shapes) != 1:
        raise GraphError(f"{kind} expects exactly one input, got {len(in_shapes)}")
    c, h, w = in_shapes[0]
    if node.in_h is not None and node.in_h != h or node.in_w is not None and node.in_w != w:
        raise GraphError(f"declared input {node.in_h}x{node.in_w} but receives {h}x{w}")

    if kind is LayerKind.CONV2D:
        if c != node.c:
            raise GraphError(f"Conv2D declares c={node.c} but input has {c} channels")
        if node.groups < 1 or node.c % node.groups or node.j % node.groups:
            raise GraphError(f"groups={node.groups} does not divide c={node.c}, j={node.j}")
        return (node.j, _conv_out(h, node.stride), _conv_out(w, node.stride))
    if kind is LayerKind.FULLY_CONNECTED:
        if c * h * w != node.c:
            raise GraphError(f"FullyConnected declares c={node.c} but input has {c * h * w} features")
        return (node.j, 1, 1)
    if kind in (LayerKind.MAX_POOL, LayerKind.AVG_POOL):
        if h < node.k1 or w < node.k2:
            raise GraphError(f"pool window {node.k1}x{node.k2} exceeds input {h}x{w}")
        return (c, _pool_out(h, node.k1, node.stride), _pool_out(w, node.k2, node.stride))
    if kind in (LayerKind.RELU, LayerKind.BATCH_NORM, LayerKind.OUTPUT):
        if kind is LayerKind.BATCH_NORM and node.c and node.c != c:
            raise GraphError(f"BatchNorm declares c={node.c} but input has {c} channels")
        return (c, h, w)
    if kind is LayerKind.SLICE:
        if node.start < 0 or node.j < 1 or node.start + node.j > c:
            raise GraphError(f"slice [{node.start}, {node.start + node.j}) outside {c} channels")
        return (node.j, h, w)
    if kind is LayerKind.ADD:
        if any(s != in_shapes[0] for s in in_shapes):
            raise GraphError(f"Add inputs disagree in shape: {in_shapes}")
        return in_shapes[0]
    if kind is LayerKind.CONCAT:
        if any(s[1:] != in_shapes[0][1:] for s in in_shapes):
            raise GraphError(f"Concat inputs disagree spatially: {in_shapes}")
        return (sum(s[0] for s in in_shapes), h, w)
    raise GraphError(f"unknown kind {kind}")


_ARITY = {
    LayerKind.INPUT: (0, 0),
    LayerKind.ADD: (2, None),
    LayerKind.CONCAT: (2, None),
}


def _check_params(node: LayerSpec, report: ValidationReport) -> None:
    kind = node.kind
    if kind in (LayerKind.CONV2D, LayerKind.MAX_POOL, LayerKind.AVG_POOL):
        if node.k1 < 1 or node.k2 < 1:
            report.add(node.id, "param", f"kernel {node.k1}x{node.k2} must be positive")
        if node.stride < 1:
            report.add(node.id, "param", f"stride {node.stride} must be positive")
    if kind in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED) and (node.c < 1 or node.j < 1):
        report.add(node.id, "param", f"channels c={node.c}, j={node.j} must be positive")
    if kind is LayerKind.INPUT and node.c < 1:
        report.add(node.id, "param", "Input needs a positive channel count")


def validate(graph: ModelGraph) -> ValidationReport:
    """Collect every violated invariant. An empty report means the graph is well-formed."""
    report = ValidationReport()
    nodes = graph.nodes
    inputs = [n.id for n in nodes.values() if n.kind is LayerKind.INPUT]
    outputs = [n.id for n in nodes.values() if n.kind is LayerKind.OUTPUT]
    if len(inputs) != 1:
        report.add(None, "io", f"expected exactly one Input node, found {len(inputs)}")
    if len(outputs) != 1:
        report.add(None, "io", f"expected exactly one Output node, found {len(outputs)}")
    for attr, kind in (("input_id", LayerKind.INPUT), ("output_id", LayerKind.OUTPUT)):
        nid = getattr(graph, attr)
        if nid not in nodes or nodes[nid].kind is not kind:
            report.add(nid, "io", f"{attr}={nid} is not a {kind} node")

    for node in nodes.values():
        lo, hi = _ARITY.get(node.kind, (1, 1))
        n_in = len(node.inputs)
        if n_in < lo or (hi is not None and n_in > hi):
            report.add(node.id, "arity", f"{node.kind} has {n_in} inputs")
        for src in node.inputs:
            if src not in nodes:
                report.add(node.id, "dangling", f"input {src} does not exist")
        _check_params(node, report)

    try:
        order = graph.topo_order
    except GraphError:
        report.add(None, "cycle", "graph contains a cycle")
        return report

    if graph.input_id in nodes and graph.output_id in nodes:
        fwd = _reach(graph.input_id, graph.consumers)
        preds = {nid: [s for s in n.inputs if s in nodes] for nid, n in nodes.items()}
        bwd = _reach(graph.output_id, preds)
        for nid in sorted(nodes):
            if nid not in fwd:
                report.add(nid, "unreachable", "not reachable from Input")
            if nid not in bwd:
                report.add(nid, "dead", "does not reach Output")

    shapes: dict[int, Shape] = {}
    for nid in order:
        node = nodes[nid]
        if any(s not in shapes for s in node.inputs):
            continue
        try:
            shapes[nid] = node_output_shape(node, [shapes[s] for s in node.inputs])
        except GraphError as exc:
            report.add(nid, "shape", str(exc))
            continue
        if node.weights is not None:
            channels = shapes[nid][0] if node.kind is LayerKind.BATCH_NORM else None
            want = node.expected_weight_shape(channels)
            if want is None:
                report.add(nid, "weights", f"{node.kind} does not take weights")
            elif node.weights.size != math.prod(want) or node.weights.shape not in (want, (node.weights.size,)):
                report.add(nid, "weights",
                           f"expected {'x'.join(map(str, want))}={math.prod(want)} weight values, "
                           f"got {node.weights.size}")
    return report


def _reach(start: int, adj: Mapping[int, Iterable[int]]) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adj.get(stack.pop(), ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def infer_shapes(graph: ModelGraph) -> ModelGraph:
    """Return a copy of ``graph`` annotated with every node's output shape."""
    if graph.shapes is not None and graph.shapes.keys() == graph.nodes.keys():
        return graph
    report = validate(graph)
    if report:
        raise GraphError(f"cannot infer shapes of an invalid graph:\n{report}")
    shapes: dict[int, Shape] = {}
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        shapes[nid] = node_output_shape(node, [shapes[s] for s in node.inputs])
    out = ModelGraph(graph.nodes, graph.input_id, graph.output_id, graph.name, shapes)
    return out


def to_sequence(graph: ModelGraph, include_fused: bool = False) -> LayerSequence:
    """Kernel-emitting layer labels in deterministic topological order."""
    return tuple(graph.nodes[nid].kind for nid in graph.kernel_ids(include_fused))


# ---------------------------------------------------------------- documents

_INT_FIELDS = ("k1", "k2", "c", "j", "stride")


def serialize(graph: ModelGraph, include_weights: bool = True) -> dict[str, Any]:
    nodes = []
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        doc: dict[str, Any] = {"id": n.id, "kind": n.kind.value}
        for f in _INT_FIELDS:
            doc[f] = getattr(n, f)
        doc["in_h"] = n.in_h
        doc["in_w"] = n.in_w
        doc["inputs"] = list(n.inputs)
        if n.groups != 1:
            doc["groups"] = n.groups
        if n.kind is LayerKind.SLICE:
            doc["start"] = n.start
        if include_weights and n.weights is not None:
            w = np.asarray(n.weights, dtype=np.float32)
            doc["weights"] = {"shape": list(w.shape), "data": [float(x) for x in w.ravel()]}
        nodes.append(doc)
    return {"name": graph.name, "input_id": graph.input_id,
            "output_id": graph.output_id, "nodes": nodes}


def dumps(graph: ModelGraph, include_weights: bool = True) -> str:
    return json.dumps(serialize(graph, include_weights), indent=1) + "\n"


def _req(doc: Mapping[str, Any], key: str, where: str):
    if key not in doc:
        raise GraphError(f"{where}: missing required field {key!r}")
    return doc[key]


def deserialize(doc: Mapping[str, Any], init_weights: bool = True, seed: int = 0) -> ModelGraph:
    """Build a graph from a model document.

    Nodes without a ``weights`` entry get seeded random weights when
    ``init_weights`` is set (normal, scale 0.1; BatchNorm gets a sane variance).
    """
    if not isinstance(doc, Mapping):
        raise GraphError("model document must be an object")
    raw_nodes = _req(doc, "nodes", "model")
    if not isinstance(raw_nodes, list):
        raise GraphError("model: 'nodes' must be a list")
    nodes: dict[int, LayerSpec] = {}
    for pos, nd in enumerate(raw_nodes):
        if not isinstance(nd, Mapping) or "id" not in nd:
            raise GraphError(f"nodes[{pos}]: missing required field 'id'")
        nid = nd["id"]
        where = f"node {nid}"
        if not isinstance(nid, int) or isinstance(nid, bool):
            raise GraphError(f"nodes[{pos}]: id must be an integer")
        if nid in nodes:
            raise GraphError(f"{where}: duplicate id")
        kind_name = _req(nd, "kind", where)
        try:
            kind = LayerKind(kind_name)
        except ValueError:
            raise GraphError(f"{where}: unknown kind {kind_name!r}") from None
        kwargs: dict[str, Any] = {}
        for f in _INT_FIELDS + ("groups", "start"):
            if f in nd and nd[f] is not None:
                if not isinstance(nd[f], int):
                    raise GraphError(f"{where}: field {f!r} must be an integer")
                kwargs[f] = nd[f]
        for f in ("in_h", "in_w"):
            if nd.get(f) is not None:
                kwargs[f] = int(nd[f])
        ins = nd.get("inputs", [])
        if not isinstance(ins, list) or not all(isinstance(i, int) for i in ins):
            raise GraphError(f"{where}: 'inputs' must be a list of node ids")
        kwargs["inputs"] = tuple(ins)
        if nd.get("weights") is not None:
            wd = nd["weights"]
            try:
                shape = tuple(int(s) for s in wd["shape"])
                data = np.asarray(wd["data"], dtype=np.float32)
                kwargs["weights"] = data.reshape(shape)
            except (KeyError, TypeError, ValueError) as exc:
                raise GraphError(f"{where}: malformed weights ({exc})") from None
        nodes[nid] = LayerSpec(id=nid, kind=kind, **kwargs)
    graph = ModelGraph(nodes, _req(doc, "input_id", "model"), _req(doc, "output_id", "model"),
                       doc.get("name", "model"))
    if init_weights and any(n.weights is None and n.kind in WEIGHTED_KINDS for n in nodes.values()):
        graph = init_missing_weights(graph, seed)
    return graph


def loads(text: str, init_weights: bool = True, seed: int = 0) -> ModelGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"not a JSON document: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return deserialize(doc, init_weights, seed)


def load(path, init_weights: bool = True, seed: int = 0) -> ModelGraph:
    with open(path) as fh:
        return loads(fh.read(), init_weights, seed)


def save(graph: ModelGraph, path, include_weights: bool = True) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(graph, include_weights))


def init_missing_weights(graph: ModelGraph, seed: int = 0, scale: float = 0.1) -> ModelGraph:
    """Fill absent Conv2D/FC/BatchNorm weights from a per-node seeded stream."""
    g = infer_shapes(graph) if graph.shapes is None else graph
    nodes = dict(g.nodes)
    for nid in sorted(nodes):
        n = nodes[nid]
        if n.weights is not None or n.kind not in WEIGHTED_KINDS:
            continue
        rng = np.random.default_rng([seed, WEIGHT_STREAM, nid])
        if n.kind is LayerKind.BATCH_NORM:
            ch = g.shapes[nid][0]
            w = np.stack([
                1.0 + scale * rng.standard_normal(ch),
                scale * rng.standard_normal(ch),
                scale * rng.standard_normal(ch),
                1.0 + np.abs(scale * rng.standard_normal(ch)),
            ])
        else:
            w = scale * rng.standard_normal(n.expected_weight_shape())
        nodes[nid] = n.replace(weights=w.astype(np.float32))
    return ModelGraph(nodes, g.input_id, g.output_id, g.name, g.shapes)
