"""Function-preserving obfuscation rewrites and the per-layer knob genome."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from .graph import (
    LayerKind, LayerSpec, ModelGraph, GraphError, Shape,
    infer_shapes, is_kernel, node_output_shape,
)


class TransformError(GraphError):
    """A rewrite cannot be applied at the requested position."""


class Op(str, enum.Enum):
    BRANCH_IN = "BranchIn"
    BRANCH_OUT = "BranchOut"
    DEEPEN = "Deepen"
    SKIP = "Skip"

    def __str__(self) -> str:
        return self.value


# intra-slot application order
OP_ORDER = (Op.BRANCH_IN, Op.BRANCH_OUT, Op.DEEPEN, Op.SKIP)
ELIGIBLE_KINDS = (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED)
LINEAR_KINDS = frozenset({
    LayerKind.CONV2D, LayerKind.FULLY_CONNECTED, LayerKind.AVG_POOL, LayerKind.ADD,
    LayerKind.CONCAT, LayerKind.BATCH_NORM, LayerKind.SLICE,
})
DEEPEN_KERNELS = (1, 3, 5)
SKIP_KERNEL = 3


def identity_kernel(k: int, channels: int) -> np.ndarray:
    """k x k x c x c kernel with a single 1 at the centre tap where in == out channel."""
    if k < 1 or k % 2 == 0:
        raise TransformError(f"identity kernel needs an odd size, got {k}")
    w = np.zeros((k, k, channels, channels), dtype=np.float32)
    mid = (k + 1) // 2 - 1
    w[mid, mid, np.arange(channels), np.arange(channels)] = 1.0
    return w


class _Rewriter:
    """Mutable working copy of a graph; every edit keeps consumers and shapes current."""

    def __init__(self, graph: ModelGraph):
        graph = infer_shapes(graph)
        self.name = graph.name
        self.input_id = graph.input_id
        self.output_id = graph.output_id
        self.nodes = dict(graph.nodes)
        self.shapes = dict(graph.shapes)
        self.consumers = {k: list(v) for k, v in graph.consumers.items()}
        self.next_id = max(self.nodes) + 1
        self.materialize = graph.has_weights

    def build(self) -> ModelGraph:
        return ModelGraph(self.nodes, self.input_id, self.output_id, self.name, self.shapes)

    def _new_id(self) -> int:
        nid = self.next_id
        self.next_id += 1
        return nid

    def _add(self, node: LayerSpec) -> None:
        self.nodes[node.id] = node
        self.consumers.setdefault(node.id, [])
        for s in node.inputs:
            self.consumers[s].append(node.id)
        self.shapes[node.id] = node_output_shape(node, [self.shapes[s] for s in node.inputs])

    def _redirect(self, old: int, new: int, keep: Iterable[int] = ()) -> None:
        """Point every consumer of ``old`` (except ``keep``) at ``new``."""
        keep = set(keep)
        self.consumers.setdefault(new, [])
        moved = [d for d in self.consumers[old] if d not in keep]
        for dst in dict.fromkeys(moved):
            node = self.nodes[dst]
            self.nodes[dst] = node.replace(inputs=tuple(new if s == old else s for s in node.inputs))
            self.consumers[new].append(dst)
        self.consumers[old] = [d for d in self.consumers[old] if d in keep]

    def node(self, nid: int) -> LayerSpec:
        try:
            return self.nodes[nid]
        except KeyError:
            raise TransformError(f"no node with id {nid}") from None

    # -- rewrites ---------------------------------------------------------

    def branch_output(self, lid: int, m: int | None = None) -> tuple[int, int]:
        """Split output channels at m; returns (second sibling id, concat id)."""
        x = self.node(lid)
        if x.kind not in ELIGIBLE_KINDS or x.groups != 1:
            raise TransformError(f"output branching needs a dense Conv2D/FullyConnected, node {lid} is {x.kind}")
        if x.j < 2:
            raise TransformError(f"node {lid} has j={x.j}; output branching needs j >= 2")
        m = x.j // 2 if m is None else m
        if not 1 <= m < x.j:
            raise TransformError(f"split point m={m} outside [1, {x.j})")
        wa = wb = None
        if x.weights is not None:
            w = x.weights.reshape(x.expected_weight_shape())
            wa, wb = w[..., :m], w[..., m:]
        b_id, cat_id = self._new_id(), self._new_id()
        a = x.replace(j=m, weights=wa)
        self.nodes[lid] = a
        self.shapes[lid] = node_output_shape(a, [self.shapes[s] for s in a.inputs])
        self._add(x.replace(id=b_id, j=x.j - m, weights=wb))
        self._redirect(lid, cat_id)
        self._add(LayerSpec(id=cat_id, kind=LayerKind.CONCAT, c=x.j, j=x.j, inputs=(lid, b_id)))
        return b_id, cat_id

    def branch_input(self, lid: int, m: int | None = None) -> tuple[int, int]:
        """Split input channels at m; returns (second sibling id, add id)."""
        x = self.node(lid)
        if x.kind is not LayerKind.CONV2D or x.groups != 1:
            raise TransformError(f"input branching needs a dense Conv2D, node {lid} is {x.kind}")
        if x.c < 2:
            raise TransformError(f"node {lid} has c={x.c}; input branching needs c >= 2")
        if len(x.inputs) != 1:
            raise TransformError(f"node {lid} must have a single predecessor")
        m = x.c // 2 if m is None else m
        if not 1 <= m < x.c:
            raise TransformError(f"split point m={m} outside [1, {x.c})")
        src = x.inputs[0]
        wa = wb = None
        if x.weights is not None:
            w = x.weights.reshape(x.expected_weight_shape())
            wa, wb = w[:, :, :m, :], w[:, :, m:, :]
        sa, sb = self._new_id(), self._new_id()
        b_id, add_id = self._new_id(), self._new_id()
        self._add(LayerSpec(id=sa, kind=LayerKind.SLICE, c=x.c, j=m, start=0, inputs=(src,)))
        self._add(LayerSpec(id=sb, kind=LayerKind.SLICE, c=x.c, j=x.c - m, start=m, inputs=(src,)))
        self.consumers[src].remove(lid)
        a = x.replace(c=m, inputs=(sa,), weights=wa)
        self.nodes[lid] = a
        self.consumers[sa].append(lid)
        self._add(x.replace(id=b_id, c=x.c - m, inputs=(sb,), weights=wb))
        self._redirect(lid, add_id)
        self._add(LayerSpec(id=add_id, kind=LayerKind.ADD, c=x.j, j=x.j, inputs=(lid, b_id)))
        return b_id, add_id

    def skip(self, lid: int) -> tuple[int, int]:
        """Residual zero-conv side branch after ``lid``; returns (conv id, add id)."""
        x = self.node(lid)
        if not is_kernel(x.kind, include_fused=True):
            raise TransformError(f"cannot insert a skip branch after {x.kind} node {lid}")
        ch = self.shapes[lid][0]
        z_id, add_id = self._new_id(), self._new_id()
        w = np.zeros((SKIP_KERNEL, SKIP_KERNEL, ch, ch), dtype=np.float32) if self.materialize else None
        self._add(LayerSpec(id=z_id, kind=LayerKind.CONV2D, k1=SKIP_KERNEL, k2=SKIP_KERNEL,
                            c=ch, j=ch, inputs=(lid,), weights=w))
        self._redirect(lid, add_id, keep=(z_id,))
        self._add(LayerSpec(id=add_id, kind=LayerKind.ADD, c=ch, j=ch, inputs=(lid, z_id)))
        return z_id, add_id

    def activation_site(self, lid: int) -> int:
        """Node after which a deepening conv may go: the layer's ReLU, or the layer itself if linear."""
        cur = lid
        for _ in range(2):
            nxt = self.consumers.get(cur, [])
            if len(nxt) != 1:
                break
            kind = self.nodes[nxt[0]].kind
            if kind is LayerKind.RELU:
                return nxt[0]
            if kind is not LayerKind.BATCH_NORM:
                break
            cur = nxt[0]
        x = self.node(lid)
        if x.kind is LayerKind.RELU or x.kind in LINEAR_KINDS:
            return lid
        raise TransformError(f"node {lid} ({x.kind}) is followed by no ReLU and is not linear")

    def deepen(self, lid: int, k: int = 3) -> int:
        if k < 1 or k % 2 == 0:
            raise TransformError(f"deepening needs an odd kernel size, got {k}")
        site = self.activation_site(lid)
        ch = self.shapes[site][0]
        d_id = self._new_id()
        w = identity_kernel(k, ch) if self.materialize else None
        self._redirect(site, d_id)
        self._add(LayerSpec(id=d_id, kind=LayerKind.CONV2D, k1=k, k2=k, c=ch, j=ch,
                            inputs=(site,), weights=w))
        return d_id


def branch_output(graph: ModelGraph, layer_id: int, m: int | None = None) -> ModelGraph:
    rw = _Rewriter(graph)
    rw.branch_output(layer_id, m)
    return rw.build()


def branch_input(graph: ModelGraph, layer_id: int, m: int | None = None) -> ModelGraph:
    rw = _Rewriter(graph)
    rw.branch_input(layer_id, m)
    return rw.build()


def skip(graph: ModelGraph, layer_id: int) -> ModelGraph:
    rw = _Rewriter(graph)
    rw.skip(layer_id)
    return rw.build()


def deepen(graph: ModelGraph, layer_id: int, k: int = 3) -> ModelGraph:
    rw = _Rewriter(graph)
    rw.deepen(layer_id, k)
    return rw.build()


# ---------------------------------------------------------------- genomes

@dataclass(frozen=True)
class Slot:
    layer_id: int
    applicable: tuple[Op, ...]
    active: frozenset[Op] = frozenset()
    # params for every applicable op, kept even while the op is inactive
    params: Mapping[Op, Mapping[str, int]] = field(default_factory=dict)
    bounds: Mapping[Op, Mapping[str, tuple[int, int]]] = field(default_factory=dict)

    def with_ops(self, active: Iterable[Op], params: Mapping[Op, Mapping[str, int]] | None = None) -> "Slot":
        return Slot(self.layer_id, self.applicable, frozenset(active),
                    dict(self.params) if params is None else params, self.bounds)

    def key(self) -> tuple:
        return (self.layer_id,
                tuple((op.value, tuple(sorted(self.params.get(op, {}).items())))
                      for op in OP_ORDER if op in self.active))


@dataclass(frozen=True)
class Genome:
    base_hash: str
    slots: tuple[Slot, ...]
    base_name: str = ""

    def __len__(self) -> int:
        return len(self.slots)

    def key(self) -> tuple:
        return tuple(s.key() for s in self.slots)

    def op_count(self) -> int:
        return sum(len(s.active) for s in self.slots)

    def to_doc(self) -> dict[str, Any]:
        return {
            "base_model": {"name": self.base_name, "hash": self.base_hash},
            "slots": [
                {"layer_id": s.layer_id,
                 "ops": [{"op": op.value, "params": dict(s.params.get(op, {}))}
                         for op in OP_ORDER if op in s.active]}
                for s in self.slots
            ],
        }


def param_bounds(node: LayerSpec, op: Op) -> dict[str, tuple[int, int]]:
    if op is Op.BRANCH_OUT:
        return {"m": (1, node.j - 1)}
    if op is Op.BRANCH_IN:
        return {"m": (1, node.c - 1)}
    if op is Op.DEEPEN:
        return {"k": (DEEPEN_KERNELS[0], DEEPEN_KERNELS[-1])}
    return {}


def default_params(node: LayerSpec, op: Op) -> dict[str, int]:
    if op is Op.BRANCH_OUT:
        return {"m": node.j // 2}
    if op is Op.BRANCH_IN:
        return {"m": node.c // 2}
    if op is Op.DEEPEN:
        return {"k": 3}
    return {}


def applicable_ops(graph: ModelGraph, layer_id: int) -> tuple[Op, ...]:
    node = graph.nodes[layer_id]
    ops = []
    dense = node.groups == 1
    if node.kind is LayerKind.CONV2D and dense and node.c >= 2 and len(node.inputs) == 1:
        ops.append(Op.BRANCH_IN)
    if node.kind in ELIGIBLE_KINDS and dense and node.j >= 2:
        ops.append(Op.BRANCH_OUT)
    rw = _SiteProbe(graph)
    try:
        rw.activation_site(layer_id)
        ops.append(Op.DEEPEN)
    except TransformError:
        pass
    if is_kernel(node.kind, include_fused=True):
        ops.append(Op.SKIP)
    return tuple(ops)


class _SiteProbe(_Rewriter):
    # read-only view sufficient for activation_site; avoids copying the graph
    def __init__(self, graph: ModelGraph):
        self.nodes = graph.nodes
        self.consumers = graph.consumers


def eligible_layers(graph: ModelGraph) -> list[int]:
    """Dense and depthwise Conv2D / FullyConnected layers, in topological order."""
    return [nid for nid in graph.topo_order if graph.nodes[nid].kind in ELIGIBLE_KINDS]


def empty_genome(base: ModelGraph, ops: Iterable[Op] = OP_ORDER) -> Genome:
    allowed = set(ops)
    slots = []
    for lid in eligible_layers(base):
        app = tuple(op for op in applicable_ops(base, lid) if op in allowed)
        node = base.nodes[lid]
        params = {op: default_params(node, op) for op in app}
        bounds = {op: param_bounds(node, op) for op in app}
        slots.append(Slot(lid, app, frozenset(), params, bounds))
    return Genome(base.structure_hash(), tuple(slots), base.name)


def random_genome(base: ModelGraph, rng_seed: int | np.random.Generator,
                  ops: Iterable[Op] = OP_ORDER) -> Genome:
    """Include each applicable op per layer independently with probability 1/2."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    template = empty_genome(base, ops)
    slots = []
    for slot in template.slots:
        draws = rng.random(len(slot.applicable))
        slots.append(slot.with_ops(op for op, u in zip(slot.applicable, draws) if u < 0.5))
    return Genome(template.base_hash, tuple(slots), template.base_name)


def genome_from_doc(doc: Mapping[str, Any], base: ModelGraph) -> Genome:
    template = empty_genome(base)
    want = doc.get("base_model", {}).get("hash")
    if want is not None and want != template.base_hash:
        raise GraphError(f"genome was built for model {want}, not {template.base_hash}")
    by_layer = {s.layer_id: s for s in template.slots}
    chosen: dict[int, Slot] = {}
    for i, sd in enumerate(doc.get("slots", [])):
        lid = sd.get("layer_id")
        if lid not in by_layer:
            raise GraphError(f"slot {i}: layer {lid} is not an eligible layer of the base model")
        slot = by_layer[lid]
        params = dict(slot.params)
        active = []
        for od in sd.get("ops", []):
            try:
                op = Op(od["op"])
            except (KeyError, ValueError):
                raise GraphError(f"slot {i}: unknown op {od!r}") from None
            if op not in slot.applicable:
                raise GraphError(f"slot {i}: {op} is not applicable to layer {lid}")
            active.append(op)
            given = {k: int(v) for k, v in od.get("params", {}).items()}
            for name, value in given.items():
                lo, hi = slot.bounds[op].get(name, (None, None))
                if lo is None or not lo <= value <= hi:
                    raise GraphError(f"slot {i}: {op} param {name}={value} out of range")
            params[op] = given or params[op]
        chosen[lid] = slot.with_ops(active, params)
    slots = tuple(chosen.get(s.layer_id, s) for s in template.slots)
    return Genome(template.base_hash, slots, base.name)


def apply_genome(base: ModelGraph, genome: Genome) -> ModelGraph:
    """Apply every slot's ops (BranchIn, BranchOut, Deepen, Skip) to its layer."""
    rw = _Rewriter(base)
    for idx, slot in enumerate(genome.slots):
        if not slot.active:
            continue
        try:
            _apply_slot(rw, slot)
        except (TransformError, GraphError, KeyError) as exc:
            raise TransformError(f"slot {idx} (layer {slot.layer_id}): {exc}") from exc
    return rw.build()


def _apply_slot(rw: _Rewriter, slot: Slot) -> None:
    lid = slot.layer_id
    members = [lid]
    rep = lid
    p = slot.params
    if Op.BRANCH_IN in slot.active:
        b, rep = rw.branch_input(lid, p.get(Op.BRANCH_IN, {}).get("m"))
        members.append(b)
    if Op.BRANCH_OUT in slot.active:
        m = p.get(Op.BRANCH_OUT, {}).get("m")
        for mem in list(members):
            _, cat = rw.branch_output(mem, m)
            if rep == lid:
                rep = cat
    if Op.DEEPEN in slot.active:
        rw.deepen(rep, p.get(Op.DEEPEN, {}).get("k", 3))
    if Op.SKIP in slot.active:
        rw.skip(rep)
