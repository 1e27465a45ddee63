"""Analytic per-kernel trace model standing in for a GPU profiler.

Each kernel-emitting node maps to (cycles, read bytes, write bytes)::

    read   = (input elements + weight elements) * E
    write  = output elements * E
    cycles = MACs / lam            Conv2D, FullyConnected
           = output elements * kappa   everything else

Latency of a kernel is roofline-style: ``max(cycles, bytes / bandwidth)``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .graph import LayerKind, ModelGraph, infer_shapes

FEATURES = ("cycles", "read_bytes", "write_bytes")
CSV_HEADER = ("node_id", "label") + FEATURES


@dataclass(frozen=True)
class TraceParams:
    lam: float = 64.0
    kappa: float = 1.0
    bandwidth: float = 256.0
    elem_bytes: int = 4
    noise_sigma: float = 0.0
    seed: int = 0
    include_fused: bool = False


@dataclass(frozen=True)
class KernelTrace:
    node_id: int
    cycles: float
    read_bytes: float
    write_bytes: float
    label: LayerKind | None = None


@dataclass(eq=False)
class TraceMatrix:
    node_ids: list[int]
    values: np.ndarray  # (N, 3): cycles, read, write
    labels: list[LayerKind] | None = None

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def N(self) -> int:
        return len(self.node_ids)

    @property
    def rows(self) -> list[KernelTrace]:
        labels = self.labels or [None] * len(self)
        return [KernelTrace(n, *map(float, v), label=lab)
                for n, v, lab in zip(self.node_ids, self.values, labels)]

    def column(self, feature: str) -> np.ndarray:
        return self.values[:, FEATURES.index(feature)]

    def without_labels(self) -> "TraceMatrix":
        return TraceMatrix(list(self.node_ids), self.values.copy(), None)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TraceMatrix):
            return NotImplemented
        return (self.node_ids == other.node_ids and self.labels == other.labels
                and self.values.shape == other.values.shape
                and bool(np.array_equal(self.values, other.values)))


def _weight_elems(node) -> int:
    if node.kind is LayerKind.CONV2D:
        return node.k1 * node.k2 * (node.c // node.groups) * node.j
    if node.kind is LayerKind.FULLY_CONNECTED:
        return node.c * node.j
    return 0


def kernel_features(graph: ModelGraph, nid: int, params: TraceParams) -> tuple[float, float, float]:
    node = graph.nodes[nid]
    shapes = graph.shapes
    out = shapes[nid]
    out_elems = out[0] * out[1] * out[2]
    in_elems = sum(math.prod(shapes[s]) for s in node.inputs)
    if node.kind is LayerKind.BATCH_NORM:
        w_elems = 4 * out[0]
    else:
        w_elems = _weight_elems(node)
    if node.kind is LayerKind.CONV2D:
        macs = out[1] * out[2] * node.j * node.k1 * node.k2 * (node.c // node.groups)
        cycles = macs / params.lam
    elif node.kind is LayerKind.FULLY_CONNECTED:
        cycles = node.c * node.j / params.lam
    else:
        cycles = out_elems * params.kappa
    e = params.elem_bytes
    return (cycles, float((in_elems + w_elems) * e), float(out_elems * e))


def trace(graph: ModelGraph, params: TraceParams | None = None,
          rng: np.random.Generator | None = None) -> TraceMatrix:
    """Trace every kernel-emitting node of ``graph`` in topological order.

    With ``noise_sigma > 0`` each value is scaled by ``exp(sigma * N(0, 1))``;
    the stream comes from ``rng`` or, if absent, from ``params.seed``.
    """
    params = params or TraceParams()
    graph = infer_shapes(graph)
    ids = graph.kernel_ids(params.include_fused)
    values = np.array([kernel_features(graph, nid, params) for nid in ids],
                      dtype=np.float64).reshape(len(ids), 3)
    if params.noise_sigma > 0 and len(ids):
        rng = rng if rng is not None else np.random.default_rng(params.seed)
        values = values * np.exp(params.noise_sigma * rng.standard_normal(values.shape))
    labels = [graph.nodes[nid].kind for nid in ids]
    return TraceMatrix(ids, values, labels)


def kernel_latency(values: np.ndarray, bandwidth: float = 256.0) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    return np.maximum(values[:, 0], (values[:, 1] + values[:, 2]) / bandwidth)


def total_latency(tm: TraceMatrix, bandwidth: float = 256.0) -> float:
    if len(tm) == 0:
        return 0.0
    return float(kernel_latency(tm.values, bandwidth).sum())


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def export_csv(tm: TraceMatrix, attack_facing: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    labels = tm.labels if (tm.labels is not None and not attack_facing) else [None] * len(tm)
    for nid, lab, row in zip(tm.node_ids, labels, tm.values):
        writer.writerow([nid, "" if lab is None else lab.value] + [_fmt(v) for v in row])
    return buf.getvalue()


def import_csv(text: str) -> TraceMatrix:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
        raise ValueError(f"trace CSV must start with header {','.join(CSV_HEADER)}")
    ids, labels, rows = [], [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(CSV_HEADER):
            raise ValueError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
        ids.append(int(rec[0]))
        labels.append(LayerKind(rec[1]) if rec[1] else None)
        rows.append([float(v) for v in rec[2:]])
    values = np.array(rows, dtype=np.float64).reshape(len(rows), 3)
    has_labels = bool(labels) and all(lab is not None for lab in labels)
    return TraceMatrix(ids, values, labels if has_labels else None)
