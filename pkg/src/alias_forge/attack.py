"""Simulated architecture-stealing attack: per-kernel layer classifiers over traces."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .graph import LayerKind, ModelGraph, infer_shapes, to_sequence
from .metrics import ler
from .trace import TraceMatrix, TraceParams, total_latency, trace
from .transforms import Genome, apply_genome

FEATURE_NAMES = ("cycles", "read_bytes", "write_bytes", "read_per_write", "cycles_per_read")
PREDICTOR_KINDS = ("NearestCentroid", "GaussianNB", "KNN")
SPLIT_STREAM = 0xA5


class AttackError(ValueError):
    pass


def engineer(values: np.ndarray) -> np.ndarray:
    """(N, 3) raw trace rows -> (N, 5) log features."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise AttackError(f"trace rows must have 3 features, got shape {v.shape}")
    if np.any(v <= 0):
        raise AttackError("trace features must be strictly positive")
    cyc, rd, wr = v[:, 0], v[:, 1], v[:, 2]
    return np.log(np.column_stack([cyc, rd, wr, rd / wr, cyc / rd]))


@dataclass
class TraceDataset:
    features: np.ndarray  # (n, 5), log space, not yet normalised
    labels: list[LayerKind]
    graph_index: np.ndarray  # which corpus graph each sample came from
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[LayerKind]:
        return sorted(set(self.labels), key=lambda k: k.value)

    def norm_params(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.features.mean(axis=0)
        std = self.features.std(axis=0)
        std[std == 0] = 1.0
        return mean, std

    def normalized(self) -> np.ndarray:
        mean, std = self.norm_params()
        return (self.features - mean) / std


def build_dataset(corpus: Sequence[ModelGraph], params: TraceParams | None = None,
                  provenance: str = "", rng: np.random.Generator | None = None) -> TraceDataset:
    if not corpus:
        raise AttackError("cannot build a trace dataset from an empty corpus")
    feats, labels, owner = [], [], []
    for gi, g in enumerate(corpus):
        tm = trace(g, params, rng)
        if len(tm) == 0:
            continue
        feats.append(engineer(tm.values))
        labels.extend(tm.labels)
        owner.extend([gi] * len(tm))
    if not labels:
        raise AttackError("corpus has no kernel-emitting nodes")
    return TraceDataset(np.vstack(feats), labels, np.array(owner), provenance)


def split_by_graph(n_graphs: int, seed: int, train_fraction: float = 0.8) -> tuple[list[int], list[int]]:
    """Whole-graph train/held-out split; kernels of one graph never straddle it."""
    perm = np.random.default_rng([seed, SPLIT_STREAM]).permutation(n_graphs)
    cut = int(round(train_fraction * n_graphs))
    return sorted(perm[:cut].tolist()), sorted(perm[cut:].tolist())


@dataclass
class AttackPredictor:
    kind: str
    classes: list[LayerKind]
    mean: np.ndarray
    std: np.ndarray
    # NearestCentroid: centroids; GaussianNB: means, variances, log priors; KNN: exemplars
    state: dict[str, np.ndarray] = field(default_factory=dict)
    k: int = 1

    def _z(self, values: np.ndarray) -> np.ndarray:
        return (engineer(values) - self.mean) / self.std

    def predict_rows(self, values: np.ndarray) -> list[LayerKind]:
        if len(values) == 0:
            return []
        z = self._z(values)
        if self.kind == "NearestCentroid":
            d = ((z[:, None, :] - self.state["centroids"][None]) ** 2).sum(-1)
            idx = d.argmin(axis=1)
        elif self.kind == "GaussianNB":
            mu, var = self.state["means"], self.state["vars"]
            ll = -0.5 * (np.log(2 * np.pi * var)[None] + (z[:, None, :] - mu[None]) ** 2 / var[None]).sum(-1)
            idx = (ll + self.state["log_prior"][None]).argmax(axis=1)
        elif self.kind == "KNN":
            idx = self._knn(z)
        else:
            raise AttackError(f"unknown predictor kind {self.kind!r}")
        return [self.classes[i] for i in idx]

    def _knn(self, z: np.ndarray) -> np.ndarray:
        X, y = self.state["X"], self.state["y"].astype(int)
        k = min(self.k, len(X))
        out = np.empty(len(z), dtype=int)
        for start in range(0, len(z), 256):
            block = z[start:start + 256]
            d = ((block[:, None, :] - X[None]) ** 2).sum(-1)
            near = np.argsort(d, axis=1, kind="stable")[:, :k]
            for r, row in enumerate(near):
                votes = np.bincount(y[row], minlength=len(self.classes))
                # ties go to the class of the closest tied neighbour
                tied = set(np.flatnonzero(votes == votes.max()))
                out[start + r] = next(y[i] for i in row if y[i] in tied)
        return out

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "k": self.k,
            "features": list(FEATURE_NAMES),
            "classes": [c.value for c in self.classes],
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "state": {name: arr.tolist() for name, arr in sorted(self.state.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_doc(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "AttackPredictor":
        try:
            kind = doc["kind"]
            if kind not in PREDICTOR_KINDS:
                raise AttackError(f"unknown predictor kind {kind!r}")
            if list(doc.get("features", [])) != list(FEATURE_NAMES):
                raise AttackError(f"predictor feature schema {doc.get('features')} does not match {list(FEATURE_NAMES)}")
            state = {name: np.asarray(v, dtype=np.float64) for name, v in doc["state"].items()}
            return cls(kind, [LayerKind(c) for c in doc["classes"]],
                       np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64),
                       state, int(doc.get("k", 1)))
        except KeyError as exc:
            raise AttackError(f"predictor document is missing key {exc}") from None

    @classmethod
    def loads(cls, text: str) -> "AttackPredictor":
        return cls.from_doc(json.loads(text))


def train(ds: TraceDataset, kind: str = "NearestCentroid", k: int = 5) -> AttackPredictor:
    if kind not in PREDICTOR_KINDS:
        raise AttackError(f"unknown predictor kind {kind!r}; expected one of {PREDICTOR_KINDS}")
    classes = ds.classes
    if len(classes) < 2:
        raise AttackError(f"training needs at least 2 layer kinds, dataset has {len(classes)}")
    mean, std = ds.norm_params()
    z = (ds.features - mean) / std
    y = np.array([classes.index(lab) for lab in ds.labels])
    state: dict[str, np.ndarray] = {}
    if kind == "NearestCentroid":
        state["centroids"] = np.stack([z[y == c].mean(axis=0) for c in range(len(classes))])
    elif kind == "GaussianNB":
        state["means"] = np.stack([z[y == c].mean(axis=0) for c in range(len(classes))])
        # variance floor in the spirit of sklearn's var_smoothing
        floor = 1e-9 * z.var(axis=0).max()
        state["vars"] = np.stack([z[y == c].var(axis=0) for c in range(len(classes))]) + floor + 1e-6
        state["log_prior"] = np.log(np.bincount(y, minlength=len(classes)) / len(y))
    else:
        # canonical exemplar order so training is order-free
        order = np.lexsort(np.column_stack([z, y]).T[::-1])
        state["X"], state["y"] = z[order], y[order].astype(np.float64)
    return AttackPredictor(kind, classes, mean, std, state, k)


def predict_sequence(p: AttackPredictor, tm: TraceMatrix) -> tuple[LayerKind, ...]:
    if len(tm) == 0:
        return ()
    return tuple(p.predict_rows(tm.values))


@dataclass(frozen=True)
class DefenseReport:
    model: str
    original_length: int
    obfuscated_length: int
    ler_extracted_original: float
    ler_extracted_obfuscated: float
    ler_obfuscated_structure: float
    latency_ratio: float
    extracted_original: tuple[LayerKind, ...] = ()
    extracted_obfuscated: tuple[LayerKind, ...] = ()

    def as_dict(self, sequences: bool = False) -> dict[str, Any]:
        d = {
            "model": self.model,
            "original_length": self.original_length,
            "obfuscated_length": self.obfuscated_length,
            "ler_extracted_original": self.ler_extracted_original,
            "ler_extracted_obfuscated": self.ler_extracted_obfuscated,
            "ler_obfuscated_structure": self.ler_obfuscated_structure,
            "latency_ratio": self.latency_ratio,
        }
        if sequences:
            d["extracted_original"] = [k.value for k in self.extracted_original]
            d["extracted_obfuscated"] = [k.value for k in self.extracted_obfuscated]
        return d


def evaluate_defense(base: ModelGraph, genome: Genome, predictor: AttackPredictor,
                     params: TraceParams | None = None,
                     rng: np.random.Generator | None = None) -> DefenseReport:
    params = params or TraceParams()
    base = infer_shapes(base.strip_weights())
    obf = apply_genome(base, genome)
    truth = to_sequence(base)
    tm_org = trace(base, params, rng)
    tm_obf = trace(obf, params, rng)
    ex_org = predict_sequence(predictor, tm_org.without_labels())
    ex_obf = predict_sequence(predictor, tm_obf.without_labels())
    exact = dataclasses.replace(params, noise_sigma=0.0)
    t_star = total_latency(trace(base, exact), params.bandwidth)
    t_obf = total_latency(trace(obf, exact), params.bandwidth)
    return DefenseReport(
        model=base.name,
        original_length=len(truth),
        obfuscated_length=len(to_sequence(obf)),
        ler_extracted_original=ler(ex_org, truth),
        ler_extracted_obfuscated=ler(ex_obf, truth),
        ler_obfuscated_structure=ler(to_sequence(obf), truth),
        latency_ratio=t_obf / t_star,
        extracted_original=ex_org,
        extracted_obfuscated=ex_obf,
    )


def format_table(reports: Sequence[DefenseReport]) -> str:
    head = ("model", "len", "obf_len", "ler_org", "ler_obf", "ler_struct", "T/T*")
    rows = [(r.model, str(r.original_length), str(r.obfuscated_length),
             f"{r.ler_extracted_original:.3f}", f"{r.ler_extracted_obfuscated:.3f}",
             f"{r.ler_obfuscated_structure:.3f}", f"{r.latency_ratio:.3f}") for r in reports]
    if len(reports) > 1:
        med = lambda xs: f"{float(np.median(xs)):.3f}"
        rows.append(("median", "", "",
                     med([r.ler_extracted_original for r in reports]),
                     med([r.ler_extracted_obfuscated for r in reports]),
                     med([r.ler_obfuscated_structure for r in reports]),
                     med([r.latency_ratio for r in reports])))
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(head)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(head)] + [fmt(r) for r in rows]) + "\n"
