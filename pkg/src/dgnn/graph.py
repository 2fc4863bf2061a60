"""Graph containers, TU Dortmund ingestion and vertex-feature construction."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, FormatError, IngestError

logger = logging.getLogger(__name__)

# short names used in result tables -> directory / file prefix
DATASET_ALIASES = {
    "IMDB-B": "IMDB-BINARY",
    "IMDB-M": "IMDB-MULTI",
    "RDT-B": "REDDIT-BINARY",
    "RDT-M5K": "REDDIT-MULTI-5K",
    "PTC": "PTC_MR",
}

SOCIAL_DATASETS = {"IMDB-BINARY", "IMDB-MULTI", "COLLAB", "REDDIT-BINARY", "REDDIT-MULTI-5K"}


def canonical_name(name: str) -> str:
    return DATASET_ALIASES.get(name.upper(), name)


@dataclass(frozen=True, eq=False)
class RawGraph:
    """A parsed graph before features are attached."""

    num_vertices: int
    neighbors: tuple[tuple[int, ...], ...]
    label: int
    node_labels: tuple[int, ...] | None = None

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors], dtype=np.int64)


@dataclass(frozen=True)
class RawDataset:
    name: str
    graphs: tuple[RawGraph, ...]
    num_classes: int
    label_values: tuple[int, ...]
    has_node_labels: bool

    def __len__(self) -> int:
        return len(self.graphs)


@dataclass(frozen=True, eq=False)
class Graph:
    """An undirected graph with a dense vertex-feature matrix and a class label.

    ``neighbors[v]`` is the sorted tuple of vertices adjacent to ``v``.
    The feature matrix is made read-only on construction.
    """

    num_vertices: int
    neighbors: tuple[tuple[int, ...], ...]
    features: np.ndarray
    label: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.num_vertices:
            raise FormatError(
                f"feature matrix must be [{self.num_vertices} x f], got {feats.shape}"
            )
        if len(self.neighbors) != self.num_vertices:
            raise FormatError("neighbor list length differs from vertex count")
        feats = feats.copy()
        feats.flags.writeable = False
        object.__setattr__(self, "features", feats)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def edge_index(self) -> np.ndarray:
        """Directed edge pairs ``(src, dst)`` as a [2 x E] array, both directions listed."""
        src = [u for v, nbrs in enumerate(self.neighbors) for u in nbrs]
        dst = [v for v, nbrs in enumerate(self.neighbors) for _ in nbrs]
        return np.array([src, dst], dtype=np.int64).reshape(2, -1)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Sparse matrix with ``A[v, u] = 1`` for ``u`` in ``neighbors(v)``."""
        src, dst = self.edge_index
        n = self.num_vertices
        return sp.csr_matrix((np.ones(src.size), (dst, src)), shape=(n, n))

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_vertices == other.num_vertices
            and self.neighbors == other.neighbors
            and self.label == other.label
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None

    def permuted(self, perm: Sequence[int]) -> Graph:
        """Relabel vertices: old vertex ``v`` becomes ``perm[v]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.argsort(perm)
        neighbors = tuple(
            tuple(sorted(int(perm[u]) for u in self.neighbors[int(inv[new])]))
            for new in range(self.num_vertices)
        )
        return Graph(self.num_vertices, neighbors, self.features[inv], self.label)


def disjoint_union(graphs: Sequence[Graph], label: int | None = None) -> Graph:
    offset = 0
    neighbors: list[tuple[int, ...]] = []
    for g in graphs:
        neighbors.extend(tuple(u + offset for u in nbrs) for nbrs in g.neighbors)
        offset += g.num_vertices
    feats = np.concatenate([g.features for g in graphs], axis=0)
    return Graph(offset, tuple(neighbors), feats, graphs[0].label if label is None else label)


@dataclass(frozen=True)
class Dataset:
    name: str
    graphs: tuple[Graph, ...]
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        if not self.graphs:
            raise ConfigError("dataset is empty")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        for g in self.graphs:
            if g.feature_dim != self.feature_dim:
                raise FormatError(f"feature dim {g.feature_dim} != dataset dim {self.feature_dim}")
            if not 0 <= g.label < self.num_classes:
                raise FormatError(f"label {g.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, idx):
        return self.graphs[idx]

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)


class FeatureKind(str, enum.Enum):
    NODE_LABELS = "node-labels"
    DEGREE = "degree"
    CONSTANT = "constant"


@dataclass(frozen=True)
class FeatureScheme:
    kind: FeatureKind
    max_degree_cap: int | None = None

    @classmethod
    def node_labels(cls) -> FeatureScheme:
        return cls(FeatureKind.NODE_LABELS)

    @classmethod
    def degree(cls, cap: int | None = None) -> FeatureScheme:
        return cls(FeatureKind.DEGREE, cap)

    @classmethod
    def constant(cls) -> FeatureScheme:
        return cls(FeatureKind.CONSTANT)

    @classmethod
    def parse(cls, text: str, cap: int | None = None) -> FeatureScheme:
        try:
            return cls(FeatureKind(text), cap)
        except ValueError:
            choices = ", ".join(k.value for k in FeatureKind)
            raise ConfigError(f"unknown feature scheme {text!r} (choose from {choices}, auto)") from None


def default_scheme(raw: RawDataset) -> FeatureScheme:
    """Feature scheme conventionally used for a benchmark dataset.

    REDDIT graphs get a constant scalar, other social graphs one-hot degree,
    and anything with node labels gets one-hot node labels.
    """
    name = canonical_name(raw.name).upper()
    if name.startswith("REDDIT"):
        return FeatureScheme.constant()
    if name in SOCIAL_DATASETS or not raw.has_node_labels:
        return FeatureScheme.degree()
    return FeatureScheme.node_labels()


# --- TU format -----------------------------------------------------------------


def _locate(root: Path, name: str) -> Path:
    for candidate in (root / name, root / name / name, root):
        if (candidate / f"{name}_A.txt").is_file():
            return candidate
    raise IngestError(f"cannot find {name}_A.txt under {root}")


def _read_ints(path: Path, columns: int = 1) -> np.ndarray:
    if not path.is_file():
        raise IngestError(f"missing file: {path}")
    rows: list[list[int]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = [p for p in line.replace(",", " ").split()]
            if len(parts) < columns:
                raise FormatError(f"{path.name}:{lineno}: expected {columns} values")
            try:
                rows.append([int(float(p)) for p in parts[:columns]])
            except ValueError:
                raise FormatError(f"{path.name}:{lineno}: non-integer value {line!r}") from None
    return np.array(rows, dtype=np.int64).reshape(-1, columns)


def parse_tu_dataset(root_path: str | Path, name: str) -> RawDataset:
    """Read a dataset in the TU Dortmund plain-text format.

    Edges are symmetrized and deduplicated. Graph labels are remapped to
    ``0..m-1`` in sorted order of their original values.
    """
    name = canonical_name(name)
    root = Path(root_path)
    if not root.is_dir():
        raise IngestError(f"data root does not exist: {root}")
    base = _locate(root, name)
    edges = _read_ints(base / f"{name}_A.txt", 2) - 1
    indicator = _read_ints(base / f"{name}_graph_indicator.txt")[:, 0]
    graph_labels = _read_ints(base / f"{name}_graph_labels.txt")[:, 0]
    node_label_path = base / f"{name}_node_labels.txt"
    node_labels = _read_ints(node_label_path)[:, 0] if node_label_path.is_file() else None

    num_vertices = indicator.size
    if node_labels is not None and node_labels.size != num_vertices:
        raise FormatError(
            f"{node_label_path.name} has {node_labels.size} rows, expected {num_vertices}"
        )
    if edges.size and (edges.min() < 0 or edges.max() >= num_vertices):
        raise FormatError("edge references a vertex absent from the graph indicator")

    graph_ids = np.unique(indicator)
    if graph_ids.size != graph_labels.size:
        raise FormatError(
            f"{graph_ids.size} graph ids in indicator but {graph_labels.size} graph labels"
        )
    # TU files list vertices of each graph contiguously; anything else means a
    # vertex id range is shared between graphs.
    if np.any(np.diff(indicator) < 0):
        raise FormatError("graph indicator is not sorted; a vertex range spans two graphs")
    if not np.array_equal(graph_ids, np.arange(1, graph_ids.size + 1)):
        raise FormatError("graph ids must be 1..N")

    starts = np.searchsorted(indicator, graph_ids, side="left")
    stops = np.searchsorted(indicator, graph_ids, side="right")

    local = np.empty(num_vertices, dtype=np.int64)
    for s, e in zip(starts, stops):
        local[s:e] = np.arange(e - s)
    owner = indicator - 1

    adjacency: list[list[set[int]]] = [
        [set() for _ in range(e - s)] for s, e in zip(starts, stops)
    ]
    for u, v in edges:
        gu, gv = owner[u], owner[v]
        if gu != gv:
            raise FormatError(f"edge ({u + 1}, {v + 1}) joins vertices of graphs {gu + 1} and {gv + 1}")
        adjacency[gu][local[u]].add(int(local[v]))
        adjacency[gu][local[v]].add(int(local[u]))

    label_values = tuple(int(x) for x in np.unique(graph_labels))
    remap = {val: i for i, val in enumerate(label_values)}

    graphs = []
    for gi, (s, e) in enumerate(zip(starts, stops)):
        nbrs = tuple(tuple(sorted(a)) for a in adjacency[gi])
        nl = tuple(int(x) for x in node_labels[s:e]) if node_labels is not None else None
        graphs.append(RawGraph(int(e - s), nbrs, remap[int(graph_labels[gi])], nl))

    if len(label_values) < 2:
        raise FormatError(f"{name}: only one distinct graph label")
    logger.debug("parsed %s: %d graphs, %d classes", name, len(graphs), len(label_values))
    return RawDataset(name, tuple(graphs), len(label_values), label_values, node_labels is not None)


def dataset_checksum(root_path: str | Path, name: str) -> str:
    """SHA-256 over the raw TU files, in fixed filename order."""
    name = canonical_name(name)
    base = _locate(Path(root_path), name)
    digest = hashlib.sha256()
    for suffix in ("A", "graph_indicator", "graph_labels", "node_labels"):
        path = base / f"{name}_{suffix}.txt"
        if path.is_file():
            digest.update(suffix.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def _one_hot(index: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((index.size, width))
    out[np.arange(index.size), index] = 1.0
    return out


def build_features(raw: RawDataset, scheme: FeatureScheme | None = None) -> Dataset:
    """Attach a vertex-feature matrix to every graph according to ``scheme``.

    ``DEGREE`` one-hot has width ``min(max observed degree, cap) + 1``;
    degrees above the cap fall in the last bucket.
    """
    scheme = scheme or default_scheme(raw)
    if scheme.kind is FeatureKind.NODE_LABELS:
        if not raw.has_node_labels:
            raise ConfigError(f"{raw.name} has no node labels; pick the degree or constant scheme")
        values = sorted({v for g in raw.graphs for v in g.node_labels})
        index = {v: i for i, v in enumerate(values)}
        feats = [_one_hot(np.array([index[v] for v in g.node_labels], dtype=np.int64), len(values))
                 for g in raw.graphs]
    elif scheme.kind is FeatureKind.DEGREE:
        max_deg = max((int(g.degrees.max()) if g.num_vertices else 0) for g in raw.graphs)
        if scheme.max_degree_cap is not None:
            if scheme.max_degree_cap < 0:
                raise ConfigError("degree cap must be non-negative")
            max_deg = min(max_deg, scheme.max_degree_cap)
        feats = [_one_hot(np.minimum(g.degrees, max_deg), max_deg + 1) for g in raw.graphs]
    else:
        feats = [np.ones((g.num_vertices, 1)) for g in raw.graphs]

    graphs = tuple(
        Graph(g.num_vertices, g.neighbors, f, g.label) for g, f in zip(raw.graphs, feats)
    )
    dim = graphs[0].feature_dim
    return Dataset(raw.name, graphs, raw.num_classes, dim)


@dataclass(frozen=True)
class DatasetSummary:
    num_graphs: int
    num_classes: int
    mean_vertices: float

    def rounded(self) -> tuple[int, int, float]:
        return self.num_graphs, self.num_classes, round(self.mean_vertices, 1)

    def __str__(self) -> str:
        return (
            f"{self.num_graphs} graphs, {self.num_classes} classes, "
            f"avg |V| {self.mean_vertices:.1f}"
        )


def dataset_summary(dataset: Dataset | RawDataset) -> DatasetSummary:
    sizes = [g.num_vertices for g in dataset.graphs]
    return DatasetSummary(len(sizes), dataset.num_classes, float(np.mean(sizes)))


def load_dataset(
    root_path: str | Path, name: str, scheme: FeatureScheme | None = None
) -> Dataset:
    return build_features(parse_tu_dataset(root_path, name), scheme)


# --- internal format -------------------------------------------------------------


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write ``dataset`` to a single ``.npz`` archive (no pickling)."""
    sizes = np.array([g.num_vertices for g in dataset.graphs], dtype=np.int64)
    degrees = np.concatenate([[len(n) for n in g.neighbors] for g in dataset.graphs]).astype(np.int64)
    flat_nbrs = np.array([u for g in dataset.graphs for n in g.neighbors for u in n], dtype=np.int64)
    meta = json.dumps({"name": dataset.name, "num_classes": dataset.num_classes,
                       "feature_dim": dataset.feature_dim, "format": 1})
    np.savez(
        path,
        meta=np.array(meta),
        sizes=sizes,
        degrees=degrees,
        neighbors=flat_nbrs,
        labels=dataset.labels,
        features=np.concatenate([g.features for g in dataset.graphs], axis=0),
    )


def read_dataset(path: str | Path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        sizes, degrees, flat, labels, feats = (
            z["sizes"], z["degrees"], z["neighbors"], z["labels"], z["features"]
        )
    graphs = []
    v0 = e0 = 0
    for size, label in zip(sizes, labels):
        nbrs = []
        for d in degrees[v0:v0 + size]:
            nbrs.append(tuple(int(u) for u in flat[e0:e0 + d]))
            e0 += d
        graphs.append(Graph(int(size), tuple(nbrs), feats[v0:v0 + size], int(label)))
        v0 += size
    return Dataset(meta["name"], tuple(graphs), meta["num_classes"], meta["feature_dim"])


@dataclass
class GraphBatch:
    """Several graphs packed into one block-diagonal graph for vectorized passes."""

    graphs: Sequence[Graph]
    features: np.ndarray = field(init=False)
    adjacency: sp.csr_matrix = field(init=False)
    pooling: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        self.features = np.concatenate([g.features for g in self.graphs], axis=0)
        sizes = np.array([g.num_vertices for g in self.graphs])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        edges = np.concatenate(
            [g.edge_index + off for g, off in zip(self.graphs, offsets)], axis=1
        )
        owner = np.repeat(np.arange(len(self.graphs)), sizes)
        total = int(sizes.sum())
        self.adjacency = sp.csr_matrix(
            (np.ones(edges.shape[1]), (edges[1], edges[0])), shape=(total, total)
        )
        self.pooling = sp.csr_matrix(
            (np.ones(total), (owner, np.arange(total))), shape=(len(self.graphs), total)
        )

    @property
    def num_vertices(self) -> int:
        return self.features.shape[0]

    def __len__(self) -> int:
        return len(self.graphs)
