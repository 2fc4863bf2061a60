from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from dgnn.graph import Graph

DATA_ROOT = Path(__file__).parent / "data"

ACCEPTANCE: list[tuple[str, bool, str]] = []


def write_tu(root: Path, name: str, graphs, node_labels=True) -> Path:
    """Write ``graphs`` = [(num_vertices, [(u, v), ...], label), ...] as TU files (1-based ids)."""
    base = root / name
    base.mkdir(parents=True, exist_ok=True)
    edges, indicator, labels, nlabels = [], [], [], []
    offset = 0
    for gid, (n, elist, label) in enumerate(graphs, 1):
        indicator += [gid] * n
        labels.append(label)
        nlabels += [0] * n
        for u, v in elist:
            edges.append((u + offset + 1, v + offset + 1))
            edges.append((v + offset + 1, u + offset + 1))
        offset += n
    (base / f"{name}_A.txt").write_text("".join(f"{u}, {v}\n" for u, v in edges))
    (base / f"{name}_graph_indicator.txt").write_text("".join(f"{i}\n" for i in indicator))
    (base / f"{name}_graph_labels.txt").write_text("".join(f"{y}\n" for y in labels))
    if node_labels:
        (base / f"{name}_node_labels.txt").write_text("".join(f"{x}\n" for x in nlabels))
    return base


def random_graph(rng: np.random.Generator, max_vertices: int = 8, feature_dim: int = 3,
                 label: int = 0) -> Graph:
    n = int(rng.integers(1, max_vertices + 1))
    adj = [set() for _ in range(n)]
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < 0.4:
                adj[u].add(v)
                adj[v].add(u)
    feats = rng.normal(size=(n, feature_dim))
    return Graph(n, tuple(tuple(sorted(a)) for a in adj), feats, label)


def numerical_grad(f, x: np.ndarray, h: float = 1e-5, entries=None) -> dict:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (mutated in place)."""
    out = {}
    flat = x.reshape(-1)
    for i in (range(flat.size) if entries is None else entries):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@pytest.fixture
def mutag_root() -> Path:
    return DATA_ROOT


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
