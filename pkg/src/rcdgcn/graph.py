"""Directed road network, CSV topology I/O and hop-ring masks."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NODE_HEADER = ["node_id", "road_type", "length_m", "lanes", "aadt"]
EDGE_HEADER = ["from_id", "to_id"]
ROAD_TYPES = (1, 2, 3, 4, 5)  # highway, arterial, minor road, ramp, tunnel


class SchemaError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RoadGraph:
    """Sensors as nodes, directed connectivity as edges.

    ``adjacency[i, j] == 1`` for every edge ``i -> j`` (traffic flows from
    ``i`` into ``j``) and on the diagonal.
    """

    node_ids: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    road_type: np.ndarray
    length_m: np.ndarray
    lanes: np.ndarray
    aadt: np.ndarray

    def __post_init__(self):
        n = len(self.node_ids)
        if len(set(self.node_ids)) != n:
            raise SchemaError("node ids are not unique")
        for name in ("road_type", "length_m", "lanes", "aadt"):
            arr = _frozen(getattr(self, name))
            if arr.shape != (n,):
                raise SchemaError(f"{name} must have one entry per node")
            object.__setattr__(self, name, arr)
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise SchemaError(f"edge ({i}, {j}) has an endpoint outside 0..{n - 1}")
        if np.any(self.lanes < 1) or np.any(self.aadt < 0) or np.any(self.length_m <= 0):
            raise SchemaError("need lanes >= 1, aadt >= 0, length > 0")
        if not set(np.unique(self.road_type).tolist()) <= set(ROAD_TYPES):
            raise SchemaError("road_type must be in 1..5")
        adj = np.eye(n, dtype=np.int8)
        for i, j in self.edges:
            adj[i, j] = 1
        object.__setattr__(self, "adjacency", _frozen(adj))

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def downstream(self, i: int) -> list[int]:
        return sorted({j for a, j in self.edges if a == i and j != i})

    def reversed(self) -> "RoadGraph":
        return RoadGraph(self.node_ids, tuple((j, i) for i, j in self.edges),
                         self.road_type, self.length_m, self.lanes, self.aadt)

    def index(self, node_id: str) -> int:
        return self.node_ids.index(node_id)


def _read_rows(path: Path, header: list[str]) -> list[tuple[int, list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            got = next(reader, None)
            if got is None or [h.strip() for h in got] != header:
                raise SchemaError(f"{path.name}: expected header {','.join(header)}")
            return [(k + 2, [c.strip() for c in row]) for k, row in enumerate(reader) if row]
    except FileNotFoundError:
        raise SchemaError(f"missing topology file {path}") from None


def load_graph(path: str | Path) -> RoadGraph:
    """Read ``nodes.csv`` and ``edges.csv``.

    ``path`` is either the directory holding both files or the nodes file
    itself (the edges file is expected alongside it).
    """
    path = Path(path)
    base = path if path.is_dir() else path.parent
    nodes_file = base / "nodes.csv" if path.is_dir() else path
    ids, rt, length, lanes, aadt = [], [], [], [], []
    seen: dict[str, int] = {}
    for line, row in _read_rows(nodes_file, NODE_HEADER):
        if len(row) != len(NODE_HEADER):
            raise SchemaError(f"nodes.csv row {line}: expected {len(NODE_HEADER)} fields")
        nid = row[0]
        if nid in seen:
            raise SchemaError(f"nodes.csv row {line}: duplicate node id {nid!r}")
        try:
            vals = (int(row[1]), float(row[2]), int(row[3]), float(row[4]))
        except ValueError:
            raise SchemaError(f"nodes.csv row {line}: non-numeric attribute") from None
        if vals[2] < 1:
            raise SchemaError(f"nodes.csv row {line}: lanes must be >= 1")
        if vals[0] not in ROAD_TYPES:
            raise SchemaError(f"nodes.csv row {line}: road_type must be in 1..5")
        if vals[1] <= 0 or vals[3] < 0:
            raise SchemaError(f"nodes.csv row {line}: need length > 0 and aadt >= 0")
        seen[nid] = len(ids)
        ids.append(nid)
        rt.append(vals[0])
        length.append(vals[1])
        lanes.append(vals[2])
        aadt.append(vals[3])
    edges = []
    for line, row in _read_rows(base / "edges.csv", EDGE_HEADER):
        if len(row) != 2:
            raise SchemaError(f"edges.csv row {line}: expected 2 fields")
        for end in row:
            if end not in seen:
                raise SchemaError(f"edges.csv row {line}: unknown node id {end!r}")
        edges.append((seen[row[0]], seen[row[1]]))
    return RoadGraph(tuple(ids), tuple(edges), np.array(rt), np.array(length),
                     np.array(lanes), np.array(aadt))


def save_graph(g: RoadGraph, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "nodes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NODE_HEADER)
        for k, nid in enumerate(g.node_ids):
            w.writerow([nid, int(g.road_type[k]), repr(float(g.length_m[k])),
                        int(g.lanes[k]), repr(float(g.aadt[k]))])
    with open(out / "edges.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EDGE_HEADER)
        for i, j in g.edges:
            w.writerow([g.node_ids[i], g.node_ids[j]])


@dataclass(frozen=True, eq=False)
class HopMask:
    order: int
    mask: np.ndarray  # bool [N, N]


def hop_masks(g: RoadGraph, max_hops: int) -> list[HopMask]:
    """Ring masks for orders ``0..max_hops``.

    Ring ``k`` marks the pairs ``(i, j)`` whose shortest directed path from
    ``i`` to ``j`` has exactly ``k`` edges, so ring 0 is the identity and the
    rings are pairwise disjoint.
    """
    if max_hops < 0:
        raise ValueError("max_hops must be >= 0")
    n = g.n_nodes
    step = g.adjacency.astype(bool) & ~np.eye(n, dtype=bool)
    reach = np.eye(n, dtype=bool)
    rings = [HopMask(0, _frozen(reach))]
    for k in range(1, max_hops + 1):
        nxt = reach | ((reach.astype(np.int64) @ step.astype(np.int64)) > 0)
        rings.append(HopMask(k, _frozen(nxt & ~reach)))
        reach = nxt
    return rings


def stack_masks(masks: list[HopMask]) -> np.ndarray:
    return np.stack([m.mask for m in masks])
