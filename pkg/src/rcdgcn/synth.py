"""Deterministic synthetic speed and capacity-feature generator.

Speed at step ``t`` and node ``i``::

    v = free_flow[i] * profile[t % 288] * capacity[t, i] * congestion[t, i] + noise

clipped to ``[0, free_flow[i]]``.

* ``capacity`` is ``open_lane_ratio ** kappa`` while an incident is active
  (``start <= t < end``; overlapping incidents take the minimum). After
  ``end`` it relaxes linearly back to 1 over ``recovery_steps`` steps:
  ``c0 + (1 - c0) * min(1, (t - end + 1) / recovery_steps)``.
* ``congestion`` is ``spill_factor`` when any downstream neighbour's realized
  speed at ``t - 1`` was below ``spill_threshold * free_flow`` of that
  neighbour, else 1. It is a one-step spillback and is not calibrated
  against any traffic-flow theory.
* noise is SplitMix64 Box-Muller (see :mod:`rcdgcn.rng`), draw ``t * N + i``
  of the stream seeded with the scenario seed.

Feature channels follow one of two schemas: ``icm495`` gives incident
occurrence ``I`` and open lane ratio ``O`` (1 when no incident); ``manhattan``
gives road type ``L`` and maximum throughput ``MT = aadt * lanes``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import RoadGraph
from .rng import SplitMix64, derive_seed

STEPS_PER_DAY = 288
FEATURE_SCHEMAS = {"icm495": ("I", "O"), "manhattan": ("L", "MT")}
INCIDENT_KINDS = ("accident", "emergency_construction", "planned_construction")
FREE_FLOW_BY_TYPE = {1: 65.0, 2: 40.0, 3: 30.0, 4: 45.0, 5: 40.0}


@dataclass(frozen=True)
class IncidentEvent:
    node: int
    start: int
    end: int
    open_lane_ratio: float
    kind: str = "accident"

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"incident needs start < end, got {self.start}..{self.end}")
        if not 0.0 <= self.open_lane_ratio <= 1.0:
            raise ValueError("open_lane_ratio must lie in [0, 1]")
        if self.kind not in INCIDENT_KINDS:
            raise ValueError(f"unknown incident kind {self.kind!r}")


def default_daily_profile() -> np.ndarray:
    """Weekday-like multiplier with AM and PM dips; minimum stays above 0.6."""
    hours = np.arange(STEPS_PER_DAY) * 5.0 / 60.0
    am = 0.30 * np.exp(-0.5 * ((hours - 8.0) / 1.0) ** 2)
    pm = 0.32 * np.exp(-0.5 * ((hours - 17.5) / 1.25) ** 2)
    return 1.0 - am - pm


@dataclass
class SyntheticScenario:
    graph: RoadGraph
    horizon: int
    free_flow: np.ndarray
    daily_profile: np.ndarray = field(default_factory=default_daily_profile)
    incidents: list[IncidentEvent] = field(default_factory=list)
    noise_sigma: float = 1.0
    seed: int = 0
    step_minutes: int = 5
    feature_schema: str = "icm495"
    kappa: float = 1.5
    recovery_steps: int = 6
    spill_threshold: float = 0.5
    spill_factor: float = 0.8

    def __post_init__(self):
        self.free_flow = np.asarray(self.free_flow, dtype=np.float64)
        self.daily_profile = np.asarray(self.daily_profile, dtype=np.float64)
        if self.step_minutes != 5:
            raise ValueError("only 5-minute steps are supported")
        if self.free_flow.shape != (self.graph.n_nodes,) or np.any(self.free_flow <= 0):
            raise ValueError("free_flow must be positive, one value per node")
        if self.daily_profile.shape != (STEPS_PER_DAY,):
            raise ValueError("daily_profile needs 288 entries")
        if np.any(self.daily_profile <= 0) or np.any(self.daily_profile > 1):
            raise ValueError("daily_profile values must lie in (0, 1]")
        if self.feature_schema not in FEATURE_SCHEMAS:
            raise ValueError(f"feature_schema must be one of {sorted(FEATURE_SCHEMAS)}")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return FEATURE_SCHEMAS[self.feature_schema]


def capacity_series(s: SyntheticScenario) -> np.ndarray:
    """Capacity multiplier ``[T, N]`` including post-incident recovery."""
    n = s.graph.n_nodes
    cap = np.ones((s.horizon, n))
    for ev in s.incidents:
        if not 0 <= ev.node < n:
            raise IndexError(f"incident node {ev.node} outside 0..{n - 1}")
        c0 = ev.open_lane_ratio ** s.kappa
        lo, hi = max(ev.start, 0), min(ev.end, s.horizon)
        if lo < hi:
            cap[lo:hi, ev.node] = np.minimum(cap[lo:hi, ev.node], c0)
        t = np.arange(max(ev.end, 0), min(ev.end + s.recovery_steps, s.horizon))
        rec = c0 + (1.0 - c0) * np.minimum(1.0, (t - ev.end + 1) / s.recovery_steps)
        cap[t, ev.node] = np.minimum(cap[t, ev.node], rec)
    return cap


def incident_features(s: SyntheticScenario) -> tuple[np.ndarray, np.ndarray]:
    """Occurrence ``I`` and open lane ratio ``O``, each ``[T, N]``."""
    occ = np.zeros((s.horizon, s.graph.n_nodes))
    ratio = np.ones((s.horizon, s.graph.n_nodes))
    for ev in s.incidents:
        lo, hi = max(ev.start, 0), min(ev.end, s.horizon)
        if lo < hi:
            occ[lo:hi, ev.node] = 1.0
            ratio[lo:hi, ev.node] = np.minimum(ratio[lo:hi, ev.node], ev.open_lane_ratio)
    return occ, ratio


def generate(s: SyntheticScenario) -> tuple[np.ndarray, np.ndarray]:
    """Return ``speeds[T, N]`` (mph) and ``features[T, N, L]``."""
    g = s.graph
    n, horizon = g.n_nodes, s.horizon
    cap = capacity_series(s)
    down = (g.adjacency.astype(bool) & ~np.eye(n, dtype=bool)).astype(np.float64)
    if s.noise_sigma > 0:
        noise = s.noise_sigma * SplitMix64(s.seed).normal(horizon * n).reshape(horizon, n)
    else:
        noise = np.zeros((horizon, n))
    ff = s.free_flow
    prof = s.daily_profile
    speeds = np.empty((horizon, n))
    below = np.zeros(n)
    for t in range(horizon):
        cong = np.where(down @ below > 0, s.spill_factor, 1.0)
        v = ff * prof[t % STEPS_PER_DAY] * cap[t] * cong + noise[t]
        v = np.clip(v, 0.0, ff)
        speeds[t] = v
        below = (v < s.spill_threshold * ff).astype(np.float64)

    if s.feature_schema == "icm495":
        occ, ratio = incident_features(s)
        features = np.stack([occ, ratio], axis=-1)
    else:
        road = np.broadcast_to(g.road_type.astype(np.float64), (horizon, n))
        mt = np.broadcast_to((g.aadt * g.lanes).astype(np.float64), (horizon, n))
        features = np.stack([road, mt], axis=-1)
    return speeds, np.ascontiguousarray(features)


# ------------------------------------------------------------- construction


def corridor_network(n_nodes: int, seed: int, corridor_len: int = 10, link_spacing: int = 3) -> RoadGraph:
    """Parallel one-way corridors joined by directed connector links.

    Corridor ``c`` cycles through highway, arterial, minor road and a mixed
    ramp/tunnel corridor. Neighbouring corridors are linked every
    ``link_spacing`` positions, alternating direction. Every node has at
    least one downstream neighbour except the corridor tails.
    """
    if link_spacing < 1:
        raise ValueError("link_spacing must be >= 1")
    rng = SplitMix64(derive_seed(seed, "network"))
    ids, road, length, lanes, aadt, edges = [], [], [], [], [], []
    corridors: list[list[int]] = []
    k = 0
    while k < n_nodes:
        members = list(range(k, min(k + corridor_len, n_nodes)))
        corridors.append(members)
        c = len(corridors) - 1
        for pos, i in enumerate(members):
            if c % 4 == 3:
                rt = 5 if pos in (0, 1) else 4 if pos % 3 == 2 else 2
            else:
                rt = (1, 2, 3)[c % 4]
            base_lanes = {1: 4, 2: 3, 3: 1, 4: 1, 5: 2}[rt]
            ids.append(str(24890000 + 37 * i))
            road.append(rt)
            lanes.append(base_lanes + int(rng.integers(1, 0, 2)[0]))
            length.append(float(np.round(rng.uniform(1, 150.0, 900.0)[0], 1)))
            aadt.append(float(np.round(rng.uniform(1, 4000.0, 20000.0)[0] * lanes[-1])))
        edges += [(members[p], members[p + 1]) for p in range(len(members) - 1)]
        k += corridor_len
    for a, b in zip(corridors[:-1], corridors[1:]):
        for pos in range(link_spacing - 1, min(len(a), len(b)) - 1, link_spacing):
            src, dst = (a[pos], b[pos + 1]) if pos % 2 == 0 else (b[pos], a[pos + 1])
            edges.append((src, dst))
    return RoadGraph(tuple(ids), tuple(edges), np.array(road), np.array(length),
                     np.array(lanes), np.array(aadt))


def free_flow_for(graph: RoadGraph) -> np.ndarray:
    return np.array([FREE_FLOW_BY_TYPE[int(r)] for r in graph.road_type])


def random_incidents(graph: RoadGraph, horizon: int, count: int, seed: int,
                     margin: int = 24) -> list[IncidentEvent]:
    """Draw ``count`` incidents with kind-dependent duration and closure.

    accident: 30-90 min, one or two lanes blocked; emergency construction:
    1-3 h, partial closure; planned construction: 2-6 h, all lanes closed.
    Single-lane links always close fully.
    """
    rng = SplitMix64(derive_seed(seed, "incidents"))
    out = []
    dur_range = {"accident": (6, 19), "emergency_construction": (12, 37), "planned_construction": (24, 73)}
    for _ in range(count):
        u = rng.uniform(5)
        kind = INCIDENT_KINDS[min(int(u[0] * 3), 2)]
        node = min(int(u[1] * graph.n_nodes), graph.n_nodes - 1)
        lo, hi = dur_range[kind]
        dur = lo + int(u[2] * (hi - lo))
        start = margin + int(u[3] * (horizon - 2 * margin - dur))
        n_lanes = int(graph.lanes[node])
        if kind == "planned_construction" or n_lanes == 1:
            ratio = 0.0
        else:
            closed = 1 + int(u[4] * min(2, n_lanes - 1))
            ratio = (n_lanes - closed) / n_lanes
        out.append(IncidentEvent(node, start, start + dur, ratio, kind))
    return sorted(out, key=lambda e: (e.start, e.node))


# ----------------------------------------------------------------------- I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def write_matrix_csv(path: Path, header: list[str], rows: np.ndarray) -> None:
    lines = [",".join(header)]
    lines += [",".join(map(_fmt, r)) for r in rows.tolist()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_dataset(speeds: np.ndarray, features: np.ndarray, out_dir: str | Path,
                   node_ids: list[str] | tuple[str, ...] | None = None,
                   feature_names: list[str] | tuple[str, ...] | None = None) -> None:
    """Write ``speeds.csv`` plus one ``features_<name>.csv`` per channel."""
    speeds = np.asarray(speeds, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[:2] != speeds.shape:
        raise ValueError(f"features {features.shape} inconsistent with speeds {speeds.shape}")
    n, n_feat = speeds.shape[1], features.shape[2]
    node_ids = [str(x) for x in (node_ids if node_ids is not None else range(n))]
    names = list(feature_names) if feature_names is not None else [f"f{k}" for k in range(n_feat)]
    if len(node_ids) != n or len(names) != n_feat:
        raise ValueError("node_ids/feature_names do not match array shapes")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "speeds.csv", node_ids, speeds)
    for k, name in enumerate(names):
        write_matrix_csv(out / f"features_{name}.csv", node_ids, features[:, :, k])


INCIDENT_HEADER = ["node_id", "start", "end", "open_lane_ratio", "kind"]


def write_incidents(path: str | Path, incidents: list[IncidentEvent], node_ids) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INCIDENT_HEADER)
        for ev in incidents:
            w.writerow([node_ids[ev.node], ev.start, ev.end, _fmt(ev.open_lane_ratio), ev.kind])


def read_incidents(path: str | Path, graph: RoadGraph) -> list[IncidentEvent]:
    lookup = {nid: k for k, nid in enumerate(graph.node_ids)}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(IncidentEvent(lookup[row["node_id"]], int(row["start"]), int(row["end"]),
                                     float(row["open_lane_ratio"]), row["kind"]))
    return out
